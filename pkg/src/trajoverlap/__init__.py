"""Test-train overlap auditing, stratified evaluation and mobility-law reranking
for next-location prediction datasets."""

from .core import GridSpec, LocationVocabulary, Point, Trajectory, haversine, tessellate
from .errors import InputError, PipelineError, TrajOverlapError, ValidationError
from .ingest import DatasetSplit, PipelineConfig, parse, preprocess, read_split, split, write_split
from .laws import (UserLawFeatures, VisitationLawModel, fit_gamma, fit_law_model, radius_of_gyration,
                   top_n_law_locations, user_features, visitation_scores)
from .overlap import (BIN_LABELS, LocationIndex, OverlapMetric, OverlapRecord, bin_fractions, compute_overlaps,
                      max_overlap, stratify)
from .predictors import EvalReport, ScoreTable, TransitionMatrix, acc_at_k, load_scores, mmc_fit, mmc_score_table
from .rerank import Featurizer, RerankSample, ScorerModel, TrainConfig, build_samples, rerank, train

__version__ = "0.1.0"

__all__ = [
    "BIN_LABELS", "DatasetSplit", "EvalReport", "Featurizer", "GridSpec", "InputError", "LocationIndex",
    "LocationVocabulary", "OverlapMetric", "OverlapRecord", "PipelineConfig", "PipelineError", "Point",
    "RerankSample", "ScoreTable", "ScorerModel", "TrainConfig", "TrajOverlapError", "Trajectory",
    "TransitionMatrix", "UserLawFeatures", "ValidationError", "VisitationLawModel", "acc_at_k", "bin_fractions",
    "build_samples", "compute_overlaps", "fit_gamma", "fit_law_model", "haversine", "load_scores",
    "max_overlap", "mmc_fit", "mmc_score_table", "parse", "preprocess", "radius_of_gyration", "read_split",
    "rerank", "split", "stratify", "tessellate", "top_n_law_locations", "train", "user_features",
    "visitation_scores", "write_split",
]
