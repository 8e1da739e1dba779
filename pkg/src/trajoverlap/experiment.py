"""In-memory end-to-end runs of the MMC + law-reranking workflow.

The command line runs the same steps through files; this module keeps
them in memory for tests and demos.
"""

from __future__ import annotations

from dataclasses import dataclass

from .ingest import DatasetSplit, PipelineConfig, preprocess, split
from .laws import DEFAULT_GAMMA, fit_law_model, user_features
from .overlap import METRICS, compute_overlaps
from .predictors import ScoreTable, mmc_fit, mmc_score_table, targets
from .rerank import (Featurizer, ScorerModel, TrainConfig, build_samples, contexts, evaluate_improvement, rerank,
                     train)
from .synthetic import law_driven_records


@dataclass
class RerankRun:
    split: DatasetSplit
    overlaps: dict
    base: ScoreTable
    reranked: ScoreTable
    model: ScorerModel
    report: dict


def law_rerank(ds: DatasetSplit, depth: int | None = None, gamma: float | None = DEFAULT_GAMMA,
               config: TrainConfig = TrainConfig(), metrics=METRICS) -> RerankRun:
    """Fit MMC and the law model on train, learn the scorer on valid, rerank test.

    ``depth=None`` ranks the full vocabulary so the reranker can reach
    every location.
    """
    V = len(ds.vocabulary)
    depth = depth or V
    overlaps = compute_overlaps(ds.test, ds.train, metrics)
    mmc = mmc_fit(ds.train, V)
    truth_valid, _ = targets(ds.valid)
    truth_test, _ = targets(ds.test)
    base_valid = mmc_score_table(mmc, ds.valid, depth)
    base_test = mmc_score_table(mmc, ds.test, depth)
    featurize = Featurizer(user_features(ds.by_user("train"), ds.vocabulary),
                           fit_law_model(ds.train, ds.vocabulary, gamma))
    ctxs = contexts(ds.valid + ds.test)
    samples = build_samples(base_valid, truth_valid, ctxs, featurize, V, config.k, config.seed)
    model = train(samples, config)
    reranked = rerank(model, base_test, ctxs, featurize)
    report = evaluate_improvement(base_test, reranked, truth_test, overlaps)
    return RerankRun(ds, overlaps, base_test, reranked, model, report)


def synthetic_law_rerank(seed: int, **corpus) -> RerankRun:
    """:func:`law_rerank` on a :func:`law_driven_records` corpus with default preprocessing."""
    pre = preprocess(law_driven_records(seed, **corpus), PipelineConfig())
    ds = split(pre.trajectories, pre.vocabulary)
    return law_rerank(ds, config=TrainConfig(seed=seed))
