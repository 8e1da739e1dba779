"""Learning-to-rank on top of any next-location predictor.

Each (trajectory, candidate location) pair is described by eight
features::

    [nl_score, dist_u, top1_hit, top2_hit, top3_hit, top4_hit, top5_hit, re_u]

``nl_score`` is the predictor's score for the candidate (0 when the
candidate is not in its ranked list), ``dist_u`` and ``re_u`` are the
user's distance-law and returner/explorer features, and ``topN_hit`` is 1
when the candidate is the N-th most likely location under the visitation
law around the trajectory's last observed location.

A one-hidden-layer network trained with binary cross-entropy rescores the
predictor's candidates, which are then re-sorted.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from .core import Trajectory
from .errors import PipelineError, ValidationError
from .laws import UserLawFeatures, VisitationLawModel, top_n_law_locations
from .overlap import BIN_LABELS, OverlapMetric
from .predictors import ScoreTable, acc_at_k

log = logging.getLogger(__name__)

N_FEATURES = 8
FEATURE_NAMES = ("nl_score", "dist_u", "top1", "top2", "top3", "top4", "top5", "re_u")


class RerankSample(NamedTuple):
    traj: int
    cand: int
    features: tuple[float, ...]
    label: int


class Context(NamedTuple):
    """What is known about a trajectory at prediction time."""

    user: str
    anchor: int


def contexts(trajectories: Iterable[Trajectory]) -> dict[int, Context]:
    """Prediction contexts for every trajectory of length >= 2 (anchor = last prefix point)."""
    return {t.tid: Context(t.user, t.locations[-2]) for t in trajectories if len(t) >= 2}


class Featurizer:
    def __init__(self, features: Mapping[str, UserLawFeatures], law: VisitationLawModel, n_top: int = 5):
        self.features = features
        self.law = law
        self.n_top = n_top

    def __call__(self, ctx: Context, candidates: Sequence[int], nl: Mapping[int, float]) -> np.ndarray:
        uf = self.features.get(ctx.user)
        dist_u, re_u = (uf.dist_u, float(uf.re_u)) if uf is not None else (0.0, 0.0)
        top = top_n_law_locations(self.law, ctx.anchor, self.n_top)
        cands = np.asarray(candidates, dtype=np.int64)
        X = np.zeros((cands.size, N_FEATURES))
        X[:, 0] = [nl.get(c, 0.0) for c in cands.tolist()]
        X[:, 1] = dist_u
        for n, loc in enumerate(top):
            X[:, 2 + n] = cands == loc
        X[:, 7] = re_u
        return X


# --------------------------------------------------------------------------
# samples


def build_samples(scores: ScoreTable, truth: Mapping[int, int], ctxs: Mapping[int, Context],
                  featurize: Featurizer, n_locations: int, k: int = 20, seed: int = 0) -> list[RerankSample]:
    """One positive plus ``k`` uniformly sampled negatives per scored trajectory.

    Negatives are drawn without replacement from every vocabulary location
    except the true one; with ``n_locations - 1 <= k`` all of them are used.
    """
    if k < 1:
        raise ValidationError("k must be >= 1")
    rng = np.random.default_rng(seed)
    out = []
    for tid in scores.ids():
        if tid not in truth or tid not in ctxs:
            raise ValidationError(f"trajectory {tid} has no ground truth or context")
        pos = truth[tid]
        n_neg = min(k, n_locations - 1)
        neg = rng.choice(n_locations - 1, size=n_neg, replace=False)
        neg = np.where(neg >= pos, neg + 1, neg)
        cands = [pos] + neg.tolist()
        X = featurize(ctxs[tid], cands, scores.score_of(tid))
        for j, c in enumerate(cands):
            out.append(RerankSample(tid, c, tuple(X[j].tolist()), int(j == 0)))
    return out


def write_samples(samples: Sequence[RerankSample], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s in samples:
            fh.write(json.dumps({"traj": s.traj, "cand": s.cand, "features": list(s.features), "label": s.label},
                                separators=(",", ":")) + "\n")


def read_samples(path) -> list[RerankSample]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                feats = tuple(float(x) for x in d["features"])
                if len(feats) != N_FEATURES:
                    raise ValueError(f"expected {N_FEATURES} features")
                out.append(RerankSample(int(d["traj"]), int(d["cand"]), feats, int(d["label"])))
            except (KeyError, TypeError, ValueError) as exc:
                raise ValidationError(f"{path}:{no}: {exc}") from exc
    return out


def sample_arrays(samples: Sequence[RerankSample]) -> tuple[np.ndarray, np.ndarray]:
    X = np.array([s.features for s in samples], dtype=np.float64).reshape(-1, N_FEATURES)
    y = np.array([s.label for s in samples], dtype=np.float64)
    return X, y


# --------------------------------------------------------------------------
# scorer network


@dataclass
class TrainConfig:
    k: int = 20
    learning_rate: float = 0.05
    epochs: int = 40
    batch_size: int = 64
    momentum: float = 0.9
    hidden: int = 32
    seed: int = 0
    holdout: float = 0.1
    max_restarts: int = 3
    final_lr_fraction: float = 0.1  # linear decay of the step size to this fraction by the last epoch

    def __post_init__(self):
        if self.k < 1 or not self.learning_rate > 0 or self.epochs < 1 or self.batch_size < 1 or self.hidden < 1:
            raise ValidationError(f"invalid training configuration {self}")


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _softplus(z):
    return np.logaddexp(0.0, z)


def n_params(hidden: int) -> int:
    return N_FEATURES * hidden + hidden + hidden + 1


def unpack(theta: np.ndarray, hidden: int):
    i = N_FEATURES * hidden
    W1 = theta[:i].reshape(N_FEATURES, hidden)
    b1 = theta[i:i + hidden]
    w2 = theta[i + hidden:i + 2 * hidden]
    b2 = theta[i + 2 * hidden]
    return W1, b1, w2, b2


def logits(theta: np.ndarray, X: np.ndarray, hidden: int) -> np.ndarray:
    W1, b1, w2, b2 = unpack(theta, hidden)
    return np.maximum(X @ W1 + b1, 0.0) @ w2 + b2


def bce_loss_and_grad(theta: np.ndarray, X: np.ndarray, y: np.ndarray, hidden: int) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy of the network on (X, y) and its gradient."""
    W1, b1, w2, b2 = unpack(theta, hidden)
    a = X @ W1 + b1
    h = np.maximum(a, 0.0)
    z = h @ w2 + b2
    loss = float(np.mean(_softplus(z) - y * z))
    dz = (_sigmoid(z) - y) / len(y)
    gw2 = h.T @ dz
    gb2 = dz.sum()
    da = np.outer(dz, w2) * (a > 0)
    gW1 = X.T @ da
    gb1 = da.sum(axis=0)
    return loss, np.concatenate([gW1.ravel(), gb1, gw2, [gb2]])


@dataclass
class ScorerModel:
    """8 -> hidden (ReLU) -> 1 (logistic) network with stored standardisation.

    ``identity=True`` makes :meth:`predict` return the raw ``nl_score``
    feature, a pass-through used to check the reranking plumbing.
    """

    hidden: int
    theta: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    identity: bool = False
    config: dict = field(default_factory=dict)
    history: list = field(default_factory=list)

    @classmethod
    def passthrough(cls) -> "ScorerModel":
        return cls(1, np.zeros(n_params(1)), np.zeros(N_FEATURES), np.ones(N_FEATURES), identity=True)

    @classmethod
    def zeros(cls, hidden: int = 32) -> "ScorerModel":
        return cls(hidden, np.zeros(n_params(hidden)), np.zeros(N_FEATURES), np.ones(N_FEATURES))

    def standardise(self, X: np.ndarray) -> np.ndarray:
        return (X - self.mean) / self.std

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != N_FEATURES:
            raise ValidationError(f"expected feature matrix with {N_FEATURES} columns, got shape {X.shape}")
        if self.identity:
            return X[:, 0].copy()
        return _sigmoid(logits(self.theta, self.standardise(X), self.hidden))

    def to_dict(self) -> dict:
        W1, b1, w2, b2 = unpack(self.theta, self.hidden)
        return {"layers": [N_FEATURES, self.hidden, 1], "identity": self.identity,
                "W1": W1.ravel().tolist(), "b1": b1.tolist(), "w2": w2.tolist(), "b2": float(b2),
                "mean": self.mean.tolist(), "std": self.std.tolist(),
                "config": self.config, "history": self.history}

    @classmethod
    def from_dict(cls, d: dict) -> "ScorerModel":
        layers = d["layers"]
        if layers[0] != N_FEATURES or layers[2] != 1:
            raise ValidationError(f"unsupported layer sizes {layers}")
        hidden = int(layers[1])
        theta = np.concatenate([np.asarray(d["W1"], float), np.asarray(d["b1"], float),
                                np.asarray(d["w2"], float), [float(d["b2"])]])
        if theta.size != n_params(hidden):
            raise ValidationError("scorer weights do not match layer sizes")
        return cls(hidden, theta, np.asarray(d["mean"], float), np.asarray(d["std"], float),
                   bool(d.get("identity", False)), d.get("config", {}), d.get("history", []))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "ScorerModel":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def _init_theta(hidden: int, rng: np.random.Generator) -> np.ndarray:
    W1 = rng.normal(0.0, math.sqrt(2.0 / N_FEATURES), (N_FEATURES, hidden))
    b1 = np.full(hidden, 0.01)
    w2 = rng.normal(0.0, math.sqrt(1.0 / hidden), hidden)
    return np.concatenate([W1.ravel(), b1, w2, [0.0]])


def train(samples: Sequence[RerankSample] | tuple[np.ndarray, np.ndarray], config: TrainConfig = TrainConfig()
          ) -> ScorerModel:
    """Mini-batch gradient descent with momentum on the mean BCE.

    A shuffled ``config.holdout`` fraction is kept aside and its loss
    recorded per epoch in ``model.history``. On divergence the learning
    rate is halved and training restarts, at most ``max_restarts`` times.
    """
    X, y = sample_arrays(samples) if not isinstance(samples, tuple) else samples
    if len(np.unique(y)) < 2:
        raise ValidationError("training samples need both labels")
    rng = np.random.default_rng(config.seed)
    order = rng.permutation(len(y))
    n_hold = int(len(y) * config.holdout) if len(y) >= 20 else 0
    hold, fit = order[:n_hold], order[n_hold:]
    mean = X[fit].mean(axis=0)
    std = X[fit].std(axis=0)
    std = np.where(std > 1e-12, std, 1.0)
    Xs = (X - mean) / std
    lr = config.learning_rate
    for attempt in range(config.max_restarts + 1):
        with np.errstate(over="ignore", invalid="ignore"):  # divergence is detected explicitly
            theta, history, ok = _sgd(Xs[fit], y[fit], Xs[hold], y[hold], config, lr,
                                      np.random.default_rng([config.seed, attempt]))
        if ok:
            cfg = asdict(config)
            cfg["effective_learning_rate"] = lr
            return ScorerModel(config.hidden, theta, mean, std, False, cfg, history)
        log.warning("training diverged at learning rate %g; halving", lr)
        lr /= 2.0
    raise PipelineError(f"training diverged after {config.max_restarts} restarts")


def _sgd(X, y, Xh, yh, config: TrainConfig, lr: float, rng: np.random.Generator):
    H = config.hidden
    theta = _init_theta(H, rng)
    vel = np.zeros_like(theta)
    history = []
    n = len(y)
    for epoch in range(config.epochs):
        frac = epoch / max(config.epochs - 1, 1)
        step = lr * (1.0 - (1.0 - config.final_lr_fraction) * frac)
        perm = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = perm[start:start + config.batch_size]
            loss, g = bce_loss_and_grad(theta, X[idx], y[idx], H)
            if not math.isfinite(loss) or not np.all(np.isfinite(g)):
                return theta, history, False
            vel = config.momentum * vel - step * g
            theta = theta + vel
        ref_X, ref_y = (Xh, yh) if len(yh) else (X, y)
        epoch_loss, _ = bce_loss_and_grad(theta, ref_X, ref_y, H)
        if not math.isfinite(epoch_loss):
            return theta, history, False
        history.append(epoch_loss)
    return theta, history, True


# --------------------------------------------------------------------------
# reranking and evaluation


def rerank(model: ScorerModel, scores: ScoreTable, ctxs: Mapping[int, Context], featurize: Featurizer,
           name: str | None = None) -> ScoreTable:
    """Rescore every candidate of every trajectory and re-sort (ties by lower id)."""
    out = {}
    for tid in scores.ids():
        if tid not in ctxs:
            raise ValidationError(f"trajectory {tid} has no prediction context")
        cands = scores.candidates(tid)
        X = featurize(ctxs[tid], cands, scores.score_of(tid))
        out[tid] = list(zip(cands, model.predict(X).tolist()))
    return ScoreTable(out, name or f"{scores.name}+RR")


def relative_improvement(base: float | None, new: float | None) -> float | None:
    """(new - base) / base, or None when undefined (base missing or zero)."""
    if base is None or new is None or base == 0:
        return None
    return (new - base) / base


def format_relative(x: float | None) -> str:
    return "undefined" if x is None else f"{x * 100:+.2f}%"


def evaluate_improvement(base: ScoreTable, reranked: ScoreTable, truth: Mapping[int, int], strata=None,
                         k: int = 5) -> dict:
    """ACC@k before and after reranking, overall and per (metric, bin)."""
    if base.ids() != reranked.ids():
        raise ValidationError("base and reranked tables cover different trajectories")
    rb = acc_at_k(base, truth, k, strata)
    rr = acc_at_k(reranked, truth, k, strata)
    report = {
        "k": k, "base_model": base.name, "reranked_model": reranked.name, "n": rb.n,
        "overall": {"base": rb.overall, "reranked": rr.overall,
                    "relative": relative_improvement(rb.overall, rr.overall)},
        "per_bin": {},
    }
    for metric in rb.per_bin:
        report["per_bin"][metric] = {
            b: {"n": rb.counts[metric][b], "base": rb.per_bin[metric][b], "reranked": rr.per_bin[metric][b],
                "relative": relative_improvement(rb.per_bin[metric][b], rr.per_bin[metric][b])}
            for b in BIN_LABELS}
    return report


def write_improvement(report: dict, directory, stem: str = "improvement") -> list[Path]:
    """JSON report plus a CSV with one "acc (+x%)" cell per metric and bin."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    pj = d / f"{stem}.json"
    with open(pj, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    pc = d / f"{stem}.csv"
    metrics = [m.value for m in OverlapMetric if m.value in report["per_bin"]]

    def cell(entry):
        if entry["reranked"] is None:
            return "undefined"
        return f"{entry['reranked']:.3f} ({format_relative(entry['relative'])})"

    with open(pc, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "overall"] + [f"{m}_{b}" for m in metrics for b in BIN_LABELS])
        w.writerow([report["reranked_model"], cell(report["overall"])]
                   + [cell(report["per_bin"][m][b]) for m in metrics for b in BIN_LABELS])
    return [pj, pc]
