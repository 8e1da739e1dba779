"""Markov-chain baseline, score-file I/O and ACC@k evaluation.

A test trajectory ``p_1 .. p_n`` is evaluated by predicting ``p_n`` from
the prefix ``p_1 .. p_{n-1}``; length-1 trajectories are skipped.

Score files are JSON Lines, one object per trajectory::

    {"traj": 17, "cand": [4, 9, 2], "score": [0.5, 0.25, 0.25]}

with equal-length arrays and non-increasing scores.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .core import Trajectory
from .errors import ValidationError
from .overlap import BIN_LABELS, OverlapMetric

log = logging.getLogger(__name__)

DEFAULT_DEPTH = 100


# --------------------------------------------------------------------------
# score tables


class ScoreTable:
    """Ranked candidate locations per trajectory.

    Rankings are stored in canonical order: score descending, equal scores
    by ascending location id.
    """

    def __init__(self, rankings: Mapping[int, Iterable[tuple[int, float]]], name: str = "model"):
        self.name = name
        self._cands: dict[int, tuple[int, ...]] = {}
        self._scores: dict[int, tuple[float, ...]] = {}
        for tid, ranked in rankings.items():
            ranked = [(int(c), float(s)) for c, s in ranked]
            if len({c for c, _ in ranked}) != len(ranked):
                raise ValidationError(f"trajectory {tid}: duplicate candidate locations")
            if any(not math.isfinite(s) for _, s in ranked):
                raise ValidationError(f"trajectory {tid}: non-finite score")
            ranked.sort(key=lambda cs: (-cs[1], cs[0]))
            self._cands[int(tid)] = tuple(c for c, _ in ranked)
            self._scores[int(tid)] = tuple(s for _, s in ranked)

    @property
    def depth(self) -> int:
        return max((len(c) for c in self._cands.values()), default=0)

    def ids(self) -> list[int]:
        return sorted(self._cands)

    def candidates(self, tid: int) -> tuple[int, ...]:
        return self._cands[tid]

    def scores(self, tid: int) -> tuple[float, ...]:
        return self._scores[tid]

    def ranking(self, tid: int) -> list[tuple[int, float]]:
        return list(zip(self._cands[tid], self._scores[tid]))

    def score_of(self, tid: int) -> dict[int, float]:
        return dict(zip(self._cands[tid], self._scores[tid]))

    def top(self, tid: int, k: int) -> tuple[int, ...]:
        return self._cands[tid][:k]

    def subset(self, ids: Iterable[int]) -> "ScoreTable":
        return ScoreTable({i: self.ranking(i) for i in ids}, self.name)

    def __len__(self):
        return len(self._cands)

    def __contains__(self, tid):
        return tid in self._cands

    def __eq__(self, other):
        if not isinstance(other, ScoreTable):
            return NotImplemented
        return self._cands == other._cands and self._scores == other._scores


def load_scores(path, expected_ids: Iterable[int] | None = None, name: str | None = None) -> ScoreTable:
    """Read and validate a score file."""
    path = Path(path)
    rankings: dict[int, list[tuple[int, float]]] = {}
    with open(path, "rb") as fh:
        for no, raw in enumerate(fh, 1):
            if raw.endswith(b"\r\n"):
                raise ValidationError(f"{path}:{no}: CRLF line ending")
            line = raw.decode("utf-8").strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                tid, cand, score = int(obj["traj"]), obj["cand"], obj["score"]
            except (ValueError, KeyError, TypeError) as exc:
                raise ValidationError(f"{path}:{no}: malformed line ({exc})") from exc
            if not isinstance(cand, list) or not isinstance(score, list) or len(cand) != len(score):
                raise ValidationError(f"{path}:{no}: 'cand' and 'score' must be equal-length arrays")
            if tid in rankings:
                raise ValidationError(f"{path}:{no}: duplicate trajectory {tid}")
            try:
                score = [float(s) for s in score]
                cand = [int(c) for c in cand]
            except (TypeError, ValueError) as exc:
                raise ValidationError(f"{path}:{no}: {exc}") from exc
            if any(b > a for a, b in zip(score, score[1:])):
                raise ValidationError(f"{path}:{no}: scores of trajectory {tid} are not non-increasing")
            rankings[tid] = list(zip(cand, score))
    try:
        table = ScoreTable(rankings, name or path.stem)
    except ValidationError as exc:
        raise ValidationError(f"{path}: {exc}") from exc
    if table.depth < 5:
        log.warning("%s: ranking depth %d is below 5", path, table.depth)
    if expected_ids is not None:
        missing = set(expected_ids) - set(rankings)
        if missing:
            msg = f"{path}: {len(missing)} expected trajectories have no scores (e.g. {sorted(missing)[:5]})"
            warnings.warn(msg)
            log.warning(msg)
    return table


def write_scores(table: ScoreTable, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for tid in table.ids():
            fh.write(json.dumps({"traj": tid, "cand": list(table.candidates(tid)),
                                 "score": list(table.scores(tid))}, separators=(",", ":")) + "\n")


# --------------------------------------------------------------------------
# Markov chain


@dataclass
class TransitionMatrix:
    """First-order transition counts plus a global popularity fallback.

    ``counts[a][b]`` is the number of ``a -> b`` steps in the training
    trajectories; ``visits[l]`` the number of training points at ``l``.
    """

    counts: dict[int, Counter]
    visits: np.ndarray

    @property
    def n_locations(self) -> int:
        return len(self.visits)

    def row(self, a: int) -> dict[int, float]:
        c = self.counts.get(a)
        if not c:
            return {}
        total = sum(c.values())
        return {b: n / total for b, n in c.items()}

    @property
    def rows(self) -> dict[int, dict[int, float]]:
        return {a: self.row(a) for a in sorted(self.counts)}

    def fallback(self) -> np.ndarray:
        total = self.visits.sum()
        return self.visits / total if total else np.full(len(self.visits), 1.0 / max(len(self.visits), 1))

    def popularity_order(self) -> np.ndarray:
        """All location ids by visit count descending, ties by id."""
        ids = np.arange(len(self.visits))
        return np.lexsort((ids, -self.visits))


def mmc_fit(train: Iterable[Trajectory], n_locations: int | None = None) -> TransitionMatrix:
    train = list(train)
    counts: dict[int, Counter] = defaultdict(Counter)
    highest = -1
    for tr in train:
        locs = tr.locations
        highest = max(highest, max(locs))
        for a, b in zip(locs, locs[1:]):
            counts[a][b] += 1
    n = n_locations if n_locations is not None else highest + 1
    visits = np.zeros(n, dtype=np.int64)
    for tr in train:
        np.add.at(visits, np.fromiter(tr.locations, dtype=np.int64), 1)
    return TransitionMatrix(dict(counts), visits)


def mmc_score(model: TransitionMatrix, current: Trajectory | Sequence[int], k_depth: int = DEFAULT_DEPTH
              ) -> list[tuple[int, float]]:
    """Rank next-location candidates from the last location of ``current``.

    Successors seen in training come first (probability descending, ties by
    id). The list is then padded from global popularity, scaled by the
    smallest transition probability so scores stay non-increasing.
    """
    locs = current.locations if isinstance(current, Trajectory) else tuple(current)
    row = model.row(locs[-1])
    ranked = sorted(row.items(), key=lambda bs: (-bs[1], bs[0]))[:k_depth]
    if len(ranked) >= k_depth:
        return ranked
    scale = ranked[-1][1] if ranked else 1.0
    fb = model.fallback()
    taken = {b for b, _ in ranked}
    for loc in model.popularity_order().tolist():
        if len(ranked) >= k_depth:
            break
        if loc not in taken:
            ranked.append((loc, float(fb[loc]) * scale))
    return ranked


def mmc_score_table(model: TransitionMatrix, trajectories: Iterable[Trajectory], k_depth: int = DEFAULT_DEPTH,
                    name: str = "MMC") -> ScoreTable:
    """Scores for every trajectory of length >= 2, predicting its last point."""
    return ScoreTable({tr.tid: mmc_score(model, tr.prefix(), k_depth)
                       for tr in trajectories if len(tr) >= 2}, name)


def targets(trajectories: Iterable[Trajectory]) -> tuple[dict[int, int], int]:
    """(trajectory id -> true next location, number of skipped length-1 trajectories)."""
    truth, skipped = {}, 0
    for tr in trajectories:
        if len(tr) < 2:
            skipped += 1
        else:
            truth[tr.tid] = tr.target
    return truth, skipped


# --------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    model: str
    k: int
    n: int
    hits: int
    overall: float
    per_bin: dict = field(default_factory=dict)   # metric -> bin -> accuracy or None
    counts: dict = field(default_factory=dict)    # metric -> bin -> trajectories

    def to_dict(self) -> dict:
        return {"model": self.model, "k": self.k, "n": self.n, "hits": self.hits,
                "overall": self.overall, "per_bin": self.per_bin, "counts": self.counts}

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(d["model"], d["k"], d["n"], d["hits"], d["overall"], d.get("per_bin", {}), d.get("counts", {}))


def _normalise_strata(strata) -> dict[str, dict[int, str]]:
    out = {}
    for metric, recs in (strata or {}).items():
        key = OverlapMetric.parse(metric).value
        if isinstance(recs, Mapping):
            out[key] = dict(recs)
        else:
            out[key] = {r.test_id: r.bin for r in recs}
    return out


def hit_vector(scores: ScoreTable, truth: Mapping[int, int], k: int) -> dict[int, bool]:
    hits = {}
    for tid in scores.ids():
        if tid not in truth:
            raise ValidationError(f"no ground truth for trajectory {tid}")
        hits[tid] = truth[tid] in scores.top(tid, k)
    return hits


def acc_at_k(scores: ScoreTable, truth: Mapping[int, int], k: int = 5, strata=None) -> EvalReport:
    """Fraction of scored trajectories whose true location is in the top ``k``.

    ``strata`` maps a metric to either overlap records or a ``{test id:
    bin}`` dict; per-bin accuracy is ``None`` for empty bins.
    """
    if k < 1:
        raise ValidationError("k must be >= 1")
    hits = hit_vector(scores, truth, k)
    n = len(hits)
    total = sum(hits.values())
    report = EvalReport(scores.name, k, n, total, total / n if n else 0.0)
    for metric, bins in _normalise_strata(strata).items():
        per_hits = {b: 0 for b in BIN_LABELS}
        per_n = {b: 0 for b in BIN_LABELS}
        for tid, hit in hits.items():
            if tid not in bins:
                raise ValidationError(f"trajectory {tid} has no {metric} overlap bin")
            per_n[bins[tid]] += 1
            per_hits[bins[tid]] += hit
        report.counts[metric] = per_n
        report.per_bin[metric] = {b: (per_hits[b] / per_n[b] if per_n[b] else None) for b in BIN_LABELS}
    return report


def write_report_json(report: EvalReport, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _fmt(x) -> str:
    return "" if x is None else f"{x:.3f}"


def write_table_csv(reports: Sequence[EvalReport], path) -> None:
    """One row per model: overall ACC@k then metric x bin columns."""
    metrics = [m.value for m in OverlapMetric if any(m.value in r.per_bin for r in reports)]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", f"acc@{reports[0].k if reports else 5}"]
                   + [f"{m}_{b}" for m in metrics for b in BIN_LABELS])
        for r in reports:
            w.writerow([r.model, _fmt(r.overall)]
                       + [_fmt(r.per_bin.get(m, {}).get(b)) for m in metrics for b in BIN_LABELS])
