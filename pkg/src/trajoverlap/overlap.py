"""Test-train trajectory overlap: JS, LCST and OFE with max-over-train aggregation.

All three metrics look only at the sequence of location ids; timestamps
are ignored. A test trajectory's overlap is the maximum metric value over
every training trajectory, with ties resolved towards the lowest training
trajectory id.

The pruned path (:class:`LocationIndex`) only scores training
trajectories that can beat the running maximum:

* JS: intersection sizes for every train trajectory come from one pass
  over the inverted index, so the score is exact without set operations.
* LCST: candidates are visited in decreasing order of the multiset
  intersection size, an upper bound on the common-subsequence length, and
  the scan stops once the bound falls below the best length found.
* OFE: only train trajectories ending at the same location can score
  above zero.
"""

from __future__ import annotations

import bisect
import csv
import json
from collections import Counter, defaultdict
from concurrent.futures import ProcessPoolExecutor
from enum import Enum
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .core import Trajectory
from .errors import InputError, ValidationError

BIN_LABELS = ("0-20", "20-40", "40-60", "60-80", "80-100")
_BIN_EDGES = (0.2, 0.4, 0.6, 0.8)


class OverlapMetric(str, Enum):
    JS = "js"
    LCST = "lcst"
    OFE = "ofe"

    @classmethod
    def parse(cls, value) -> "OverlapMetric":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise InputError(f"unknown overlap metric {value!r}") from None


METRICS = tuple(OverlapMetric)


class OverlapRecord(NamedTuple):
    test_id: int
    metric: OverlapMetric
    score: float
    argmax_train: int
    bin: str


def bin_of(score: float) -> str:
    """Half-open bins [lo, hi); the top bin is closed so 1.0 lands in 80-100."""
    if not 0.0 <= score <= 1.0:
        raise InputError(f"overlap score {score} outside [0, 1]")
    return BIN_LABELS[bisect.bisect_right(_BIN_EDGES, score)]


def _seq(x) -> tuple:
    seq = x.locations if isinstance(x, Trajectory) else tuple(x)
    if not seq:
        raise InputError("overlap metrics need non-empty trajectories")
    return seq


# --------------------------------------------------------------------------
# pairwise metrics


def js(query, ref, variant: str = "similarity") -> float:
    """Jaccard overlap of the location sets of ``query`` (test) and ``ref`` (train).

    ``variant="distance"`` returns the Jaccard distance
    ``(|ref∪query| - |ref∩query|) / |ref∪query|`` instead; it is computed by
    full scan since the index prunes for similarity.
    """
    r, p = set(_seq(query)), set(_seq(ref))
    inter = len(r & p)
    union = len(r) + len(p) - inter
    if variant == "similarity":
        return inter / union
    if variant == "distance":
        return (union - inter) / union
    raise InputError(f"unknown JS variant {variant!r}")


def lcs_length(ref, query) -> int:
    """Longest common subsequence length by the standard DP recursion."""
    p, r = _seq(ref), _seq(query)
    prev = [0] * (len(r) + 1)
    for i in range(1, len(p) + 1):
        cur = [0] * (len(r) + 1)
        pi = p[i - 1]
        for j in range(1, len(r) + 1):
            if pi == r[j - 1]:
                cur[j] = prev[j - 1] + 1
            else:
                cur[j] = prev[j] if prev[j] >= cur[j - 1] else cur[j - 1]
        prev = cur
    return prev[-1]


def lcst(ref, query) -> float:
    """Common-subsequence length of train ``ref`` and test ``query``, divided by ``|query|``."""
    return lcs_length(ref, query) / len(_seq(query))


def common_suffix_length(query, ref) -> int:
    r, p = _seq(query), _seq(ref)
    n = min(len(r), len(p))
    k = 0
    while k < n and r[-1 - k] == p[-1 - k]:
        k += 1
    return k


def ofe(query, ref) -> float:
    """Length of the common suffix of test ``query`` and train ``ref``, divided by ``|query|``."""
    return common_suffix_length(query, ref) / len(_seq(query))


class BitParallelLCS:
    """LCS lengths against a fixed sequence using big-integer bit vectors.

    One O(|other|) loop of word operations per pair instead of the
    O(|query|·|ref|) table.
    """

    def __init__(self, seq: Sequence[int]):
        self.m = len(seq)
        self.full = (1 << self.m) - 1
        masks: dict[int, int] = defaultdict(int)
        for i, c in enumerate(seq):
            masks[c] |= 1 << i
        self.masks = dict(masks)

    def length(self, other: Sequence[int]) -> int:
        v = self.full
        masks = self.masks
        for c in other:
            u = v & masks.get(c, 0)
            v = ((v + u) | (v - u)) & self.full
        return self.m - v.bit_count()


_PAIR_SCORE = {
    OverlapMetric.JS: lambda query, ref, variant: js(query, ref, variant),
    OverlapMetric.LCST: lambda query, ref, variant: lcst(ref, query),
    OverlapMetric.OFE: lambda query, ref, variant: ofe(query, ref),
}


def score_pair(metric, query, ref, js_variant: str = "similarity") -> float:
    return _PAIR_SCORE[OverlapMetric.parse(metric)](query, ref, js_variant)


# --------------------------------------------------------------------------
# index and aggregation


class LocationIndex:
    """Inverted index over the training trajectories.

    Attributes:
        ids: train trajectory ids in ascending order; positions in every
            other array refer to this order.
        seqs: location sequences aligned with ``ids``.
        set_sizes: number of distinct locations per train trajectory.
        postings: location -> (positions, multiplicities) of train
            trajectories containing it.
        last: location -> positions of train trajectories ending there.
    """

    def __init__(self, train: Iterable[Trajectory]):
        train = sorted(train, key=lambda t: t.tid)
        if not train:
            raise InputError("training set is empty")
        self.ids = np.array([t.tid for t in train], dtype=np.int64)
        if len(set(self.ids.tolist())) != len(train):
            raise InputError("duplicate train trajectory ids")
        self.seqs = [t.locations for t in train]
        self.set_sizes = np.array([len(set(s)) for s in self.seqs], dtype=np.int64)
        post_pos: dict[int, list[int]] = defaultdict(list)
        post_cnt: dict[int, list[int]] = defaultdict(list)
        last: dict[int, list[int]] = defaultdict(list)
        for pos, seq in enumerate(self.seqs):
            for loc, c in Counter(seq).items():
                post_pos[loc].append(pos)
                post_cnt[loc].append(c)
            last[seq[-1]].append(pos)
        self.postings = {loc: (np.array(post_pos[loc], dtype=np.int64), np.array(post_cnt[loc], dtype=np.int64))
                         for loc in post_pos}
        self.last = {loc: np.array(v, dtype=np.int64) for loc, v in last.items()}

    def __len__(self):
        return len(self.seqs)

    def covers(self, train: Iterable[Trajectory]) -> bool:
        return sorted(t.tid for t in train) == self.ids.tolist()

    def _lists(self, seq, with_counts: bool):
        pos, vals = [], []
        for loc, c in Counter(seq).items():
            entry = self.postings.get(loc)
            if entry is None:
                continue
            pos.append(entry[0])
            vals.append(np.minimum(entry[1], c) if with_counts else np.ones_like(entry[0]))
        return pos, vals

    def intersection_sizes(self, seq) -> np.ndarray:
        """|set(seq) ∩ set(ref)| for every train trajectory ref."""
        pos, vals = self._lists(seq, False)
        if not pos:
            return np.zeros(len(self), dtype=np.int64)
        return np.bincount(np.concatenate(pos), minlength=len(self)).astype(np.int64)

    def multiset_intersection_sizes(self, seq) -> np.ndarray:
        """Σ_l min(count_seq(l), count_P(l)) for every train trajectory ref."""
        pos, vals = self._lists(seq, True)
        if not pos:
            return np.zeros(len(self), dtype=np.int64)
        return np.bincount(np.concatenate(pos), weights=np.concatenate(vals),
                           minlength=len(self)).astype(np.int64)


def _record(query: Trajectory, metric: OverlapMetric, score: float, train_id: int) -> OverlapRecord:
    return OverlapRecord(query.tid, metric, score, int(train_id), bin_of(score))


def max_overlap_scan(query: Trajectory, train: Sequence[Trajectory], metric,
                     js_variant: str = "similarity") -> OverlapRecord:
    """Reference path: evaluate the metric against every training trajectory."""
    metric = OverlapMetric.parse(metric)
    if not train:
        raise InputError("training set is empty")
    best, best_id = -1.0, None
    for ref in sorted(train, key=lambda t: t.tid):
        s = score_pair(metric, query, ref, js_variant)
        if s > best:
            best, best_id = s, ref.tid
    return _record(query, metric, best, best_id)


def max_overlap(query: Trajectory, train: Sequence[Trajectory] | None, metric,
                index: LocationIndex | None = None, js_variant: str = "similarity") -> OverlapRecord:
    """Maximum overlap of ``query`` against the training set, using the index to prune.

    ``train`` may be ``None`` when ``index`` is given. The JS-distance
    variant is non-zero for disjoint trajectories and therefore always
    takes the full scan.
    """
    metric = OverlapMetric.parse(metric)
    if index is None:
        if not train:
            raise InputError("training set is empty")
        index = LocationIndex(train)
    if metric is OverlapMetric.JS and js_variant != "similarity":
        if train is None:
            raise InputError("the JS distance variant needs the training trajectories")
        return max_overlap_scan(query, train, metric, js_variant)

    seq = _seq(query)
    m = len(seq)
    if metric is OverlapMetric.JS:
        inter = index.intersection_sizes(seq)
        if not inter.any():
            return _record(query, metric, 0.0, index.ids[0])
        scores = inter / (len(set(seq)) + index.set_sizes - inter)
        pos = int(np.argmax(scores))  # first maximum = lowest id
        c = int(inter[pos])
        return _record(query, metric, c / (len(set(seq)) + int(index.set_sizes[pos]) - c), index.ids[pos])

    if metric is OverlapMetric.OFE:
        cand = index.last.get(seq[-1])
        if cand is None:
            return _record(query, metric, 0.0, index.ids[0])
        best_k, best_pos = 0, None
        for pos in cand.tolist():  # ascending position = ascending id
            k = common_suffix_length(seq, index.seqs[pos])
            if k > best_k:
                best_k, best_pos = k, pos
        return _record(query, metric, best_k / m, index.ids[best_pos])

    bound = index.multiset_intersection_sizes(seq)
    cand = np.flatnonzero(bound)
    if cand.size == 0:
        return _record(query, metric, 0.0, index.ids[0])
    order = cand[np.lexsort((cand, -bound[cand]))]
    lcs = BitParallelLCS(seq)
    best_f, best_pos = 0, None
    for pos in order.tolist():
        if bound[pos] < best_f:
            break
        f = lcs.length(index.seqs[pos])
        if f > best_f or (f == best_f and best_pos is not None and pos < best_pos):
            best_f, best_pos = f, pos
    return _record(query, metric, best_f / m, index.ids[best_pos])


# --------------------------------------------------------------------------
# batch computation

_WORKER_INDEX: LocationIndex | None = None


def _init_worker(train):
    global _WORKER_INDEX
    _WORKER_INDEX = LocationIndex(train)


def _worker_chunk(args):
    chunk, metrics = args
    return [[max_overlap(query, None, m, _WORKER_INDEX) for query in chunk] for m in metrics]


def compute_overlaps(test: Sequence[Trajectory], train: Sequence[Trajectory], metrics=METRICS,
                     workers: int = 1, prune: bool = True, js_variant: str = "similarity",
                     chunk_size: int = 64) -> dict[OverlapMetric, list[OverlapRecord]]:
    """Overlap records for every test trajectory, sorted by test id.

    Results do not depend on ``workers`` or ``prune``.
    """
    metrics = [OverlapMetric.parse(m) for m in metrics]
    test = sorted(test, key=lambda t: t.tid)
    out: dict[OverlapMetric, list[OverlapRecord]] = {m: [] for m in metrics}
    if not prune:
        for m in metrics:
            out[m] = [max_overlap_scan(query, train, m, js_variant) for query in test]
        return out
    if workers <= 1 or len(test) <= chunk_size or js_variant != "similarity":
        index = LocationIndex(train)
        for m in metrics:
            out[m] = [max_overlap(query, train, m, index, js_variant) for query in test]
        return out
    chunks = [test[i:i + chunk_size] for i in range(0, len(test), chunk_size)]
    with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker, initargs=(list(train),)) as ex:
        for res in ex.map(_worker_chunk, [(c, metrics) for c in chunks]):
            for m, recs in zip(metrics, res):
                out[m].extend(recs)
    return out


# --------------------------------------------------------------------------
# stratification and files


def stratify(records: Iterable[OverlapRecord]) -> dict[str, list[int]]:
    """Partition test trajectory ids by overlap bin (every bin label present)."""
    bins: dict[str, list[int]] = {b: [] for b in BIN_LABELS}
    seen = set()
    for rec in records:
        if rec.test_id in seen:
            raise ValidationError(f"duplicate overlap record for trajectory {rec.test_id}")
        seen.add(rec.test_id)
        bins[bin_of(rec.score)].append(rec.test_id)
    for ids in bins.values():
        ids.sort()
    return bins


def bin_fractions(records: Sequence[OverlapRecord]) -> dict[str, float]:
    bins = stratify(records)
    n = sum(len(v) for v in bins.values())
    return {b: (len(v) / n if n else 0.0) for b, v in bins.items()}


def strata_map(records: Iterable[OverlapRecord]) -> dict[int, str]:
    """test id -> bin label."""
    return {r.test_id: r.bin for r in records}


OVERLAP_COLUMNS = ("test_trajectory_id", "score", "argmax_train_id", "bin")


def write_overlap_csv(records: Sequence[OverlapRecord], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(OVERLAP_COLUMNS)
        for r in sorted(records, key=lambda r: r.test_id):
            w.writerow([r.test_id, repr(float(r.score)), r.argmax_train, r.bin])


def read_overlap_csv(path, metric) -> list[OverlapRecord]:
    metric = OverlapMetric.parse(metric)
    out = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != OVERLAP_COLUMNS:
            raise ValidationError(f"{path}: unexpected header {reader.fieldnames}")
        for row in reader:
            score = float(row["score"])
            if bin_of(score) != row["bin"]:
                raise ValidationError(f"{path}: bin {row['bin']} inconsistent with score {score}")
            out.append(OverlapRecord(int(row["test_trajectory_id"]), metric, score,
                                     int(row["argmax_train_id"]), row["bin"]))
    return out


def overlap_summary(by_metric: dict) -> dict:
    summary = {}
    for m, recs in by_metric.items():
        bins = stratify(recs)
        n = len(recs)
        summary[OverlapMetric.parse(m).value] = {
            "n_test": n,
            "counts": {b: len(v) for b, v in bins.items()},
            "fractions": {b: (len(v) / n if n else 0.0) for b, v in bins.items()},
        }
    return summary


def write_overlap_outputs(by_metric: dict, directory) -> list[Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = []
    for m, recs in by_metric.items():
        p = d / f"overlap_{OverlapMetric.parse(m).value}.csv"
        write_overlap_csv(recs, p)
        paths.append(p)
    p = d / "overlap_summary.json"
    with open(p, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(overlap_summary(by_metric), fh, indent=2, sort_keys=True)
        fh.write("\n")
    paths.append(p)
    return paths


def read_overlap_dir(directory, metrics=None) -> dict[OverlapMetric, list[OverlapRecord]]:
    d = Path(directory)
    out = {}
    for m in (metrics or METRICS):
        m = OverlapMetric.parse(m)
        p = d / f"overlap_{m.value}.csv"
        if p.exists():
            out[m] = read_overlap_csv(p, m)
        elif metrics:
            raise InputError(f"{p} not found")
    if not out:
        raise InputError(f"{d}: no overlap_<metric>.csv files")
    return out
