"""Mobility-law features: distance law, visitation law, returners vs explorers."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import warnings
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .core import EARTH_RADIUS_KM, LocationVocabulary, Trajectory, haversine_array
from .errors import InputError, ValidationError
from .ingest import location_counts

log = logging.getLogger(__name__)

DEFAULT_GAMMA = 1.6
GAMMA_SANE_RANGE = (0.5, 3.0)
MIN_GAMMA_SAMPLES = 30


# --------------------------------------------------------------------------
# per-user features


@dataclass(frozen=True)
class UserLawFeatures:
    user: str
    dist_u: float
    r_g: float
    r_g2: float
    re_u: int
    no_hops: bool = False

    def __post_init__(self):
        if self.dist_u < 0 or self.r_g < 0 or self.r_g2 < 0 or self.re_u not in (0, 1):
            raise InputError(f"invalid law features for user {self.user}")


def hop_distances(history: Iterable[Trajectory], vocab: LocationVocabulary) -> np.ndarray:
    """Haversine distance of every consecutive pair, never across trajectories."""
    a, b = [], []
    for tr in history:
        locs = tr.locations
        a.extend(locs[:-1])
        b.extend(locs[1:])
    if not a:
        return np.empty(0)
    a = np.asarray(a)
    b = np.asarray(b)
    return haversine_array(vocab.lat[a], vocab.lon[a], vocab.lat[b], vocab.lon[b])


def mean_hop_distance(history: Iterable[Trajectory], vocab: LocationVocabulary) -> float:
    """Mean consecutive-hop distance in km; 0.0 when the history has no hops."""
    d = hop_distances(history, vocab)
    return float(d.mean()) if d.size else 0.0


def radius_of_gyration(history: Iterable[Trajectory], vocab: LocationVocabulary, k: int | None = None) -> float:
    """Visit-weighted radius of gyration in km.

    With ``k`` only the ``k`` most visited locations (ties by lower id) are
    kept, and the centre of mass is recomputed on them.
    """
    locs = [l for tr in history for l in tr.locations]
    if not locs:
        raise InputError("radius of gyration needs at least one point")
    ids, w = np.unique(np.asarray(locs), return_counts=True)
    if k is not None:
        order = np.lexsort((ids, -w))[:k]
        ids, w = ids[order], w[order]
    w = w.astype(np.float64)
    lat, lon = vocab.lat[ids], vocab.lon[ids]
    c_lat = float(np.dot(w, lat) / w.sum())
    c_lon = float(np.dot(w, lon) / w.sum())
    d = haversine_array(lat, lon, c_lat, c_lon)
    return float(math.sqrt(np.dot(w, d ** 2) / w.sum()))


def returner_explorer(r_g: float, r_g2: float) -> int:
    """0 for a returner (``r_g2 > r_g / 2`` or ``r_g == 0``), 1 for an explorer."""
    if r_g < 0 or r_g2 < 0:
        raise InputError("radii must be non-negative")
    if r_g == 0:
        return 0
    return 0 if r_g2 > r_g / 2.0 else 1


def user_features(histories: Mapping[str, Sequence[Trajectory]], vocab: LocationVocabulary
                  ) -> dict[str, UserLawFeatures]:
    out = {}
    for user, hist in histories.items():
        d = hop_distances(hist, vocab)
        rg = radius_of_gyration(hist, vocab)
        rg2 = radius_of_gyration(hist, vocab, k=2)
        out[user] = UserLawFeatures(user, float(d.mean()) if d.size else 0.0, rg, rg2,
                                    returner_explorer(rg, rg2), no_hops=d.size == 0)
    return out


FEATURE_COLUMNS = ("user_id", "dist_u", "r_g", "r_g2", "re_u")


def write_features_csv(features: Mapping[str, UserLawFeatures], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FEATURE_COLUMNS)
        for user in features:
            f = features[user]
            w.writerow([user, repr(f.dist_u), repr(f.r_g), repr(f.r_g2), f.re_u])


def read_features_csv(path) -> dict[str, UserLawFeatures]:
    out = {}
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != FEATURE_COLUMNS:
            raise ValidationError(f"{path}: unexpected header {reader.fieldnames}")
        for row in reader:
            out[row["user_id"]] = UserLawFeatures(row["user_id"], float(row["dist_u"]), float(row["r_g"]),
                                                  float(row["r_g2"]), int(row["re_u"]))
    return out


# --------------------------------------------------------------------------
# visitation law


def nearest_neighbour_rmin(vocab: LocationVocabulary) -> float:
    """Half the median nearest-neighbour distance (km) between vocabulary locations.

    Coincident locations are ignored; falls back to 1 m when nothing else
    is available.
    """
    if len(vocab) < 2:
        return 1e-3
    lat, lon = np.radians(vocab.lat), np.radians(vocab.lon)
    xyz = np.column_stack([np.cos(lat) * np.cos(lon), np.cos(lat) * np.sin(lon), np.sin(lat)])
    tree = cKDTree(xyz)
    chord, _ = tree.query(xyz, k=2)
    km = 2.0 * EARTH_RADIUS_KM * np.arcsin(np.minimum(1.0, chord[:, 1] / 2.0))
    km = km[km > 0]
    if km.size == 0:
        return 1e-3
    return float(np.median(km) / 2.0)


def _digest(counts: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(counts, dtype="<i8").tobytes()).hexdigest()


@dataclass(frozen=True, eq=False)
class VisitationLawModel:
    """Power law ``score(c) ∝ 1 / (r · f)^gamma`` around an anchor location.

    ``visits`` are raw training visit counts per location; a location never
    visited is treated as visited once.
    """

    vocab: LocationVocabulary
    visits: np.ndarray
    gamma: float = DEFAULT_GAMMA
    r_min: float = 1e-3

    def __post_init__(self):
        if not self.gamma > 0:
            raise InputError("gamma must be positive")
        if not self.r_min > 0:
            raise InputError("r_min must be positive")
        if len(self.visits) != len(self.vocab):
            raise InputError("visit counts do not match the vocabulary")
        object.__setattr__(self, "_f", np.maximum(np.asarray(self.visits, dtype=np.float64), 1.0))
        object.__setattr__(self, "_top_cache", {})

    @property
    def frequencies(self) -> np.ndarray:
        return self._f

    @property
    def visit_digest(self) -> str:
        return _digest(np.asarray(self.visits))

    def distances(self, anchor: int, candidates=None) -> np.ndarray:
        lat, lon = self.vocab.lat, self.vocab.lon
        if candidates is not None:
            lat, lon = lat[candidates], lon[candidates]
        r = haversine_array(self.vocab.lat[anchor], self.vocab.lon[anchor], lat, lon)
        return np.maximum(r, self.r_min)

    def log_scores(self, anchor: int, candidates=None) -> np.ndarray:
        """Unnormalised ``-gamma * log(r f)``."""
        f = self._f if candidates is None else self._f[candidates]
        return -self.gamma * (np.log(self.distances(anchor, candidates)) + np.log(f))

    def to_dict(self) -> dict:
        return {"gamma": self.gamma, "r_min": self.r_min, "n_locations": len(self.vocab),
                "visit_count_digest": self.visit_digest}


def fit_law_model(train: Iterable[Trajectory], vocab: LocationVocabulary, gamma: float | None = DEFAULT_GAMMA,
                  r_min: float | None = None) -> VisitationLawModel:
    """Law model with training visit counts; ``gamma=None`` fits the exponent."""
    train = list(train)
    visits = location_counts(train, len(vocab))
    r_min = nearest_neighbour_rmin(vocab) if r_min is None else r_min
    if gamma is None:
        gamma = fit_gamma(train, vocab, visits=visits, r_min=r_min)
    return VisitationLawModel(vocab, visits, float(gamma), float(r_min))


def visitation_scores(model: VisitationLawModel, anchor: int, candidates: Sequence[int]) -> list[tuple[int, float]]:
    """Law scores normalised to sum to 1 over ``candidates`` (input order kept)."""
    cands = np.asarray(candidates, dtype=np.int64)
    if cands.size == 0:
        return []
    n = len(model.vocab)
    if not 0 <= anchor < n or cands.min() < 0 or cands.max() >= n:
        raise InputError("anchor or candidate outside the vocabulary")
    ls = model.log_scores(anchor, cands)
    p = np.exp(ls - ls.max())
    p /= p.sum()
    return list(zip(cands.tolist(), p.tolist()))


def top_n_law_locations(model: VisitationLawModel, anchor: int, n: int = 5) -> list[int]:
    """The ``n`` highest-scoring locations over the whole vocabulary, ties by lower id."""
    key = (anchor, n)
    cached = model._top_cache.get(key)
    if cached is not None:
        return list(cached)
    size = len(model.vocab)
    if size < n:
        warnings.warn(f"vocabulary has {size} locations, fewer than n={n}")
    ls = model.log_scores(anchor)
    ids = np.arange(size)
    if size > 4 * n:
        part = np.argpartition(-ls, n - 1)[:n]
        cutoff = ls[part].min()
        pool = np.flatnonzero(ls >= cutoff)
    else:
        pool = ids
    order = pool[np.lexsort((pool, -ls[pool]))][:n]
    result = tuple(order.tolist())
    model._top_cache[key] = result
    return list(result)


def fit_gamma(train: Iterable[Trajectory], vocab: LocationVocabulary, visits: np.ndarray | None = None,
              r_min: float | None = None, max_events: int = 1000, n_bins: int = 30, seed: int = 0,
              iterations: int = 50, tol: float = 1e-6) -> float:
    """Least-squares estimate of the visitation-law exponent.

    Every consecutive step ``a -> b`` in the training data is an event in
    which ``b`` was chosen among all vocabulary locations. For each
    location ``c`` let ``x = max(r(a, c), r_min) * f(c)``. Under the law,
    the chance that the location chosen from a log(x) bin is
    ``mu_a * x^-gamma``; the exponent is the weighted least-squares slope
    of log(chosen / exposure) against log(x) over bins, where each
    exposure is weighted by its event's normaliser ``mu_a``. The
    normalisers depend on gamma, so the fit is iterated to a fixed point.

    Falls back to the default exponent (with a warning) on too few events
    or when every x is equal.
    """
    train = list(train)
    if visits is None:
        visits = location_counts(train, len(vocab))
    f = np.maximum(np.asarray(visits, dtype=np.float64), 1.0)
    if r_min is None:
        r_min = nearest_neighbour_rmin(vocab)
    events = [(a, b) for tr in train for a, b in zip(tr.locations, tr.locations[1:])]
    if len(events) < MIN_GAMMA_SAMPLES:
        warnings.warn(f"only {len(events)} transitions; using gamma={DEFAULT_GAMMA}")
        return DEFAULT_GAMMA
    if len(events) > max_events:
        pick = np.sort(np.random.default_rng(seed).choice(len(events), max_events, replace=False))
        events = [events[i] for i in pick]
    anchors = np.array([a for a, _ in events])
    chosen = np.array([b for _, b in events])
    logf = np.log(f)

    def logx_rows(rows):
        r = haversine_array(vocab.lat[anchors[rows], None], vocab.lon[anchors[rows], None],
                            vocab.lat[None, :], vocab.lon[None, :])
        return np.log(np.maximum(r, r_min)) + logf[None, :]

    chunk = max(1, 4_000_000 // max(len(vocab), 1))
    blocks = [np.arange(i, min(i + chunk, len(events))) for i in range(0, len(events), chunk)]
    lo, hi = np.inf, -np.inf
    for rows in blocks:
        lx = logx_rows(rows)
        lo, hi = min(lo, lx.min()), max(hi, lx.max())
    if not hi - lo > 1e-9:
        warnings.warn(f"all r*f values are equal; using gamma={DEFAULT_GAMMA}")
        return DEFAULT_GAMMA
    edges = np.linspace(lo, hi, n_bins + 1)

    chosen_lx = np.empty(len(events))
    for rows in blocks:
        lx = logx_rows(rows)
        chosen_lx[rows] = lx[np.arange(len(rows)), chosen[rows]]
    obs = np.bincount(np.clip(np.searchsorted(edges, chosen_lx, side="right") - 1, 0, n_bins - 1),
                      minlength=n_bins).astype(np.float64)

    gamma = DEFAULT_GAMMA
    for _ in range(iterations):
        expo = np.zeros(n_bins)
        expo_lx = np.zeros(n_bins)
        for rows in blocks:
            lx = logx_rows(rows)
            ls = -gamma * lx
            m = ls.max(axis=1, keepdims=True)
            mu = np.exp(-m) / np.exp(ls - m).sum(axis=1, keepdims=True)  # 1 / Σ x^-gamma, per event
            bins = np.clip(np.searchsorted(edges, lx, side="right") - 1, 0, n_bins - 1)
            wts = np.broadcast_to(mu, lx.shape)
            expo += np.bincount(bins.ravel(), weights=wts.ravel(), minlength=n_bins)
            expo_lx += np.bincount(bins.ravel(), weights=(wts * lx).ravel(), minlength=n_bins)
        ok = (obs > 0) & (expo > 0)
        if ok.sum() < 2:
            warnings.warn(f"too few populated bins; using gamma={DEFAULT_GAMMA}")
            return DEFAULT_GAMMA
        xk = expo_lx[ok] / expo[ok]
        yk = np.log(obs[ok] / expo[ok])
        slope = np.polyfit(xk, yk, 1, w=np.sqrt(obs[ok]))[0]
        new = -float(slope)
        if not new > 0 or not math.isfinite(new):
            warnings.warn(f"fitted exponent {new} is not positive; using gamma={DEFAULT_GAMMA}")
            return DEFAULT_GAMMA
        done = abs(new - gamma) < tol
        gamma = new
        if done:
            break
    if not GAMMA_SANE_RANGE[0] <= gamma <= GAMMA_SANE_RANGE[1]:
        warnings.warn(f"fitted gamma={gamma:.3f} outside {GAMMA_SANE_RANGE}")
    return gamma


def write_law_model(model: VisitationLawModel, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(model.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_law_model(path, train: Iterable[Trajectory], vocab: LocationVocabulary) -> VisitationLawModel:
    """Rebuild a law model from its JSON header and the training split it was fitted on."""
    with open(path, encoding="utf-8") as fh:
        d = json.load(fh)
    visits = location_counts(train, len(vocab))
    if d.get("n_locations") != len(vocab) or d.get("visit_count_digest") != _digest(visits):
        raise ValidationError(f"{path}: law model does not match the training split")
    return VisitationLawModel(vocab, visits, float(d["gamma"]), float(d["r_min"]))
