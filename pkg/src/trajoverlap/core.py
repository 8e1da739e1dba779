"""Domain types, great-circle math and square-grid tessellation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import InputError

EARTH_RADIUS_KM = 6371.0
_M_PER_DEG = EARTH_RADIUS_KM * 1000.0 * math.pi / 180.0


class Point(NamedTuple):
    timestamp: int
    location: int


@dataclass(frozen=True)
class Trajectory:
    """Time-ordered sequence of points visited by one user.

    Only location ids are stored per point; coordinates live in the
    :class:`LocationVocabulary`.
    """

    user: str
    tid: int
    points: tuple[Point, ...]

    def __post_init__(self):
        if not self.points:
            raise InputError(f"trajectory {self.tid} has no points")
        prev = None
        for t, loc in self.points:
            if t < 0 or loc < 0:
                raise InputError(f"trajectory {self.tid}: negative timestamp or location")
            if prev is not None and t < prev:
                raise InputError(f"trajectory {self.tid}: timestamps decrease")
            prev = t

    @classmethod
    def from_pairs(cls, user, tid, pairs: Iterable[Sequence[int]]) -> "Trajectory":
        return cls(str(user), int(tid), tuple(Point(int(t), int(l)) for t, l in pairs))

    @cached_property
    def locations(self) -> tuple[int, ...]:
        return tuple(p.location for p in self.points)

    @property
    def start(self) -> int:
        return self.points[0].timestamp

    @property
    def end(self) -> int:
        return self.points[-1].timestamp

    def prefix(self) -> "Trajectory":
        """All points but the last (the prediction input)."""
        return Trajectory(self.user, self.tid, self.points[:-1])

    @property
    def target(self) -> int:
        return self.points[-1].location

    def __len__(self):
        return len(self.points)


def check_coordinates(lat: float, lon: float) -> None:
    if not (-90.0 <= lat <= 90.0) or not (-180.0 <= lon <= 180.0):
        raise InputError(f"coordinates out of range: ({lat}, {lon})")


@dataclass(frozen=True, eq=False)
class LocationVocabulary:
    """Dense id -> (lat, lon, raw key) table."""

    lat: np.ndarray
    lon: np.ndarray
    keys: tuple[str, ...]
    _index: dict = field(init=False, repr=False)

    def __post_init__(self):
        lat = np.asarray(self.lat, dtype=np.float64)
        lon = np.asarray(self.lon, dtype=np.float64)
        if lat.shape != lon.shape or lat.ndim != 1 or len(self.keys) != lat.size:
            raise InputError("vocabulary columns have different lengths")
        if np.any(np.abs(lat) > 90.0) or np.any(np.abs(lon) > 180.0):
            raise InputError("vocabulary coordinates out of range")
        index = {k: i for i, k in enumerate(self.keys)}
        if len(index) != len(self.keys):
            raise InputError("vocabulary raw keys are not unique")
        lat.setflags(write=False)
        lon.setflags(write=False)
        object.__setattr__(self, "lat", lat)
        object.__setattr__(self, "lon", lon)
        object.__setattr__(self, "keys", tuple(self.keys))
        object.__setattr__(self, "_index", index)

    @classmethod
    def from_entries(cls, entries: Iterable[tuple[float, float, str]]) -> "LocationVocabulary":
        entries = list(entries)
        lat = [e[0] for e in entries]
        lon = [e[1] for e in entries]
        keys = tuple(str(e[2]) for e in entries)
        return cls(np.array(lat, dtype=np.float64), np.array(lon, dtype=np.float64), keys)

    def __len__(self):
        return len(self.keys)

    def __eq__(self, other):
        if not isinstance(other, LocationVocabulary):
            return NotImplemented
        return (self.keys == other.keys and np.array_equal(self.lat, other.lat)
                and np.array_equal(self.lon, other.lon))

    def coords(self, loc: int) -> tuple[float, float]:
        return float(self.lat[loc]), float(self.lon[loc])

    def id_of(self, key: str) -> int:
        return self._index[key]

    def __contains__(self, key):
        return key in self._index


@dataclass(frozen=True)
class GridSpec:
    """Square grid anchored at a bounding-box corner.

    ``origin`` is the (lat, lon) south-west corner; ``None`` means use the
    corner of the fixes being tessellated.
    """

    cell_side_m: float = 500.0
    origin: tuple[float, float] | None = None

    def __post_init__(self):
        if not self.cell_side_m > 0:
            raise InputError("cell side must be positive")
        if self.origin is not None:
            check_coordinates(*self.origin)


def haversine(a: tuple[float, float], b: tuple[float, float]) -> float:
    """Great-circle distance in kilometres between two (lat, lon) pairs in degrees."""
    check_coordinates(*a)
    check_coordinates(*b)
    lat1, lon1 = map(math.radians, a)
    lat2, lon2 = map(math.radians, b)
    h = (math.sin((lat2 - lat1) / 2.0) ** 2
         + math.cos(lat1) * math.cos(lat2) * math.sin((lon2 - lon1) / 2.0) ** 2)
    return 2.0 * EARTH_RADIUS_KM * math.asin(min(1.0, math.sqrt(h)))


def haversine_array(lat1, lon1, lat2, lon2) -> np.ndarray:
    """Vectorised haversine (km); arguments broadcast like numpy arrays."""
    lat1, lon1, lat2, lon2 = (np.radians(np.asarray(x, dtype=np.float64))
                              for x in (lat1, lon1, lat2, lon2))
    h = (np.sin((lat2 - lat1) / 2.0) ** 2
         + np.cos(lat1) * np.cos(lat2) * np.sin((lon2 - lon1) / 2.0) ** 2)
    return 2.0 * EARTH_RADIUS_KM * np.arcsin(np.minimum(1.0, np.sqrt(h)))


def tessellate(fixes: Sequence[tuple[float, float]], spec: GridSpec = GridSpec()):
    """Map raw GPS fixes onto a square grid.

    Returns ``(vocabulary, ids)`` where ``ids[i]`` is the cell id of
    ``fixes[i]``. Cell ids are dense and assigned in order of first
    appearance; vocabulary coordinates are cell centres.
    """
    if len(fixes) == 0:
        raise InputError("cannot tessellate an empty set of fixes")
    arr = np.asarray(fixes, dtype=np.float64).reshape(-1, 2)
    if np.any(np.abs(arr[:, 0]) > 90.0) or np.any(np.abs(arr[:, 1]) > 180.0):
        raise InputError("fix coordinates out of range")
    if spec.origin is None:
        lat0, lon0 = float(arr[:, 0].min()), float(arr[:, 1].min())
    else:
        lat0, lon0 = spec.origin
    m_per_deg_lon = _M_PER_DEG * max(math.cos(math.radians(lat0)), 1e-12)
    side = spec.cell_side_m
    iy = np.floor((arr[:, 0] - lat0) * _M_PER_DEG / side).astype(np.int64)
    ix = np.floor((arr[:, 1] - lon0) * m_per_deg_lon / side).astype(np.int64)

    cells: dict[tuple[int, int], int] = {}
    ids = []
    for cy, cx in zip(iy.tolist(), ix.tolist()):
        cid = cells.setdefault((cy, cx), len(cells))
        ids.append(cid)
    entries = []
    for (cy, cx) in cells:
        clat = min(90.0, max(-90.0, lat0 + (cy + 0.5) * side / _M_PER_DEG))
        clon = lon0 + (cx + 0.5) * side / m_per_deg_lon
        clon = (clon + 180.0) % 360.0 - 180.0 if abs(clon) > 180.0 else clon
        entries.append((clat, clon, f"cell:{cy}:{cx}"))
    return LocationVocabulary.from_entries(entries), ids
