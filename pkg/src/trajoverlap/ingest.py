"""Dataset parsing, user filtering, session cutting and temporal splitting.

Supported source layouts:

``gowalla``
    TSV ``user  time(ISO-8601)  lat  lon  venue``.
``foursquare``
    Either the same 5-column TSV or the original 8-column TSMC2014 layout
    ``user venue category-id category lat lon tz-offset utc-time``.
``taxi-porto``
    ECML/PKDD 2015 CSV with a JSON ``POLYLINE`` column of ``[lon, lat]``
    fixes sampled every 15 seconds from ``TIMESTAMP``.
``taxi-sf``
    Cabspotting per-cab files ``new_<cab>.txt`` with lines
    ``lat lon occupancy unix-time``; ``path`` may be a file or a directory.
``generic-csv``
    CSV with named columns (see :data:`GENERIC_COLUMNS`).
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple

import numpy as np

from .core import GridSpec, LocationVocabulary, Point, Trajectory, tessellate
from .errors import InputError, PipelineError, ValidationError

log = logging.getLogger(__name__)

FORMATS = ("gowalla", "foursquare", "taxi-porto", "taxi-sf", "generic-csv")
PORTO_SAMPLING_S = 15
GENERIC_COLUMNS = {"user": "user", "time": "timestamp", "lat": "lat", "lon": "lon", "venue": "venue"}
MAX_REJECT_FRACTION = 0.5


class RawRecord(NamedTuple):
    user: str
    timestamp: int
    lat: float
    lon: float
    venue: str | None = None


@dataclass
class ParseResult:
    records: list[RawRecord]
    rejected: list[tuple[int, str]]
    units: int = 0

    def __iter__(self):
        return iter(self.records)

    def __len__(self):
        return len(self.records)


@dataclass(frozen=True)
class PipelineConfig:
    min_records: int = 10
    session_gap_hours: float = 72.0
    min_trajectories: int = 5
    split_fractions: tuple[float, float, float] = (0.7, 0.1, 0.2)
    # True: a gap equal to the threshold starts a new trajectory.
    cut_on_equal_gap: bool = True
    location_mode: str = "auto"  # auto | venue | grid
    grid_cell_m: float = 500.0

    def __post_init__(self):
        if self.min_records < 1 or self.min_trajectories < 1:
            raise InputError("record and trajectory thresholds must be >= 1")
        if not self.session_gap_hours > 0:
            raise InputError("session gap must be positive")
        check_fractions(self.split_fractions)
        if self.location_mode not in ("auto", "venue", "grid"):
            raise InputError(f"unknown location mode {self.location_mode!r}")
        object.__setattr__(self, "split_fractions", tuple(float(f) for f in self.split_fractions))

    @property
    def session_gap_s(self) -> float:
        return self.session_gap_hours * 3600.0

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        if "split_fractions" in known:
            known["split_fractions"] = tuple(known["split_fractions"])
        return cls(**known)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split_fractions"] = list(self.split_fractions)
        return d


def check_fractions(fractions) -> None:
    if len(fractions) != 3 or any(not f > 0 for f in fractions):
        raise InputError(f"split fractions must be three positive numbers, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise InputError(f"split fractions must sum to 1, got {sum(fractions)}")


# --------------------------------------------------------------------------
# parsing


def parse_time(value: str) -> int:
    """Integer epoch seconds from an epoch number, ISO-8601 or TSMC-style string."""
    value = value.strip()
    try:
        t = float(value)
    except ValueError:
        pass
    else:
        if not math.isfinite(t):
            raise ValueError(f"non-finite timestamp {value!r}")
        return int(t)
    if value.endswith("Z"):
        value = value[:-1] + "+00:00"
    try:
        dt = datetime.fromisoformat(value)
    except ValueError:
        dt = datetime.strptime(value, "%a %b %d %H:%M:%S %z %Y")
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(dt.timestamp())


def _coord(lat: str | float, lon: str | float) -> tuple[float, float]:
    la, lo = float(lat), float(lon)
    if not (-90.0 <= la <= 90.0):
        raise ValueError(f"latitude out of range: {la}")
    if not (-180.0 <= lo <= 180.0):
        raise ValueError(f"longitude out of range: {lo}")
    return la, lo


def _lines(path: Path) -> Iterator[tuple[int, str]]:
    with open(path, encoding="utf-8", errors="replace", newline="") as fh:
        for no, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if line.strip():
                yield no, line


def _parse_checkins(path: Path, allow_tsmc: bool):
    for no, line in _lines(path):
        cols = line.split("\t")
        try:
            if len(cols) == 5:
                user, t, lat, lon, venue = cols
            elif allow_tsmc and len(cols) == 8:
                user, venue, _, _, lat, lon, _, t = cols
            else:
                raise ValueError(f"expected 5{' or 8' if allow_tsmc else ''} columns, got {len(cols)}")
            la, lo = _coord(lat, lon)
            yield no, [RawRecord(user.strip(), parse_time(t), la, lo, venue.strip())]
        except ValueError as exc:
            yield no, exc


def _parse_porto(path: Path):
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"TAXI_ID", "TIMESTAMP", "POLYLINE"} - set(reader.fieldnames or ())
        if missing:
            raise InputError(f"{path}: malformed header, missing {sorted(missing)}")
        for no, row in enumerate(reader, 2):
            try:
                t0 = parse_time(row["TIMESTAMP"])
                fixes = json.loads(row["POLYLINE"])
                if not fixes:
                    raise ValueError("empty polyline")
                recs = []
                for i, fix in enumerate(fixes):
                    lo, la = fix
                    la, lo = _coord(la, lo)
                    recs.append(RawRecord(row["TAXI_ID"].strip(), t0 + PORTO_SAMPLING_S * i, la, lo, None))
                yield no, recs
            except (ValueError, TypeError) as exc:
                yield no, ValueError(str(exc))


def _parse_sf(path: Path):
    files = sorted(p for p in path.glob("new_*.txt")) if path.is_dir() else [path]
    if not files:
        raise InputError(f"{path}: no cab files (new_*.txt) found")
    no = 0
    for f in files:
        cab = f.stem[4:] if f.stem.startswith("new_") else f.stem
        for _, line in _lines(f):
            no += 1
            try:
                cols = line.split()
                if len(cols) != 4:
                    raise ValueError(f"expected 4 columns, got {len(cols)}")
                la, lo = _coord(cols[0], cols[1])
                yield no, [RawRecord(cab, parse_time(cols[3]), la, lo, None)]
            except ValueError as exc:
                yield no, exc


def _parse_generic(path: Path, columns: dict | None, delimiter: str):
    names = dict(GENERIC_COLUMNS)
    names.update(columns or {})
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh, delimiter=delimiter)
        header = set(reader.fieldnames or ())
        required = [names[k] for k in ("user", "time", "lat", "lon")]
        missing = [c for c in required if c not in header]
        if missing:
            raise InputError(f"{path}: malformed header, missing columns {missing}")
        has_venue = names["venue"] in header
        for no, row in enumerate(reader, 2):
            try:
                la, lo = _coord(row[names["lat"]], row[names["lon"]])
                venue = row[names["venue"]].strip() if has_venue else None
                yield no, [RawRecord(row[names["user"]].strip(), parse_time(row[names["time"]]),
                                     la, lo, venue or None)]
            except (ValueError, TypeError) as exc:
                yield no, ValueError(str(exc))


def parse(fmt: str, path, columns: dict | None = None, delimiter: str = ",") -> ParseResult:
    """Read a dataset file into :class:`RawRecord` objects.

    Bad rows are collected in ``result.rejected`` as ``(line, reason)``;
    more than half of the rows rejected is fatal.
    """
    path = Path(path)
    if fmt not in FORMATS:
        raise InputError(f"unknown format {fmt!r}; expected one of {FORMATS}")
    if not path.exists():
        raise InputError(f"{path} does not exist")
    if fmt == "gowalla":
        rows = _parse_checkins(path, allow_tsmc=False)
    elif fmt == "foursquare":
        rows = _parse_checkins(path, allow_tsmc=True)
    elif fmt == "taxi-porto":
        rows = _parse_porto(path)
    elif fmt == "taxi-sf":
        rows = _parse_sf(path)
    else:
        rows = _parse_generic(path, columns, delimiter)

    result = ParseResult([], [])
    for no, out in rows:
        result.units += 1
        if isinstance(out, Exception):
            result.rejected.append((no, str(out)))
        else:
            result.records.extend(out)
    if result.units and len(result.rejected) > MAX_REJECT_FRACTION * result.units:
        first = "; ".join(f"line {n}: {r}" for n, r in result.rejected[:3])
        raise InputError(f"{path}: {len(result.rejected)}/{result.units} rows rejected ({first})")
    if result.rejected:
        log.warning("%s: rejected %d of %d rows", path, len(result.rejected), result.units)
    return result


def file_digest(path, exclude: Iterable[str] = ()) -> str:
    """sha256 of a file, or of all files under a directory in sorted order.

    Files whose name is in ``exclude`` are skipped inside directories.
    """
    path = Path(path)
    h = hashlib.sha256()
    skip = set(exclude)
    files = (sorted(p for p in path.rglob("*") if p.is_file() and p.name not in skip)
             if path.is_dir() else [path])
    for f in files:
        if path.is_dir():
            h.update(str(f.relative_to(path)).encode())
        with open(f, "rb") as fh:
            for chunk in iter(lambda: fh.read(1 << 20), b""):
                h.update(chunk)
    return h.hexdigest()


# --------------------------------------------------------------------------
# preprocessing


@dataclass
class PreprocessResult:
    trajectories: list[Trajectory]
    vocabulary: LocationVocabulary
    stages: dict = field(default_factory=dict)


def _by_user(records: Iterable[RawRecord]) -> "OrderedDict[str, list[RawRecord]]":
    users: OrderedDict[str, list[RawRecord]] = OrderedDict()
    for r in records:
        users.setdefault(r.user, []).append(r)
    for recs in users.values():
        recs.sort(key=lambda r: r.timestamp)  # stable: ties keep input order
    return users


def cut_sessions(records: list[RawRecord], gap_s: float, cut_on_equal: bool = True) -> list[list[RawRecord]]:
    """Split one user's time-sorted records wherever the gap reaches ``gap_s``."""
    sessions = [[records[0]]]
    for prev, cur in zip(records, records[1:]):
        gap = cur.timestamp - prev.timestamp
        if gap > gap_s or (cut_on_equal and gap == gap_s):
            sessions.append([])
        sessions[-1].append(cur)
    return sessions


def preprocess(records: Iterable[RawRecord], config: PipelineConfig = PipelineConfig()) -> PreprocessResult:
    """Filter users, cut sessions and build the location vocabulary.

    Order of operations: drop users with fewer than ``min_records``
    records, cut each remaining user's stream into trajectories, then drop
    users with fewer than ``min_trajectories`` trajectories.
    """
    records = list(records)
    if not records:
        raise PipelineError("no input records")
    users = _by_user(records)
    stages = {"input": {"users": len(users), "records": len(records)}}

    kept = OrderedDict((u, rs) for u, rs in users.items() if len(rs) >= config.min_records)
    stages["min_records"] = {"users": len(kept), "records": sum(map(len, kept.values()))}

    sessions = OrderedDict((u, cut_sessions(rs, config.session_gap_s, config.cut_on_equal_gap))
                           for u, rs in kept.items())
    stages["sessions"] = {"users": len(sessions), "trajectories": sum(map(len, sessions.values()))}

    final = OrderedDict((u, ss) for u, ss in sessions.items() if len(ss) >= config.min_trajectories)
    n_points = sum(len(s) for ss in final.values() for s in ss)
    stages["min_trajectories"] = {"users": len(final),
                                  "trajectories": sum(map(len, final.values())),
                                  "records": n_points}
    if not final:
        raise PipelineError(f"no users survive preprocessing; stage counts: {json.dumps(stages)}")

    flat = [r for ss in final.values() for s in ss for r in s]
    mode = config.location_mode
    if mode == "auto":
        mode = "venue" if all(r.venue is not None for r in flat) else "grid"
    if mode == "venue":
        if any(r.venue is None for r in flat):
            raise InputError("venue location mode requires a venue key on every record")
        entries: OrderedDict[str, tuple[float, float, str]] = OrderedDict()
        for r in flat:
            if r.venue not in entries:
                entries[r.venue] = (r.lat, r.lon, r.venue)
        vocab = LocationVocabulary.from_entries(entries.values())
        loc_ids = [vocab.id_of(r.venue) for r in flat]
    else:
        vocab, loc_ids = tessellate([(r.lat, r.lon) for r in flat], GridSpec(config.grid_cell_m))

    trajectories = []
    pos = 0
    for user, ss in final.items():
        for s in ss:
            pts = tuple(Point(r.timestamp, loc_ids[pos + i]) for i, r in enumerate(s))
            pos += len(s)
            trajectories.append(Trajectory(user, len(trajectories), pts))

    stages["output"] = {"users": len(final), "locations": len(vocab), "trajectories": len(trajectories),
                        "records": n_points, "records_dropped": len(records) - n_points}
    return PreprocessResult(trajectories, vocab, stages)


def to_records(trajectories: Iterable[Trajectory], vocab: LocationVocabulary) -> list[RawRecord]:
    """Inverse of :func:`preprocess` (venue key = vocabulary raw key)."""
    out = []
    for tr in trajectories:
        for t, loc in tr.points:
            lat, lon = vocab.coords(loc)
            out.append(RawRecord(tr.user, t, lat, lon, vocab.keys[loc]))
    return out


# --------------------------------------------------------------------------
# splitting


@dataclass
class DatasetSplit:
    train: list[Trajectory]
    valid: list[Trajectory]
    test: list[Trajectory]
    vocabulary: LocationVocabulary
    provenance: dict = field(default_factory=dict)

    def all(self) -> list[Trajectory]:
        return sorted(self.train + self.valid + self.test, key=lambda t: t.tid)

    def by_user(self, part: str = "train") -> "OrderedDict[str, list[Trajectory]]":
        out: OrderedDict[str, list[Trajectory]] = OrderedDict()
        for tr in getattr(self, part):
            out.setdefault(tr.user, []).append(tr)
        return out


def split_counts(n: int, fractions=(0.7, 0.1, 0.2)) -> tuple[int, int, int]:
    """Per-user (train, valid, test) counts: floor for train and valid, rest to test."""
    n_train = math.floor(n * fractions[0] + 1e-9)
    n_valid = math.floor(n * fractions[1] + 1e-9)
    return n_train, n_valid, n - n_train - n_valid


def split(trajectories: Iterable[Trajectory], vocabulary: LocationVocabulary,
          fractions=(0.7, 0.1, 0.2), provenance: dict | None = None) -> DatasetSplit:
    """Temporal per-user split of trajectories into train/valid/test."""
    check_fractions(fractions)
    users: OrderedDict[str, list[Trajectory]] = OrderedDict()
    for tr in trajectories:
        users.setdefault(tr.user, []).append(tr)
    train, valid, test = [], [], []
    for trs in users.values():
        trs = sorted(trs, key=lambda t: (t.start, t.tid))
        a, b, _ = split_counts(len(trs), fractions)
        train += trs[:a]
        valid += trs[a:a + b]
        test += trs[a + b:]
    prov = dict(provenance or {})
    prov.setdefault("split_rule", "per-user floor(train), floor(valid), remainder to test")
    prov["split_counts"] = {"train": len(train), "valid": len(valid), "test": len(test)}
    key = lambda t: t.tid
    return DatasetSplit(sorted(train, key=key), sorted(valid, key=key), sorted(test, key=key),
                        vocabulary, prov)


# --------------------------------------------------------------------------
# split manifest directory


def _dump_trajectories(trs: list[Trajectory], path: Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for tr in trs:
            fh.write(json.dumps({"user": tr.user, "traj": tr.tid,
                                 "points": [[p.timestamp, p.location] for p in tr.points]},
                                separators=(",", ":")) + "\n")


def _load_trajectories(path: Path) -> list[Trajectory]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                out.append(Trajectory.from_pairs(obj["user"], obj["traj"], obj["points"]))
            except (KeyError, TypeError, ValueError) as exc:
                raise ValidationError(f"{path}:{no}: {exc}") from exc
    return out


def write_vocabulary(vocab: LocationVocabulary, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "lat", "lon", "raw_key"])
        for i, (la, lo, k) in enumerate(zip(vocab.lat.tolist(), vocab.lon.tolist(), vocab.keys)):
            w.writerow([i, repr(la), repr(lo), k])


def read_vocabulary(path) -> LocationVocabulary:
    entries = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        for expected, row in enumerate(reader):
            if int(row["id"]) != expected:
                raise ValidationError(f"{path}: vocabulary ids are not dense at row {expected}")
            entries.append((float(row["lat"]), float(row["lon"]), row["raw_key"]))
    return LocationVocabulary.from_entries(entries)


SPLIT_FILES = ("train.jsonl", "valid.jsonl", "test.jsonl", "vocab.csv", "provenance.json")


def write_split(ds: DatasetSplit, directory) -> list[Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for part in ("train", "valid", "test"):
        _dump_trajectories(getattr(ds, part), d / f"{part}.jsonl")
    write_vocabulary(ds.vocabulary, d / "vocab.csv")
    with open(d / "provenance.json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump(ds.provenance, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return [d / f for f in SPLIT_FILES]


def read_split(directory) -> DatasetSplit:
    d = Path(directory)
    missing = [f for f in SPLIT_FILES if not (d / f).exists()]
    if missing:
        raise InputError(f"{d}: missing split files {missing}")
    parts = {p: _load_trajectories(d / f"{p}.jsonl") for p in ("train", "valid", "test")}
    vocab = read_vocabulary(d / "vocab.csv")
    with open(d / "provenance.json", encoding="utf-8") as fh:
        prov = json.load(fh)
    ids = [t.tid for p in parts.values() for t in p]
    if len(ids) != len(set(ids)):
        raise ValidationError(f"{d}: trajectory ids repeat across split files")
    n = len(vocab)
    for p in parts.values():
        for t in p:
            if max(t.locations) >= n:
                raise ValidationError(f"{d}: trajectory {t.tid} references unknown location")
    return DatasetSplit(parts["train"], parts["valid"], parts["test"], vocab, prov)


def check_temporal_order(ds: DatasetSplit) -> None:
    """Raise if any user's train/valid/test trajectories are out of temporal order."""
    for user in {t.user for t in ds.all()}:
        tr = [t for t in ds.train if t.user == user]
        va = [t for t in ds.valid if t.user == user]
        te = [t for t in ds.test if t.user == user]
        last_train = max((t.end for t in tr), default=-math.inf)
        first_valid = min((t.start for t in va), default=math.inf)
        first_test = min((t.start for t in te), default=math.inf)
        if va and last_train > first_valid:
            raise ValidationError(f"user {user}: train overlaps validation in time")
        if te and (last_train > first_test or (va and max(t.start for t in va) > first_test)):
            raise ValidationError(f"user {user}: test precedes earlier partitions")


def location_counts(trajectories: Iterable[Trajectory], n_locations: int) -> np.ndarray:
    counts = np.zeros(n_locations, dtype=np.int64)
    for tr in trajectories:
        np.add.at(counts, np.fromiter(tr.locations, dtype=np.int64), 1)
    return counts


def env_cache_dir() -> Path | None:
    value = os.environ.get("TRAJOVERLAP_CACHE")
    return Path(value) if value else None
