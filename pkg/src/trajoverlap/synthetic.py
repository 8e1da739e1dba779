"""Synthetic check-in corpora whose steps follow the distance and visitation laws.

Used by the tests and the demo scripts; nothing here is needed to process
real data.
"""

from __future__ import annotations

import numpy as np

from .core import Trajectory, haversine_array
from .ingest import RawRecord

HOUR = 3600
DAY = 24 * HOUR


def law_driven_records(seed: int = 0, n_users: int = 80, n_locations: int = 1500,
                       trajectories_per_user: int = 10, length=(5, 9), gamma: float = 1.6,
                       box=(40.55, -74.15, 40.85, -73.75), novel_fraction: float = 0.35,
                       home_radius_km: float = 3.0) -> list[RawRecord]:
    """Check-in records for ``n_users`` users.

    Each location has a fixed attractiveness ``f``. A trajectory starts
    near the user's home (or, with probability ``novel_fraction``, at a
    random location anywhere) and each next venue ``c`` after ``a`` is drawn
    with probability proportional to ``(r(a, c) * f(c)) ** -gamma``,
    excluding ``a`` itself. Trajectories are four days apart, points one
    hour apart.
    """
    rng = np.random.default_rng(seed)
    lat = rng.uniform(box[0], box[2], n_locations)
    lon = rng.uniform(box[1], box[3], n_locations)
    f = np.exp(rng.normal(0.0, 0.5, n_locations))
    dist = haversine_array(lat[:, None], lon[:, None], lat[None, :], lon[None, :])
    r_min = max(np.median(np.sort(dist, axis=1)[:, 1]) / 2.0, 1e-3)
    with np.errstate(divide="ignore"):
        weight = (np.maximum(dist, r_min) * f[None, :]) ** -gamma
    np.fill_diagonal(weight, 0.0)
    weight /= weight.sum(axis=1, keepdims=True)
    cum = np.cumsum(weight, axis=1)

    records = []
    for u in range(n_users):
        home = rng.integers(n_locations)
        near = np.flatnonzero(dist[home] <= home_radius_km)
        t = int(rng.integers(0, 30)) * DAY
        for _ in range(trajectories_per_user):
            loc = rng.integers(n_locations) if rng.random() < novel_fraction else rng.choice(near)
            n = rng.integers(length[0], length[1] + 1)
            for i in range(n):
                records.append(RawRecord(f"user{u:04d}", t + i * HOUR, float(lat[loc]), float(lon[loc]),
                                         f"venue{loc:05d}"))
                loc = min(int(np.searchsorted(cum[loc], rng.random(), side="right")), n_locations - 1)
            t += 4 * DAY
    return records


def zipf_checkin_trajectories(seed: int = 0, n_users: int = 1000, n_locations: int = 14000,
                              n_trajectories: int = 12500, mean_length: float = 18.0,
                              personal: int = 40, exponent: float = 1.1) -> list[Trajectory]:
    """Check-in-like trajectories at the scale of a city dataset.

    Each user revisits a Zipf-weighted personal set of ``personal`` venues
    and otherwise picks from a global Zipf popularity; lengths are
    geometric with the given mean. Timestamps increase per user.
    """
    rng = np.random.default_rng(seed)
    ranks = np.arange(1, n_locations + 1, dtype=float)
    glob = ranks ** -exponent
    glob /= glob.sum()
    own = np.arange(1, personal + 1, dtype=float) ** -exponent
    own /= own.sum()
    owner = np.sort(rng.integers(0, n_users, n_trajectories))
    homes = [rng.choice(n_locations, personal, replace=False, p=glob) for _ in range(n_users)]
    out = []
    t = np.zeros(n_users, dtype=np.int64)
    for tid, u in enumerate(owner.tolist()):
        n = max(2, int(rng.geometric(1.0 / mean_length)))
        mine = rng.random(n) < 0.7
        locs = np.where(mine, homes[u][rng.choice(personal, n, p=own)], rng.choice(n_locations, n, p=glob))
        pts = [(int(t[u]) + HOUR * i, int(loc)) for i, loc in enumerate(locs)]
        t[u] += 4 * DAY
        out.append(Trajectory.from_pairs(f"user{u:05d}", tid, pts))
    return out
