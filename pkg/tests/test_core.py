import math
import random

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from trajoverlap.core import (EARTH_RADIUS_KM, GridSpec, LocationVocabulary, Trajectory, haversine,
                              haversine_array, tessellate)
from trajoverlap.errors import InputError

lat = st.floats(-90, 90, allow_nan=False)
lon = st.floats(-180, 180, allow_nan=False)


class TestHaversine:
    def test_identity(self):
        assert haversine((0, 0), (0, 0)) == 0.0

    def test_one_degree_equator(self):
        expected = EARTH_RADIUS_KM * math.pi / 180
        assert haversine((0, 0), (0, 1)) == pytest.approx(111.19, abs=0.01)
        assert haversine((0, 0), (0, 1)) == pytest.approx(expected, rel=1e-12)

    def test_symmetry_random_pairs(self):
        r = random.Random(0)
        for _ in range(100):
            a = (r.uniform(-90, 90), r.uniform(-180, 180))
            b = (r.uniform(-90, 90), r.uniform(-180, 180))
            assert haversine(a, b) == haversine(b, a)

    def test_triangle_inequality(self):
        r = np.random.default_rng(1)
        pts = np.column_stack([r.uniform(-90, 90, (1000, 3)), r.uniform(-180, 180, (1000, 3))])
        ab = haversine_array(pts[:, 0], pts[:, 3], pts[:, 1], pts[:, 4])
        bc = haversine_array(pts[:, 1], pts[:, 4], pts[:, 2], pts[:, 5])
        ac = haversine_array(pts[:, 0], pts[:, 3], pts[:, 2], pts[:, 5])
        assert np.all(ac <= ab + bc + 1e-9)

    def test_out_of_range(self):
        with pytest.raises(InputError):
            haversine((95, 0), (0, 0))
        with pytest.raises(InputError):
            haversine((0, 0), (0, 181))

    @given(lat, lon, lat, lon)
    def test_array_matches_scalar(self, a1, o1, a2, o2):
        assert haversine_array(a1, o1, a2, o2) == pytest.approx(haversine((a1, o1), (a2, o2)), abs=1e-9)

    @given(lat, lon, lat, lon)
    def test_nonnegative_and_zero_iff_equal(self, a1, o1, a2, o2):
        d = haversine((a1, o1), (a2, o2))
        assert d >= 0
        if (a1, o1) == (a2, o2):
            assert d == 0


class TestTessellate:
    def test_single_fix(self):
        vocab, ids = tessellate([(41.15, -8.61)], GridSpec(500))
        assert len(vocab) == 1 and ids == [0]

    def test_far_fixes_distinct(self):
        a = (41.15, -8.61)
        b = (41.15 + 10.0 / 111.19, -8.61)  # ~10 km north
        assert haversine(a, b) == pytest.approx(10.0, abs=0.01)
        vocab, ids = tessellate([a, b], GridSpec(500))
        assert ids[0] != ids[1] and len(vocab) == 2

    def test_close_fixes_same_cell(self):
        spec = GridSpec(500, origin=(41.0, -8.7))
        probe, _ = tessellate([(41.0, -8.7)], spec)
        centre = probe.coords(0)  # centre of the origin cell
        nudged = (centre[0] + 1.0 / 111190.0, centre[1])  # ~1 m north
        vocab, ids = tessellate([centre, nudged], spec)
        assert ids == [0, 0] and len(vocab) == 1

    def test_dense_and_deterministic(self):
        r = np.random.default_rng(3)
        fixes = list(zip(r.uniform(41.1, 41.2, 300), r.uniform(-8.7, -8.5, 300)))
        v1, ids1 = tessellate(fixes, GridSpec(250))
        v2, ids2 = tessellate(fixes, GridSpec(250))
        assert ids1 == ids2 and v1 == v2
        assert max(ids1) == len(v1) - 1 and set(ids1) == set(range(len(v1)))

    def test_cell_centre_within_half_diagonal(self):
        r = np.random.default_rng(4)
        fixes = list(zip(r.uniform(41.1, 41.2, 200), r.uniform(-8.7, -8.5, 200)))
        vocab, ids = tessellate(fixes, GridSpec(500))
        d = haversine_array([f[0] for f in fixes], [f[1] for f in fixes], vocab.lat[ids], vocab.lon[ids])
        assert d.max() * 1000 <= 500 * math.sqrt(2) / 2 + 1.0

    def test_empty(self):
        with pytest.raises(InputError):
            tessellate([], GridSpec())

    def test_bad_spec(self):
        with pytest.raises(InputError):
            GridSpec(0)


class TestTypes:
    def test_trajectory_sorted_noop(self):
        tr = Trajectory.from_pairs("u", 0, [(0, 1), (5, 2), (5, 3), (9, 1)])
        assert tuple(sorted(tr.points, key=lambda p: p.timestamp)) == tr.points
        assert tr.locations == (1, 2, 3, 1)
        assert tr.prefix().locations == (1, 2, 3) and tr.target == 1

    def test_trajectory_rejects_disorder(self):
        with pytest.raises(InputError):
            Trajectory.from_pairs("u", 0, [(5, 1), (4, 2)])
        with pytest.raises(InputError):
            Trajectory("u", 0, ())

    def test_vocabulary_invariants(self):
        with pytest.raises(InputError):
            LocationVocabulary.from_entries([(0, 0, "a"), (1, 1, "a")])
        with pytest.raises(InputError):
            LocationVocabulary.from_entries([(91, 0, "a")])
        v = LocationVocabulary.from_entries([(0, 0, "a"), (1, 1, "b")])
        assert v.id_of("b") == 1 and v.coords(1) == (1.0, 1.0)
