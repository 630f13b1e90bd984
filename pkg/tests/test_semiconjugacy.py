"""
Tests for the Franks semiconjugacy: series solve, inversion and leaf probes
"""

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent.parent))

from src.core.semiconjugacy import (  # noqa: E402
    eval_h,
    fiber_probe,
    invert_h,
    invert_h_batch,
    quasi_isometry_probe,
    semiconjugacy_report,
    solve_h,
    tail_bound,
)
from src.core.torus_linalg import TorusPoint, grid_points, torus_distance  # noqa: E402
from src.utils.errors import DepthInsufficient  # noqa: E402


class TestSolve:
    def test_linear_is_identity(self, linear_u):
        assert np.all(linear_u.values == 0.0)
        assert linear_u.residual_sup == 0.0
        x = np.random.default_rng(0).random((10, 3))
        assert np.array_equal(linear_u.h(x), x)

    def test_small_residual(self, small_u):
        assert small_u.residual_sup < 1e-6
        assert 0.0 < small_u.sup_norm < 0.1
        assert small_u.lipschitz_est < 1.0

    def test_series_conjugates(self, small_u):
        pts = grid_points(3, centered=True)
        assert np.max(small_u.with_mode("series").residual(pts)) < 1e-6

    def test_shallow_depth_rejected(self, small_map):
        with pytest.raises(DepthInsufficient) as exc:
            solve_h(small_map, grid_n=4, depth=2, tolerance=1e-10, test_n=3)
        assert exc.value.suggested_depth > 2

    def test_tail_bound_decreases(self, small_map):
        assert tail_bound(small_map, 60) < tail_bound(small_map, 10)

    def test_fixed_point_maps_to_fixed_point(self, small_u):
        assert eval_h(small_u, TorusPoint((0.0, 0.0, 0.0))).coords == (0.0, 0.0, 0.0)

    def test_unknown_mode(self, small_u):
        with pytest.raises(ValueError):
            small_u.with_mode("spline")


class TestInversion:
    def test_batch_roundtrip(self, small_u):
        z = np.random.default_rng(1).random((500, 3))
        y, ok = invert_h_batch(small_u, z, tol=1e-9)
        assert ok.mean() > 0.99
        assert np.max(torus_distance(small_u.h(y[ok]), z[ok])) < 2e-9

    def test_single_point(self, small_u):
        z = TorusPoint((0.3, 0.6, 0.9))
        y = invert_h(small_u, z)
        assert torus_distance(small_u.h(y.array)[0], z.array) < 2e-9

    def test_fiber_trivial_for_linear(self, linear_u, linear_map):
        assert fiber_probe(linear_u, linear_map, TorusPoint((0.2, 0.4, 0.6))) == 0.0

    def test_fiber_small_for_odd_bump(self, small_u, small_map):
        assert fiber_probe(small_u, small_map, TorusPoint((0.1, 0.2, 0.3))) < 1e-6


class TestLeafProbes:
    def test_linear_leaves_are_straight(self, linear_map, linear_frames):
        a, b = quasi_isometry_probe(linear_map, linear_frames, "c", n_pairs=16, seed=0)
        assert a == pytest.approx(1.0, abs=1e-9)
        assert b == pytest.approx(0.0, abs=1e-9)

    def test_unknown_leaf(self, linear_map, linear_frames):
        with pytest.raises(ValueError):
            quasi_isometry_probe(linear_map, linear_frames, "x")

    def test_report(self, small_u, small_frames):
        rep = semiconjugacy_report(small_u, small_frames, n_fiber=8, n_inversion=200, n_pairs=8)
        assert rep.inversion_success_rate > 0.99
        assert rep.qi_a >= 1.0 - 1e-9
        assert set(rep.to_dict()) >= {"residual_sup", "fiber_bound_K", "qi_a", "qi_b"}
