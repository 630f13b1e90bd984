"""
Tests for the DA family: evaluation, inverse, frames and the partial hyperbolicity check
"""

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent.parent))

from src.core.da_family import (  # noqa: E402
    CONE_FAMILIES,
    BumpSpec,
    diffeomorphism_threshold,
    eval_and_diff,
    make_da_map,
    rate_at,
    verify_partial_hyperbolicity,
)
from src.core.torus_linalg import TorusPoint, grid_points, torus_distance  # noqa: E402
from src.utils.errors import NotDiffeomorphism, VerificationFailed  # noqa: E402


class TestBump:
    def test_radius_bounds(self):
        with pytest.raises(ValueError):
            BumpSpec(radius=0.6)

    def test_odd_bump_vanishes_at_center(self, bump, spectral):
        psi, grad = bump.values_and_gradients(np.zeros((1, 3)), spectral.frame[:, 1])
        assert psi[0] == 0.0
        assert np.allclose(grad[0], spectral.frame[:, 1] / bump.radius)

    def test_support(self, bump, spectral):
        far = np.array([[0.5, 0.5, 0.5]])
        psi, grad = bump.values_and_gradients(far, spectral.frame[:, 1])
        assert psi[0] == 0.0
        assert np.allclose(grad, 0.0)


class TestDAMap:
    def test_linear_map_is_A(self, linear_map, spectral):
        x = np.random.default_rng(0).random((5, 3))
        expected = (x @ spectral.matrix.T) % 1.0
        assert np.allclose(linear_map.map(x), expected)

    def test_origin_is_fixed(self, small_map):
        image, jac = eval_and_diff(small_map, TorusPoint((0.0, 0.0, 0.0)))
        assert image.coords == (0.0, 0.0, 0.0)
        e2 = small_map.e2
        expected = (small_map.mu2 + small_map.amplitude / small_map.bump.radius) * e2
        assert np.allclose(jac @ e2, expected)

    def test_inverse(self, small_map):
        x = np.random.default_rng(1).random((200, 3))
        back = small_map.inverse(small_map.map(x))
        assert np.max(torus_distance(back, x)) < 1e-10

    def test_power_composes_steps(self, spectral, bump):
        f3 = make_da_map(spectral, bump, 0.02, power=3, check_grid=8)
        x = np.random.default_rng(2).random((10, 3))
        assert np.max(torus_distance(f3.map(x), f3.step(f3.step(f3.step(x))))) < 1e-12
        jac = f3.jacobian(x)
        manual = f3.step_jacobian(f3.step(f3.step(x))) @ f3.step_jacobian(f3.step(x)) @ f3.step_jacobian(x)
        assert np.allclose(jac, manual)

    def test_iterate_negative(self, small_map):
        x = np.random.default_rng(3).random((20, 3))
        assert np.max(torus_distance(small_map.iterate(small_map.iterate(x, 4), -4), x)) < 1e-9

    def test_negative_amplitude(self, spectral, bump):
        with pytest.raises(ValueError):
            make_da_map(spectral, bump, -0.1)

    def test_not_diffeomorphism_beyond_threshold(self, spectral, bump):
        s_star = diffeomorphism_threshold(spectral, bump)
        assert s_star > 0.05
        with pytest.raises(NotDiffeomorphism) as exc:
            make_da_map(spectral, bump, 3.0 * s_star, check_grid=64)
        assert exc.value.det * np.sign(spectral.automorphism.det) <= 0


class TestFrames:
    def test_linear_frames_are_eigenvectors(self, linear_frames, spectral):
        v = linear_frames.at(np.array([[0.3, 0.1, 0.8]]), "c")[0]
        assert np.allclose(v, spectral.frame[:, 1])
        assert linear_frames.max_residual < 1e-12

    def test_small_frames_close_to_linear(self, small_frames, spectral):
        dev = small_frames.deviation_from_linear(spectral.frame)
        assert dev.max() < 0.5
        assert small_frames.max_residual < 1e-4

    def test_center_rate_linear(self, linear_map, linear_frames, spectral):
        rates = rate_at(linear_map, linear_frames, grid_points(3), "c")
        assert np.allclose(rates, np.log(spectral.kappa[1]))


class TestPartialHyperbolicity:
    def test_linear_verified(self, linear_map, spectral):
        rep = verify_partial_hyperbolicity(linear_map, grid_n=16, iterations=5)
        assert rep.verified
        assert rep.lambdas[2] == pytest.approx(np.log(spectral.kappa[1]))
        assert rep.lambda5_min == pytest.approx(np.log(spectral.kappa[2]))
        assert rep.lambdas[3] < 0 < rep.lambdas[4]

    def test_grid_too_coarse(self, linear_map):
        with pytest.raises(ValueError):
            verify_partial_hyperbolicity(linear_map, grid_n=8)

    def test_report_serializes(self, linear_map):
        d = verify_partial_hyperbolicity(linear_map, grid_n=16, iterations=5).to_dict()
        assert d["verified"] is True
        assert d["first_violation"] is None
        assert len(d["lambda"]) == 6

    def test_linear_checks_every_cone_family(self, linear_map):
        rep = verify_partial_hyperbolicity(linear_map, grid_n=16, iterations=5)
        assert set(rep.cone_angles) == set(CONE_FAMILIES)
        assert all(angle == 0.3 for angle in rep.cone_angles.values())

    def test_perturbed_rates(self, small_map):
        rep = verify_partial_hyperbolicity(small_map, grid_n=16, iterations=40)
        assert rep.lambdas[1] < 0 < rep.lambdas[4]
        assert rep.lambda5_min < rep.lambda5_max
        assert rep.verified == (rep.first_violation is None)
        assert rep.power == 1

    def test_narrow_cone_not_verified(self, spectral, bump):
        f = make_da_map(spectral, bump, 0.05)
        rep = verify_partial_hyperbolicity(f, grid_n=16, cone_angle=1e-4, iterations=5, max_adjustments=0)
        assert not rep.verified
        assert rep.first_violation is not None
        assert rep.reason
        assert rep.to_dict()["first_violation"] == list(rep.first_violation)

    def test_raise_on_failure(self, spectral, bump):
        f = make_da_map(spectral, bump, 0.05)
        with pytest.raises(VerificationFailed):
            verify_partial_hyperbolicity(
                f, grid_n=16, cone_angle=1e-4, iterations=5, max_adjustments=0, raise_on_failure=True,
            )
