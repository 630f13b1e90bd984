"""
Tests for ergodic statistics: observables, rate fits, sampling, exponents and plaque-level bounds
"""

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent.parent))

from src.core.ergodic_stats import (  # noqa: E402
    EstimateSeries,
    ObservableSpec,
    birkhoff_sum,
    block_observable,
    center_derivative_moment,
    center_exponent,
    character_orbit_check,
    correlation_series,
    deviation_tail,
    fit_exponential,
    lyapunov_spectrum,
    moment_bound_check,
    mostly_contracting_check,
    oscillation_check,
    plaque_birkhoff_mean,
    plaque_deviation_tail,
    predicted_tau,
    sample_nu_f,
)
from src.core.plaques import reference_measure  # noqa: E402
from src.core.torus_linalg import TorusPoint  # noqa: E402
from src.utils.errors import InsufficientSignal  # noqa: E402

ONE = ObservableSpec.const(1.0)
COS_X = ObservableSpec.character((1, 0, 0))


@pytest.fixture(scope="module")
def linear_samples(linear_u, spectral):
    return sample_nu_f(linear_u, spectral.automorphism, 2000, seed=7)


@pytest.fixture(scope="module")
def plaque(linear_builder):
    return linear_builder.grow_plaque(TorusPoint((0.25, 0.25, 0.25)))


class TestObservables:
    def test_character_values(self):
        assert COS_X(np.zeros((1, 3)))[0] == pytest.approx(1.0)
        assert COS_X(np.array([[0.5, 0.0, 0.0]]))[0] == pytest.approx(-1.0)
        assert COS_X.sup_norm == 1.0

    def test_character_holder_bound(self):
        assert COS_X.empirical_holder_quotient(n_pairs=2000) <= COS_X.holder_const

    def test_cusp_vanishes_at_center(self):
        phi = ObservableSpec.cusp((0.5, 0.5, 0.5))
        assert phi(np.array([[0.5, 0.5, 0.5]]))[0] == 0.0
        assert phi.holder_const == pytest.approx(1.0)

    def test_shift_and_constant(self):
        phi = ONE.shifted(-0.25)
        assert np.allclose(phi(np.random.default_rng(0).random((4, 3))), 0.75)
        assert phi.sup_norm == pytest.approx(1.25)
        assert phi.holder_const == 0.0

    def test_nodegrid(self):
        values = np.zeros((4, 4, 4))
        values[1, 2, 3] = 2.0
        phi = ObservableSpec.nodegrid(values)
        assert phi(np.array([[0.25, 0.5, 0.75]]))[0] == pytest.approx(2.0)
        assert phi.sup_norm == 2.0

    @pytest.mark.parametrize(
        "kwargs",
        [{"kind": "spline"}, {"kind": "constant", "holder_exp": 1.0}, {"kind": "nodegrid"}],
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            ObservableSpec(**kwargs)

    def test_block_observable(self, linear_map):
        block = block_observable(linear_map, ONE, 3)
        assert np.allclose(block(np.random.default_rng(1).random((5, 3))), 3.0)


class TestFits:
    def test_geometric_series(self):
        n = np.arange(10)
        series = EstimateSeries(n, 2.0 * 0.5 ** n, np.zeros(10), 100, 0, "geometric")
        fit = fit_exponential(series)
        assert fit.rate == pytest.approx(np.log(0.5))
        assert fit.log_intercept == pytest.approx(np.log(2.0))
        assert fit.tau == pytest.approx(0.5)
        assert fit.r_squared == pytest.approx(1.0)
        assert fit.fit_range == (0, 9)

    def test_noise_rejected(self):
        n = np.arange(10)
        series = EstimateSeries(n, np.full(10, 1e-3), np.ones(10), 100, 0)
        with pytest.raises(InsufficientSignal):
            fit_exponential(series)

    def test_to_frame(self):
        series = EstimateSeries(np.arange(3), np.ones(3), np.zeros(3), 10, 0)
        assert list(series.to_frame().columns) == ["n", "estimate", "stderr"]

    def test_predicted_tau(self):
        assert predicted_tau(2.0, 0.5, 0.1) == pytest.approx(np.exp(-0.5))
        assert predicted_tau(2.0, 0.5, 0.9) == 0.9


class TestSampling:
    def test_linear_samples_are_lattice_points(self, linear_samples):
        assert len(linear_samples) == 2000
        assert linear_samples.drop_rate == 0.0
        assert np.allclose(linear_samples.y, linear_samples.x)
        assert np.allclose(linear_samples.x, linear_samples.numerators / linear_samples.modulus)

    def test_seeded(self, linear_u, spectral):
        a = sample_nu_f(linear_u, spectral.automorphism, 50, seed=3)
        b = sample_nu_f(linear_u, spectral.automorphism, 50, seed=3)
        assert np.array_equal(a.numerators, b.numerators)

    def test_character_orbit(self, spectral):
        assert character_orbit_check(spectral.automorphism, (1, 0, 0), 50)


class TestExponents:
    def test_linear_center_exponent(self, linear_map, linear_frames, linear_u, linear_samples, spectral):
        est = center_exponent(linear_map, linear_frames, linear_u, linear_samples, n_orbit=3)
        assert est.value == pytest.approx(np.log(spectral.kappa[1]), abs=1e-9)
        assert est.count == len(linear_samples)

    def test_linear_spectrum(self, linear_map, linear_frames, linear_u, linear_samples, spectral):
        spec = lyapunov_spectrum(linear_map, linear_frames, linear_u, linear_samples, n_orbit=2)
        for bundle, kappa in zip("scu", spectral.kappa):
            assert spec[bundle].value == pytest.approx(np.log(kappa), abs=1e-9)

    def test_mostly_contracting(self, linear_map, linear_frames, plaque, spectral):
        worst, alpha0 = mostly_contracting_check(linear_map, linear_frames, [plaque], 3)
        assert worst == pytest.approx(3 * np.log(spectral.kappa[1]))
        assert alpha0 == -worst > 0

    def test_mostly_contracting_needs_steps(self, linear_map, linear_frames, plaque):
        with pytest.raises(ValueError):
            mostly_contracting_check(linear_map, linear_frames, [plaque], 0)


class TestCorrelations:
    def test_linear_characters_decorrelate(self, linear_map, linear_u, linear_samples):
        series = correlation_series(linear_map, linear_u, COS_X, COS_X, 3, 0, 7, samples=linear_samples)
        assert series.estimates[0] == pytest.approx(0.5, abs=0.05)
        for est, err in zip(series.estimates[1:], series.stderrs[1:]):
            assert abs(est) < 6 * err + 1e-3

    def test_birkhoff_sum_of_constant(self, small_map):
        assert birkhoff_sum(small_map, ONE, TorusPoint((0.1, 0.2, 0.3)), 7) == pytest.approx(7.0)


class TestDeviations:
    def test_constant_never_deviates(self, linear_map, linear_u, linear_samples):
        series = deviation_tail(linear_map, linear_u, ONE, 0.01, [0, 1, 4], 0, 7, samples=linear_samples)
        assert list(series.n_values) == [0, 1, 4]
        assert np.all(series.estimates == 0.0)

    def test_threshold_above_sup(self, linear_map, linear_u, linear_samples):
        eps = 2.0 * COS_X.sup_norm + 0.1
        series = deviation_tail(linear_map, linear_u, COS_X, eps, [2, 5], 0, 7, samples=linear_samples)
        assert np.all(series.estimates == 0.0)


class TestPlaqueBounds:
    def test_plaque_birkhoff_mean(self, linear_map, plaque):
        assert plaque_birkhoff_mean(linear_map, plaque, ONE, 5) == pytest.approx(5.0)

    def test_plaque_deviation_tail(self, linear_map, plaque):
        assert plaque_deviation_tail(linear_map, reference_measure(plaque), ONE, 2.0, 3) == 0.0

    def test_oscillation_of_constant(self, linear_builder, plaque):
        assert oscillation_check(linear_builder, plaque, ONE, 2) == pytest.approx(0.0, abs=1e-12)

    def test_moment_bound_constant(self, linear_builder, plaque):
        lhs, bound = moment_bound_check(linear_builder, plaque, ONE, 0.3, 2)
        assert lhs == pytest.approx(np.exp(0.6))
        assert bound == pytest.approx(lhs)

    def test_center_moment_linear(self, linear_builder, plaque, spectral):
        lhs, bound = center_derivative_moment(linear_builder, plaque, 2)
        assert lhs == pytest.approx(spectral.kappa[1] ** 2)
        assert bound == pytest.approx(lhs)
