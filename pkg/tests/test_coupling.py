"""
Tests for coupling: parameters, mass pairing, records and coupling-time tail statistics
"""

import sys
from pathlib import Path

import numpy as np
import pytest
from pydantic import ValidationError

sys.path.insert(0, str(Path(__file__).parent.parent))

from src.core.coupling import (  # noqa: E402
    CoupledAtom,
    CouplingParams,
    CouplingRecord,
    PlaqueRectangle,
    first_run,
    matched_distance_check,
    pair_masses,
    run_coupling,
    start_state,
    stopping_step,
    tail_series,
    tail_statistics,
)
from src.core.torus_linalg import TorusPoint  # noqa: E402
from src.utils.errors import InsufficientSignal, PairingMismatch  # noqa: E402


def _atom(R: int, mass: float) -> CoupledAtom:
    pts = np.array([[0.1, 0.2, 0.3], [0.4, 0.5, 0.6]])
    return CoupledAtom(pts, pts.copy(), mass, R, R)


def _record(atoms, uncoupled: float) -> CouplingRecord:
    return CouplingRecord(atoms, {}, uncoupled, 1, 1.0, CouplingParams())


@pytest.fixture(scope="module")
def geometric_record():
    atoms = [_atom(k + 1, 0.5 ** (k + 1)) for k in range(60)]
    return _record(atoms, 0.5 ** 60)


@pytest.fixture(scope="module")
def plaques(linear_builder):
    return (
        linear_builder.grow_plaque(TorusPoint((0.25, 0.25, 0.25))),
        linear_builder.grow_plaque(TorusPoint((0.27, 0.24, 0.26))),
    )


class TestParams:
    def test_lambda_alias(self):
        params = CouplingParams(**{"lambda": 0.2})
        assert params.lam == 0.2
        assert params.contraction_rate == pytest.approx(np.exp(-0.1))
        assert params.rho1 == pytest.approx(4.0 * 0.05 * np.exp(-0.1))
        assert params.model_dump(by_alias=True)["lambda"] == 0.2

    def test_bounds(self):
        params = CouplingParams(K=2.0, lam=0.1, eps=0.01)
        assert params.stopping_bound(0) == 2.0
        assert params.stopping_bound(10) == pytest.approx(2.0 * np.exp(-1.0))
        assert params.distance_bound(10) == pytest.approx(0.02 * np.exp(-0.5))
        assert params.distance_bound(0) == pytest.approx(0.02)
        assert params.rho1 == pytest.approx(0.02 * np.exp(-0.05))

    @pytest.mark.parametrize("kwargs", [{"K": 0.0}, {"eps": -1.0}, {"horizon": 0}, {"unknown": 1}])
    def test_invalid(self, kwargs):
        with pytest.raises(ValidationError):
            CouplingParams(**kwargs)

    def test_consistency(self):
        params = CouplingParams()
        assert all(params.check_consistency(-1.0, 0.5, 1.0, 0.5).values())
        checks = params.check_consistency(-0.1, 0.99, 1.0, 0.1)
        assert checks == {
            "lambda_below_center_rate": False,
            "moment_rate_dominates": False,
            "eps_within_continuity_radius": False,
        }


class TestPairing:
    def test_greedy_largest_first(self):
        a, b, c, d = object(), object(), object(), object()
        items, unpaired = pair_masses([(a, 0.5), (b, 0.3), (None, 0.2)], [(c, 0.6), (d, 0.4)], start=3)
        assert [(it.first, it.second) for it in items] == [(a, c), (b, c), (b, d)]
        assert [it.mass for it in items] == pytest.approx([0.5, 0.1, 0.2])
        assert unpaired == pytest.approx(0.2)
        assert all(it.start == 3 for it in items)

    def test_rectangle_height(self, plaques):
        with pytest.raises(ValueError):
            PlaqueRectangle(plaques[0], height=(0.5, 0.5))
        rect = PlaqueRectangle(plaques[0], height=(0.25, 0.75), scale=2.0)
        assert rect.mass == pytest.approx(1.0)
        assert rect.atom_masses().sum() == pytest.approx(1.0)

    def test_unequal_masses(self, linear_builder, plaques):
        with pytest.raises(PairingMismatch):
            run_coupling(PlaqueRectangle(plaques[0]), PlaqueRectangle(plaques[1], scale=0.5),
                         CouplingParams(), linear_builder)


class TestTailStatistics:
    def test_conservation(self, geometric_record):
        assert geometric_record.conservation_error < 1e-12

    def test_tail_series(self, geometric_record):
        series = tail_series(geometric_record, max_n=10)
        assert list(series.n_values) == list(range(11))
        assert series.estimates[0] == pytest.approx(1.0)
        assert series.estimates[3] == pytest.approx(0.5 ** 3)

    def test_geometric_rate(self, geometric_record):
        fit = tail_statistics(geometric_record)
        assert fit.rate == pytest.approx(np.log(0.5), abs=1e-6)
        assert fit.tau == pytest.approx(0.5, abs=1e-6)

    def test_single_coupling_time(self):
        fit = tail_statistics(_record([_atom(3, 1.0)], 0.0))
        assert fit.rate == float("-inf")
        assert fit.tau == 0.0
        assert fit.log_intercept == pytest.approx(0.0)

    def test_single_coupling_time_with_uncoupled_mass(self):
        with pytest.raises(InsufficientSignal):
            tail_statistics(_record([_atom(3, 0.9)], 0.1))

    def test_uncoupled_mass_stays_in_tail(self):
        rec = _record([_atom(1, 0.55), _atom(2, 0.05), _atom(3, 0.01)], 0.39)
        series = tail_series(rec)
        assert series.estimates == pytest.approx([1.0, 0.45, 0.40])

    def test_two_coupling_times_are_too_few(self):
        with pytest.raises(InsufficientSignal):
            tail_statistics(_record([_atom(1, 0.55), _atom(2, 0.05)], 0.40))

    def test_too_little_coupled(self):
        with pytest.raises(InsufficientSignal):
            tail_statistics(_record([_atom(2, 0.3), _atom(4, 0.1)], 0.6))

    def test_record_serializes(self, geometric_record):
        d = geometric_record.to_dict()
        assert d["params"]["lambda"] == CouplingParams().lam
        assert len(d["coupled"]) == 60
        assert d["coupled_mass"] == pytest.approx(1.0 - 0.5 ** 60)

    def test_identical_atoms_have_zero_distance(self, linear_map):
        rec = _record([_atom(1, 0.6), _atom(2, 0.4)], 0.0)
        assert matched_distance_check(rec, linear_map, n=5) == 0.0


class TestRunCoupling:
    def test_linear_run_conserves_mass(self, linear_builder, plaques):
        params = CouplingParams(max_runs=1, horizon=2, max_n0=3)
        rec = run_coupling(PlaqueRectangle(plaques[0]), PlaqueRectangle(plaques[1]), params, linear_builder)
        assert rec.runs == 1
        assert rec.conservation_error < 1e-6
        assert rec.coupled_mass + rec.uncoupled_mass == pytest.approx(1.0, abs=1e-6)

    def test_budget_flag_matches_leftover(self, linear_builder, plaques):
        params = CouplingParams(max_runs=1, horizon=1, max_n0=3)
        rec = run_coupling(PlaqueRectangle(plaques[0]), PlaqueRectangle(plaques[1]), params, linear_builder)
        assert rec.to_dict()["budget_exhausted"] == rec.budget_exhausted
        if rec.coupled_mass < 1.0 - 1e-9:
            assert rec.uncoupled_mass > 0

    def test_active_overflow_is_uncoupled(self, linear_builder, plaques):
        params = CouplingParams(max_runs=1, horizon=2, max_n0=3).model_copy(update={"max_active": 0})
        rec = run_coupling(PlaqueRectangle(plaques[0]), PlaqueRectangle(plaques[1]), params, linear_builder)
        assert rec.coupled == []
        assert rec.overflow_mass == pytest.approx(rec.first_runs[0].matched_mass)
        assert rec.to_dict()["overflow_mass"] == rec.overflow_mass
        assert rec.uncoupled_mass == pytest.approx(1.0, abs=1e-6)


class TestFirstRun:
    @pytest.fixture(scope="class")
    def first(self, linear_builder, plaques):
        return first_run(PlaqueRectangle(plaques[0]), PlaqueRectangle(plaques[1]), CouplingParams(max_n0=3), linear_builder)

    def test_matched_pair(self, first):
        assert 1 <= first.n0 <= 3
        a, b = first.matched
        assert np.array_equal(a.h_param, b.h_param)
        assert 0.0 < first.matched_mass <= 1.0
        assert first.matched_mass >= first.positive_mass_bound - 1e-12
        assert first.stopped_mass_n0 == pytest.approx(1.0 - first.matched_mass)

    def test_complements_balance(self, first):
        for side in first.complements:
            assert sum(m for _, m in side) == pytest.approx(1.0 - first.matched_mass, abs=1e-9)

    def test_stopping_step_conserves_pair_mass(self, first, linear_builder):
        params = CouplingParams()
        state = start_state(first, linear_builder)
        before = state.uncoupled
        with pytest.raises(ValueError):
            stopping_step(state, first.n0, params)
        state, stopped = stopping_step(state, first.n0 + 1, params)
        assert stopped >= 0.0
        assert state.active
        assert state.distance_violations == 0
        total = sum(p.mass for p in state.active) + stopped + state.uncoupled - before
        assert total == pytest.approx(first.matched_mass, abs=1e-9)
