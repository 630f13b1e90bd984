"""
Tests for plaques: growth, reference measures, transfer splits, holonomy and the transfer tree
"""

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent.parent))

from src.core.plaques import (  # noqa: E402
    TransferTree,
    holder_measure,
    holder_quotient,
    holonomy_discrepancy,
    linear_partition,
    project_E0,
    pulled_back_sum,
    pushed_weights,
    reference_measure,
    transfer_functionals,
)
from src.core.semiconjugacy import leaf_bijectivity_check  # noqa: E402
from src.core.torus_linalg import TorusPoint, eigen_coords, reduce_mod1  # noqa: E402
from src.utils.errors import NotSameBox  # noqa: E402

BASE = TorusPoint((0.25, 0.25, 0.25))
NEAR = TorusPoint((0.27, 0.24, 0.26))
OTHER_BOX = TorusPoint((0.75, 0.75, 0.75))


def _cos_x(points):
    return np.cos(2 * np.pi * points[:, 0])


@pytest.fixture(scope="module")
def linear_plaque(linear_builder):
    return linear_builder.grow_plaque(BASE)


@pytest.fixture(scope="module")
def small_plaque(small_builder):
    return small_builder.grow_plaque(TorusPoint((0.3, 0.6, 0.2)))


class TestPartition:
    def test_face_tie_break(self, spectral):
        part = linear_partition(spectral, 2)
        z0 = np.array([0.3, 0.3, 0.3])
        c3 = eigen_coords(spectral, z0[None])[0, 2]
        on_face = z0 + (part.lower[2] + part.widths[2] - c3) * part.direction
        assert part.box_index(on_face)[0, 2] == 0
        assert part.box_index(on_face + 1e-6 * part.direction)[0, 2] == 1

    def test_boxes_are_aligned_in_eigencoordinates(self, spectral):
        part = linear_partition(spectral, 2)
        z0 = np.array([0.3, 0.3, 0.3])
        moved = z0 + 0.01 * spectral.frame[:, 2]
        assert part.box_index(moved)[0, :2].tolist() == part.box_index(z0)[0, :2].tolist()

    def test_segment_contains_point(self, spectral):
        part = linear_partition(spectral, 2)
        z = np.array([0.25, 0.25, 0.25])
        box, lo, hi = part.segment(z)
        assert box == int(part.box_id(part.box_index(z))[0])
        assert 0 <= box < 8
        assert lo < 0 < hi
        assert hi - lo <= part.widths[2] + 1e-12

    def test_segment_ends_on_box_or_wrap_face(self, spectral):
        part = linear_partition(spectral, 2)
        z = np.array([0.25, 0.25, 0.25])
        _, lo, hi = part.segment(z)
        for t in (lo, hi):
            end = z + t * part.direction
            g = (eigen_coords(spectral, end[None])[0, 2] - part.lower[2]) / part.widths[2]
            on_box_face = abs(g - round(g)) < 1e-9
            on_wrap = bool(np.any(np.minimum(np.abs(end), np.abs(end - 1.0)) < 1e-9))
            assert on_box_face or on_wrap

    def test_markov_defect_is_a_fraction(self, spectral):
        defect = linear_partition(spectral, 2).markov_defect(n_samples=20)
        assert 0.0 <= defect <= 1.0

    def test_bad_box_count(self, spectral):
        with pytest.raises(ValueError):
            linear_partition(spectral, 0)


class TestGrowth:
    def test_linear_plaque_is_straight(self, linear_plaque, linear_u):
        assert np.all(np.diff(linear_plaque.h_param) > 0)
        assert linear_plaque.f_length == pytest.approx(linear_plaque.h_length, abs=1e-9)
        assert linear_plaque.transverse_deviation(linear_u) < 1e-9
        assert np.max(np.diff(linear_plaque.f_arclen)) <= 0.05 + 1e-9

    def test_small_plaque(self, small_plaque, small_u):
        assert np.all(np.diff(small_plaque.h_param) > 0)
        assert small_plaque.transverse_deviation(small_u) < 1e-6
        assert leaf_bijectivity_check(small_u, small_plaque) > 0

    def test_reversed(self, linear_plaque):
        r = linear_plaque.reversed()
        assert np.allclose(r.points[0], linear_plaque.points[-1])
        assert r.f_length == pytest.approx(linear_plaque.f_length)


class TestMeasures:
    def test_reference_masses(self, linear_plaque):
        m = reference_measure(linear_plaque).segment_masses()
        assert m.sum() == pytest.approx(1.0)
        expected = np.diff(linear_plaque.h_param) / linear_plaque.h_length
        assert np.allclose(m, expected)

    def test_holder_measure_constant(self, linear_plaque):
        l = holder_measure(linear_plaque, 1.0, 0.5)
        assert l.measured_holder() <= 1.0 + 1e-12
        assert l.measured_holder() == pytest.approx(1.0)

    def test_holder_quotient(self):
        assert holder_quotient(np.array([0.0, 1.0]), np.array([0.0, 4.0]), 0.5) == pytest.approx(0.5)

    def test_projection_zero_for_reference(self, linear_plaque):
        _, dist, _ = project_E0(reference_measure(linear_plaque))
        assert dist == pytest.approx(0.0, abs=1e-14)

    def test_projection_linear_in_R(self, linear_plaque):
        dists = []
        for R in (0.05, 0.1, 0.2):
            _, dist, const = project_E0(holder_measure(linear_plaque, R, 0.5), R0=0.2)
            assert dist <= const * R
            dists.append(dist)
        assert 1.6 < dists[2] / dists[1] < 2.4
        assert 1.6 < dists[1] / dists[0] < 2.4


class TestTransfer:
    def test_linear_weights_are_length_ratios(self, linear_builder, linear_plaque):
        split = linear_builder.transfer_split(linear_plaque)
        lengths = np.array([c.h_length for c in split.children])
        assert split.weights.sum() == pytest.approx(1.0, abs=1e-9)
        assert np.all(split.weights > 0)
        assert np.allclose(split.weights, lengths / lengths.sum(), atol=1e-9)
        assert lengths.sum() == pytest.approx(linear_builder.power_mu3 * linear_plaque.h_length, rel=1e-9)
        assert split.density_variation < 1e-5

    def test_inserted_nodes_carry_evaluated_payload(self, linear_builder, linear_plaque):
        coarse = linear_builder.sub_plaque(linear_plaque, linear_plaque.h_param[[0, -1]])
        payload = {"a": _cos_x(reduce_mod1(coarse.points))}
        exact = linear_builder.transfer_split(coarse, payload, {"a": _cos_x})
        interpolated = linear_builder.transfer_split(coarse, payload)
        got = np.concatenate([pay["a"] for pay in exact.payloads])
        pre = np.concatenate([linear_builder.f.inverse(c.points) for c in exact.children])
        assert np.allclose(got, _cos_x(pre), atol=1e-8)
        rough = np.concatenate([pay["a"] for pay in interpolated.payloads])
        assert not np.allclose(rough, _cos_x(pre), atol=1e-3)

    def test_small_map_weights(self, small_builder, small_plaque):
        split = small_builder.transfer_split(small_plaque)
        assert split.weights.sum() == pytest.approx(1.0, abs=1e-9)
        assert np.all(split.weights > 0)
        assert all(0 <= c.box_id < 8 for c in split.children)

    def test_pushed_weights_match_for_reference(self, linear_builder, linear_plaque):
        split = linear_builder.transfer_split(linear_plaque, {"G": np.zeros(len(linear_plaque.points))})
        assert np.allclose(pushed_weights(split), split.weights, atol=1e-9)

    def test_holder_constant_contracts(self, linear_builder, linear_plaque, spectral):
        l = holder_measure(linear_plaque, 1.0, 0.5)
        bound = np.exp(-np.log(spectral.kappa[2]) * 0.5) * (1 + 1e-3)
        children = linear_builder.transfer_step(l)
        assert sum(c for c, _ in children) == pytest.approx(1.0)
        for _, child in children:
            assert child.holder_const <= bound * l.measured_holder()


class TestHolonomy:
    def test_linear_holonomy_preserves_reference(self, linear_builder, linear_plaque):
        native = reference_measure(linear_builder.grow_plaque(NEAR))
        moved = linear_builder.cs_holonomy(reference_measure(linear_plaque), NEAR)
        assert holonomy_discrepancy(moved, native) < 1e-9

    def test_identity_holonomy(self, linear_builder, linear_plaque):
        moved = linear_builder.cs_holonomy(reference_measure(linear_plaque), BASE)
        assert moved.plaque is linear_plaque

    def test_other_box(self, linear_builder, linear_plaque):
        with pytest.raises(NotSameBox):
            linear_builder.cs_holonomy(reference_measure(linear_plaque), OTHER_BOX)


class TestTransferTree:
    def test_weights_conserved(self, linear_builder, linear_plaque):
        tree = TransferTree(linear_builder, reference_measure(linear_plaque))
        tree.expand(2)
        assert tree.total_weight(2) == pytest.approx(1.0, abs=1e-9)
        assert tree.integrate(lambda p: np.ones(len(p))) == pytest.approx(1.0, abs=1e-9)

    def test_accumulator_counts_steps(self, linear_builder, linear_plaque):
        tree = TransferTree(linear_builder, reference_measure(linear_plaque), {"one": lambda p: np.ones(len(p))})
        tree.expand(2)
        for _, _, acc in tree.leaf_table(2):
            assert np.allclose(acc["one"], 2.0)

    def test_accumulator_is_exact_at_every_node(self, small_builder, small_plaque):
        tree = TransferTree(small_builder, reference_measure(small_plaque), {"a": _cos_x})
        tree.expand(2)
        expected = pulled_back_sum(small_builder.f, _cos_x, 1)
        for _, m, acc in tree.leaf_table(2):
            assert np.allclose(acc["a"], expected(small_builder.f.inverse(m.plaque.points)), atol=1e-8)

    def test_save_and_load(self, linear_builder, linear_plaque, tmp_path):
        tree = TransferTree(linear_builder, reference_measure(linear_plaque))
        tree.expand(1)
        tree.save(str(tmp_path / "tree.joblib"))
        other = TransferTree(linear_builder, reference_measure(linear_plaque))
        other.load(str(tmp_path / "tree.joblib"))
        assert other.depth == 1
        assert other.total_weight() == pytest.approx(tree.total_weight())

    def test_functionals_shape(self, linear_builder, linear_plaque):
        second = linear_builder.grow_plaque(OTHER_BOX)
        out = transfer_functionals(
            linear_builder, reference_measure(linear_plaque), reference_measure(second),
            [lambda p: np.cos(2 * np.pi * p[:, 0])], 2,
        )
        assert out.shape == (3, 1)
        assert np.all(out >= 0)
