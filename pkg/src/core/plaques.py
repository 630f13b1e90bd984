"""
Plaques
Unstable plaques pulled back through h from box-induced linear plaques, their reference
measures, transfer splits, center-stable holonomy and the n-step transfer tree
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import joblib
import networkx as nx
import numpy as np

from src.core.da_family import DAMap, FrameField
from src.core.semiconjugacy import DisplacementField, invert_h_batch
from src.core.torus_linalg import SpectralData, TorusPoint, eigen_coords, reduce_mod1
from src.utils.errors import (
    ChildConstructionFailed,
    HImageNonMonotone,
    HolonomyOutOfPlaque,
    LeafIntegrationStalled,
    NotSameBox,
    TreeTooLarge,
)
from src.utils.parallel import rng_for

logger = logging.getLogger(__name__)

_EDGE_EPS = 1e-12


# ---------------------------------------------------------------------------
# Linear partition
# ---------------------------------------------------------------------------

class LinearPartition:
    """
    Axis-aligned box grid in eigencoordinates; a linear plaque is the maximal segment of an
    e3-line inside one box

    A torus point is placed by the eigencoordinates of its representative in [0, 1)^3. The
    bounding box of the unit cube's image is cut into boxes_per_axis^3 boxes, so every piece
    is a box intersected with that parallelepiped and convex. Plaques end on c3-faces of the
    box or where the line wraps through a face of the unit cube. A point on a box face
    belongs to the lower box on that axis.
    """

    def __init__(self, spectral: SpectralData, boxes_per_axis: int = 2):
        if boxes_per_axis < 1:
            raise ValueError(f"boxes_per_axis must be >= 1; got {boxes_per_axis}")
        self.spectral = spectral
        self.boxes_per_axis = boxes_per_axis
        self.direction = np.ascontiguousarray(spectral.frame[:, 2])
        corners = np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)], dtype=float)
        c = eigen_coords(spectral, corners)
        self.lower = c.min(axis=0)
        self.widths = (c.max(axis=0) - self.lower) / boxes_per_axis

    @property
    def side(self) -> float:
        return float(self.widths.min())

    def _grid(self, c: np.ndarray) -> np.ndarray:
        return (c - self.lower) / self.widths

    def box_index(self, z) -> np.ndarray:
        g = self._grid(eigen_coords(self.spectral, reduce_mod1(np.atleast_2d(z))))
        near = np.round(g)
        on_face = (np.abs(g - near) < 1e-9) & (near > 0)
        idx = np.where(on_face, near - 1, np.floor(g)).astype(np.int64)
        return np.clip(idx, 0, self.boxes_per_axis - 1)

    def box_id(self, idx) -> np.ndarray:
        idx = np.atleast_2d(idx)
        b = self.boxes_per_axis
        return idx[:, 0] * b * b + idx[:, 1] * b + idx[:, 2]

    def segment(self, z: np.ndarray) -> Tuple[int, float, float]:
        """
        Linear plaque through a reduced point z

        Returns:
            (box_id, t_lo, t_hi): the plaque is z + t e3 for t in [t_lo, t_hi]
        """
        idx = self.box_index(z)[0]
        c3 = float(eigen_coords(self.spectral, np.atleast_2d(z))[0, 2])
        face = self.lower[2] + idx[2] * self.widths[2]
        t_lo, t_hi = face - c3, face + self.widths[2] - c3
        for j in range(3):
            dj = self.direction[j]
            if abs(dj) < 1e-15:
                continue
            ta, tb = -z[j] / dj, (1.0 - z[j]) / dj
            t_lo = max(t_lo, min(ta, tb))
            t_hi = min(t_hi, max(ta, tb))
        return int(self.box_id(idx)[0]), float(min(t_lo, 0.0)), float(max(t_hi, 0.0))

    def crossings(self, origin: np.ndarray, s0: float, s1: float) -> np.ndarray:
        """Parameters in (s0, s1) where origin + s e3 crosses a wrap face or a c3 box face"""
        wraps = []
        for j in range(3):
            dj = self.direction[j]
            if abs(dj) < 1e-15:
                continue
            lo, hi = sorted((origin[j] + s0 * dj, origin[j] + s1 * dj))
            ks = np.arange(np.floor(lo) + 1, np.ceil(hi))
            wraps.extend((ks - origin[j]) / dj)
        wraps = np.unique(np.asarray(wraps, dtype=float))
        wraps = wraps[(wraps > s0 + _EDGE_EPS) & (wraps < s1 - _EDGE_EPS)]

        cuts = list(wraps)
        edges = np.concatenate([[s0], wraps, [s1]])
        for a, b in zip(edges[:-1], edges[1:]):
            cell = np.floor(origin + 0.5 * (a + b) * self.direction)
            c3 = float(eigen_coords(self.spectral, np.atleast_2d(origin - cell))[0, 2])
            ks = np.arange(np.floor((c3 + a - self.lower[2]) / self.widths[2]) + 1,
                           np.ceil((c3 + b - self.lower[2]) / self.widths[2]))
            cuts.extend(self.lower[2] + ks * self.widths[2] - c3)
        cuts = np.unique(np.asarray(cuts, dtype=float))
        return cuts[(cuts > s0 + _EDGE_EPS) & (cuts < s1 - _EDGE_EPS)]

    def is_full_piece(self, origin: np.ndarray, a: float, b: float, tol: float = 1e-9) -> bool:
        """Whether origin + [a, b] e3 is a whole linear plaque"""
        mid = origin + 0.5 * (a + b) * self.direction
        z = reduce_mod1(mid)
        _, lo, hi = self.segment(z)
        half = 0.5 * (b - a)
        return abs(-half - lo) < tol and abs(half - hi) < tol

    def markov_defect(self, n_samples: int = 200, power: int = 1, seed: int = 0) -> float:
        """Mass fraction of A^N-images of linear plaques falling into partial plaques"""
        rng = rng_for(seed, 2)
        mat = self.spectral.automorphism.power(power).matrix.astype(float)
        scale = float(self.spectral.mu[2] ** power)
        partial = 0.0
        total = 0.0
        for z in rng.random((n_samples, 3)):
            _, t_lo, t_hi = self.segment(z)
            origin = mat @ z
            s0, s1 = sorted((scale * t_lo, scale * t_hi))
            edges = np.concatenate([[s0], self.crossings(origin, s0, s1), [s1]])
            for a, b in zip(edges[:-1], edges[1:]):
                total += b - a
                if not self.is_full_piece(origin, a, b):
                    partial += b - a
        defect = partial / total if total > 0 else 0.0
        logger.info(f"Markov defect ({self.boxes_per_axis} boxes/axis, N={power}): {defect:.4f}")
        return defect


def linear_partition(spectral: SpectralData, boxes_per_axis: int = 2) -> LinearPartition:
    return LinearPartition(spectral, boxes_per_axis)


# ---------------------------------------------------------------------------
# Plaques and measures
# ---------------------------------------------------------------------------

@dataclass
class Plaque:
    """
    A polyline on an f-unstable leaf whose h-image is the segment anchor + (T - anchor_param) e3

    points are lifts with h_lift(points) + offset equal to the linear points at h_param.
    """

    base: TorusPoint
    points: np.ndarray
    f_arclen: np.ndarray
    h_param: np.ndarray
    box_id: int
    anchor: np.ndarray
    anchor_param: float
    offset: np.ndarray
    direction: np.ndarray

    @property
    def h_length(self) -> float:
        return float(self.h_param[-1] - self.h_param[0])

    @property
    def f_length(self) -> float:
        return float(self.f_arclen[-1])

    def linear_points(self, params) -> np.ndarray:
        params = np.asarray(params, dtype=float)
        return self.anchor[None, :] + (params - self.anchor_param)[:, None] * self.direction[None, :]

    def transverse_deviation(self, u: DisplacementField) -> float:
        """Largest distance of h(node) from the linear segment"""
        images = u.h_lift(self.points) + self.offset
        c = eigen_coords(u.f.spectral, images - self.anchor[None, :])
        return float(np.max(np.linalg.norm(c[:, :2], axis=-1)))

    def reversed(self) -> "Plaque":
        return Plaque(
            self.base, self.points[::-1].copy(), self.f_arclen[-1] - self.f_arclen[::-1],
            self.h_param[::-1].copy(), self.box_id, self.anchor, self.anchor_param,
            self.offset, self.direction,
        )


def _arclength(points: np.ndarray) -> np.ndarray:
    seg = np.linalg.norm(np.diff(points, axis=0), axis=-1)
    return np.concatenate([[0.0], np.cumsum(seg)])


def holder_quotient(values: np.ndarray, arclen: np.ndarray, gamma: float) -> float:
    """max over node pairs of |ΔG| / d^γ with d the polyline arclength"""
    if len(values) < 2:
        return 0.0
    dv = np.abs(values[:, None] - values[None, :])
    d = np.abs(arclen[:, None] - arclen[None, :])
    mask = d > 0
    if not mask.any():
        return 0.0
    return float(np.max(dv[mask] / d[mask] ** gamma))


@dataclass
class WeightedPlaqueMeasure:
    """Segment-atom measure on a plaque with log-density G relative to the reference measure"""

    plaque: Plaque
    log_density: np.ndarray
    holder_const: float = 0.0
    holder_exp: float = 0.5
    total_mass: float = 1.0

    def segment_masses(self) -> np.ndarray:
        g = self.log_density
        raw = np.diff(self.plaque.h_param) * np.exp(0.5 * (g[:-1] + g[1:]) - np.max(g))
        return self.total_mass * raw / raw.sum()

    def integrate(self, values: np.ndarray) -> float:
        """∫ φ dl for φ sampled at the nodes (segment midpoint rule)"""
        values = np.asarray(values, dtype=float)
        return float(np.sum(self.segment_masses() * 0.5 * (values[:-1] + values[1:])))

    def measured_holder(self) -> float:
        return holder_quotient(self.log_density, self.plaque.f_arclen, self.holder_exp)


def reference_measure(p: Plaque, holder_exp: float = 0.5) -> WeightedPlaqueMeasure:
    """Pullback of normalized linear arclength: weights ∝ Δh_param, G ≡ 0"""
    return WeightedPlaqueMeasure(p, np.zeros(len(p.points)), 0.0, holder_exp, 1.0)


def holder_measure(p: Plaque, R: float, gamma: float, center_index: int = 0) -> WeightedPlaqueMeasure:
    """Measure with G = R·d(·, node)^γ along the plaque"""
    d = np.abs(p.f_arclen - p.f_arclen[center_index])
    return WeightedPlaqueMeasure(p, R * d ** gamma, R, gamma, 1.0)


def project_E0(l: WeightedPlaqueMeasure, R0: float = 1.0) -> Tuple[WeightedPlaqueMeasure, float, float]:
    """
    Nearest reference measure and sup_{‖φ‖₀ ≤ 1} |l(φ) - l̃(φ)|

    Returns:
        (reference measure, distance, C) with distance ≤ C·R for R ≤ R0, where
        C = (e^{R0·D^γ} - 1)/R0 and D is the plaque f-length
    """
    ref = reference_measure(l.plaque, l.holder_exp)
    distance = float(np.sum(np.abs(l.segment_masses() - ref.segment_masses())))
    span = l.plaque.f_length ** l.holder_exp
    const = float(np.expm1(R0 * span) / R0)
    return ref, distance, const


# ---------------------------------------------------------------------------
# Growth, transfer and holonomy
# ---------------------------------------------------------------------------

Accumulator = Callable[[np.ndarray], np.ndarray]


def pulled_back_sum(f: DAMap, fn: Accumulator, steps: int) -> Accumulator:
    """x -> Σ_{i=0}^{steps} fn(F^{-i} x), an accumulator evaluated at any point of a leaf"""

    def _sum(points: np.ndarray) -> np.ndarray:
        x = reduce_mod1(np.atleast_2d(points))
        total = fn(x)
        for _ in range(steps):
            x = f.inverse(x)
            total = total + fn(x)
        return total

    return _sum


@dataclass
class TransferSplit:
    parent: Plaque
    children: List[Plaque]
    weights: np.ndarray
    full: List[bool]
    density_variation: float
    payloads: List[Dict[str, np.ndarray]] = field(default_factory=list)


def pushed_weights(split: TransferSplit) -> np.ndarray:
    """Mass of e^G·(reference) on each preimage piece, normalized; G travels in the "G" payload"""
    masses = []
    for child, pay in zip(split.children, split.payloads):
        g = pay["G"]
        dpre = np.abs(np.diff(child.h_param))
        masses.append(float(np.sum(dpre * np.exp(0.5 * (g[:-1] + g[1:]) - np.max(g)))))
    masses_arr = np.asarray(masses)
    return masses_arr / masses_arr.sum()


class PlaqueBuilder:
    """
    Builds plaques for a fixed map, displacement field, frames and partition

    Args:
        f: DA map (its power N is the analyzed map)
        u: displacement field of h
        frames: invariant frames (Ê^u drives the growth predictor)
        partition: linear partition
        step: maximal f-arclength node spacing
        tol: inversion tolerance for leaf points
    """

    def __init__(
        self,
        f: DAMap,
        u: DisplacementField,
        frames: FrameField,
        partition: LinearPartition,
        step: float = 0.02,
        tol: float = 1e-11,
        max_nodes: int = 20_000,
    ):
        self.f = f
        self.u = u
        self.frames = frames
        self.partition = partition
        self.step = step
        self.tol = tol
        self.max_nodes = max_nodes
        self.direction = partition.direction
        self.power_matrix = f.spectral.automorphism.power(f.power).matrix.astype(float)
        self.power_mu3 = float(f.spectral.mu[2] ** f.power)

    # helpers ---------------------------------------------------------------

    def _c3(self, x: np.ndarray) -> np.ndarray:
        return eigen_coords(self.f.spectral, x)[..., 2]

    def leaf_points(self, linear: np.ndarray, near: np.ndarray) -> np.ndarray:
        """Lifted h-preimages of linear points, each chosen next to its guess"""
        linear = np.atleast_2d(linear)
        y, ok = invert_h_batch(self.u, reduce_mod1(linear), self.tol)
        if not ok.all():
            bad = linear[int(np.argmin(ok))]
            raise ChildConstructionFailed(f"h^-1 failed at {reduce_mod1(bad).tolist()}")
        return y + np.round(np.atleast_2d(near) - y)

    def _rk4(self, x: np.ndarray, h: float) -> np.ndarray:
        fr = self.frames
        k1 = fr.at(x, "u")
        k2 = fr.at(x + 0.5 * h * k1, "u")
        k3 = fr.at(x + 0.5 * h * k2, "u")
        k4 = fr.at(x + h * k3, "u")
        return x + h * (k1 + 2 * k2 + 2 * k3 + k4) / 6.0

    # growth ----------------------------------------------------------------

    def grow_plaque(self, y: TorusPoint) -> Plaque:
        """
        Integrate Ê^u from y in both directions, snapping every node onto the h-preimage
        of the linear plaque through h(y), until the h-image leaves the plaque
        """
        x0 = y.array[None, :]
        anchor = self.u.h(x0)[0]
        box_id, t_lo, t_hi = self.partition.segment(anchor)
        anchor_param = float(self._c3(anchor))
        offset = np.round(anchor - self.u.h_lift(x0)[0])
        p_lo, p_hi = anchor_param + t_lo, anchor_param + t_hi

        def _param(x: np.ndarray) -> float:
            return float(self._c3(self.u.h_lift(x)[0] + offset))

        def _walk(sign: float, limit: float) -> Tuple[List[np.ndarray], List[float]]:
            pts: List[np.ndarray] = []
            params: List[float] = []
            x, t = x0, anchor_param
            while sign * (limit - t) > _EDGE_EPS:
                if len(pts) > self.max_nodes:
                    raise LeafIntegrationStalled(f"Plaque through {y.coords} exceeded {self.max_nodes} nodes")
                pred = self._rk4(x, sign * self.step)
                t_pred = _param(pred)
                if sign * (t_pred - t) <= 0:
                    raise HImageNonMonotone(f"h-parameter reversed near {reduce_mod1(pred[0]).tolist()}")
                if sign * (t_pred - limit) >= 0:
                    t_pred = limit
                x = self.leaf_points(self._linear(anchor, anchor_param, [t_pred]), pred)
                t = t_pred
                pts.append(x[0])
                params.append(t)
            return pts, params

        fwd_pts, fwd_params = _walk(1.0, p_hi)
        back_pts, back_params = _walk(-1.0, p_lo)

        points = np.array(back_pts[::-1] + [x0[0]] + fwd_pts)
        h_param = np.array(back_params[::-1] + [anchor_param] + fwd_params)
        if len(points) < 2:
            raise LeafIntegrationStalled(f"Degenerate plaque through {y.coords}")
        if np.any(np.diff(h_param) <= 0):
            raise HImageNonMonotone(f"h-parameter not increasing on plaque through {y.coords}")

        return Plaque(
            base=y,
            points=points,
            f_arclen=_arclength(points),
            h_param=h_param,
            box_id=box_id,
            anchor=anchor,
            anchor_param=anchor_param,
            offset=offset,
            direction=self.direction,
        )

    def _linear(self, anchor: np.ndarray, anchor_param: float, params) -> np.ndarray:
        params = np.asarray(params, dtype=float)
        return anchor[None, :] + (params - anchor_param)[:, None] * self.direction[None, :]

    def plaque_points(self, p: Plaque, params: np.ndarray) -> np.ndarray:
        """Leaf points of p at arbitrary h-parameters"""
        near = np.stack([np.interp(params, p.h_param, p.points[:, j]) for j in range(3)], axis=-1)
        return self.leaf_points(p.linear_points(params), near)

    def sub_plaque(self, p: Plaque, params: np.ndarray) -> Plaque:
        """The plaque restricted to [params.min(), params.max()] with nodes at params"""
        params = np.unique(params)
        points = self.plaque_points(p, params)
        return Plaque(
            TorusPoint(tuple(float(c) for c in reduce_mod1(points[len(points) // 2]))),  # type: ignore[arg-type]
            points, _arclength(points), params, p.box_id, p.anchor, p.anchor_param,
            p.offset, p.direction,
        )

    # transfer --------------------------------------------------------------

    def _refine(self, p: Plaque, payload: Dict[str, np.ndarray], evaluators: Dict[str, Accumulator]):
        """Insert nodes so image segments are no longer than step; evaluated payloads are recomputed there"""
        images = self.f.lift_map(p.points)
        seg_img = np.linalg.norm(np.diff(images, axis=0), axis=-1)
        seg_src = np.diff(p.f_arclen)
        if np.any(seg_img > self.f.expansion_bound() * seg_src * 1.01 + 1e-12):
            raise ChildConstructionFailed("Image segment longer than the expansion bound allows")
        counts = np.ceil(seg_img / self.step).astype(int)
        if np.all(counts <= 1):
            return p.points, p.h_param, payload, images

        chunks, flags = [p.h_param[:1]], [np.array([True])]
        for j, m in enumerate(counts):
            inner = p.h_param[j] + (np.arange(1, max(m, 1)) / max(m, 1)) * (p.h_param[j + 1] - p.h_param[j])
            chunks += [inner, p.h_param[j + 1:j + 2]]
            flags += [np.zeros(len(inner), bool), np.array([True])]
        params = np.concatenate(chunks)
        known = np.concatenate(flags)
        points = np.empty((len(params), 3))
        points[known] = p.points
        if (~known).any():
            points[~known] = self.plaque_points(p, params[~known])
        new_payload = {}
        for k, v in payload.items():
            new_payload[k] = np.empty(len(params))
            new_payload[k][known] = v
            if k in evaluators:
                new_payload[k][~known] = evaluators[k](points[~known])
            else:
                new_payload[k][~known] = np.interp(params[~known], p.h_param, v)
        return points, params, new_payload, self.f.lift_map(points)

    def transfer_split(
        self,
        p: Plaque,
        payload: Optional[Dict[str, np.ndarray]] = None,
        evaluators: Optional[Dict[str, Accumulator]] = None,
    ) -> TransferSplit:
        """
        Push p forward by F = f^N and cut the image at cube faces

        Child weights are the reference mass of each preimage piece. Payload arrays given
        per node travel to the children. A payload key with an evaluator (a function of
        points on p) is evaluated at inserted nodes and at the preimages of cut points;
        other keys are linearly interpolated there.
        """
        payload = payload or {}
        evaluators = evaluators or {}
        points, params, payload, images = self._refine(p, payload, evaluators)

        origin = self.power_matrix @ p.anchor
        s = self.power_mu3 * (params - p.anchor_param)
        order = np.argsort(s)
        s, images, params = s[order], images[order], params[order]
        payload = {k: v[order] for k, v in payload.items()}
        child_offset = self.power_matrix @ p.offset

        s0, s1 = float(s[0]), float(s[-1])
        edges = np.concatenate([[s0], self.partition.crossings(origin, s0, s1), [s1]])

        # every s value needed: image nodes, cut points and piece midpoints
        mids = 0.5 * (edges[:-1] + edges[1:])
        extra = np.concatenate([edges[1:-1], mids])
        near = np.stack([np.interp(extra, s, images[:, j]) for j in range(3)], axis=-1)
        linear_extra = origin[None, :] + extra[:, None] * self.direction[None, :]
        extra_pts = self.leaf_points(linear_extra, near)

        all_s = np.concatenate([s, extra])
        all_pts = np.concatenate([images, extra_pts])
        extra_pre = self.f.inverse(extra_pts) if evaluators else None
        all_payload = {
            k: np.concatenate([v, evaluators[k](extra_pre) if k in evaluators else np.interp(extra, s, v)])
            for k, v in payload.items()
        }

        total = s1 - s0
        children, weights, full, payloads, variations = [], [], [], [], []
        for a, b, m in zip(edges[:-1], edges[1:], mids):
            sel = (all_s >= a - _EDGE_EPS) & (all_s <= b + _EDGE_EPS)
            cs = all_s[sel]
            order_c = np.argsort(cs)
            cs, keep = np.unique(cs[order_c], return_index=True)
            cpts = all_pts[sel][order_c][keep]
            cpay = {k: v[sel][order_c][keep] for k, v in all_payload.items()}
            if len(cs) < 2:
                raise ChildConstructionFailed(f"Child piece [{a:.6f}, {b:.6f}] has fewer than two nodes")

            mid_lin = origin + m * self.direction
            z_mid = reduce_mod1(mid_lin)
            shift = z_mid - mid_lin
            anchor = mid_lin + shift
            anchor_param = float(self._c3(anchor))
            box_idx = self.partition.box_index(z_mid)
            mid_node = cpts[int(np.argmin(np.abs(cs - m)))]

            child = Plaque(
                base=TorusPoint(tuple(float(c) for c in reduce_mod1(mid_node))),  # type: ignore[arg-type]
                points=cpts,
                f_arclen=_arclength(cpts),
                h_param=anchor_param + (cs - m),
                box_id=int(self.partition.box_id(box_idx)[0]),
                anchor=anchor,
                anchor_param=anchor_param,
                offset=np.round(child_offset + shift),
                direction=self.direction,
            )
            children.append(child)
            weights.append((b - a) / total)
            full.append(self.partition.is_full_piece(origin, a, b))
            payloads.append(cpay)

            measured = self._c3(self.u.h_lift(cpts) + child.offset)
            pre = cs / self.power_mu3
            dm, dp = np.diff(measured), np.diff(pre)
            ok = np.abs(dp) > 1e-9
            if ok.any():
                ratio = dm[ok] / (dp[ok] * self.power_mu3)
                variations.append(float(np.max(np.abs(ratio - ratio.mean())) / abs(ratio.mean())))

        weights_arr = np.asarray(weights)
        return TransferSplit(
            parent=p,
            children=children,
            weights=weights_arr,
            full=full,
            density_variation=max(variations, default=0.0),
            payloads=payloads,
        )

    def transfer_step(self, l: WeightedPlaqueMeasure) -> List[Tuple[float, WeightedPlaqueMeasure]]:
        """
        Convex decomposition T(l) = Σ c_i l_i

        Each child carries G∘F^{-1} as log-density; c_i is the l-mass of the preimage piece.
        """
        split = self.transfer_split(l.plaque, {"G": l.log_density})
        c = pushed_weights(split)

        out = []
        for ci, child, pay in zip(c, split.children, split.payloads):
            m = WeightedPlaqueMeasure(child, pay["G"].copy(), 0.0, l.holder_exp, 1.0)
            m.holder_const = m.measured_holder()
            out.append((float(ci), m))
        return out

    # holonomy --------------------------------------------------------------

    def cs_holonomy(self, src: WeightedPlaqueMeasure, dst_base: TorusPoint) -> WeightedPlaqueMeasure:
        """
        Center-stable holonomy to the plaque through dst_base

        In h-coordinates cs-leaves are linear, so points are matched by equal absolute
        e3-parameter on the two linear plaques and pulled back by h.
        """
        sp = src.plaque
        if dst_base == sp.base:
            return WeightedPlaqueMeasure(sp, src.log_density.copy(), src.holder_const, src.holder_exp, 1.0)

        dst = self.grow_plaque(dst_base)
        if dst.box_id != sp.box_id:
            raise NotSameBox(f"Plaques lie in boxes {sp.box_id} and {dst.box_id}")
        lo = max(sp.h_param[0], dst.h_param[0])
        hi = min(sp.h_param[-1], dst.h_param[-1])
        if hi - lo <= _EDGE_EPS:
            raise HolonomyOutOfPlaque("Source and destination plaques do not overlap in h-coordinates")

        inner = sp.h_param[(sp.h_param > lo) & (sp.h_param < hi)]
        params = np.concatenate([[lo], inner, [hi]])
        target = self.sub_plaque(dst, params)
        g = np.interp(target.h_param, sp.h_param, src.log_density)
        moved = WeightedPlaqueMeasure(target, g, 0.0, src.holder_exp, 1.0)
        moved.holder_const = moved.measured_holder()
        return moved


def holonomy_discrepancy(moved: WeightedPlaqueMeasure, native: WeightedPlaqueMeasure, cells: int = 16) -> float:
    """Largest per-cell mass difference over the common h-parameter range"""
    lo = max(moved.plaque.h_param[0], native.plaque.h_param[0])
    hi = min(moved.plaque.h_param[-1], native.plaque.h_param[-1])
    bins = np.linspace(lo, hi, cells + 1)

    def _cell_masses(l: WeightedPlaqueMeasure) -> np.ndarray:
        p = l.plaque.h_param
        cum = np.concatenate([[0.0], np.cumsum(l.segment_masses())])
        at = np.interp(bins, p, cum)
        masses = np.diff(at)
        return masses / masses.sum()

    return float(np.max(np.abs(_cell_masses(moved) - _cell_masses(native))))


# ---------------------------------------------------------------------------
# Transfer tree
# ---------------------------------------------------------------------------

class TransferTree:
    """
    n-step transfer tree of a plaque measure

    Nodes carry the measure, its weight (product of transfer coefficients), the level and
    per-node accumulators; accumulator k at level n holds Σ_{i<n} a_k(F^i x).
    """

    def __init__(
        self,
        builder: PlaqueBuilder,
        root: WeightedPlaqueMeasure,
        accumulators: Optional[Dict[str, Accumulator]] = None,
        max_leaves: int = 20_000,
    ):
        self.builder = builder
        self.graph = nx.DiGraph()
        self.accumulators = accumulators or {}
        self.max_leaves = max_leaves
        self.depth = 0
        zeros = {k: np.zeros(len(root.plaque.points)) for k in self.accumulators}
        self.graph.add_node(0, measure=root, weight=1.0, level=0, acc=zeros)
        self._next_id = 1

    def leaves(self, level: Optional[int] = None) -> List[int]:
        level = self.depth if level is None else level
        return [n for n, d in self.graph.nodes(data=True) if d["level"] == level]

    def expand(self, levels: int = 1) -> None:
        for _ in range(levels):
            frontier = self.leaves()
            for node in frontier:
                data = self.graph.nodes[node]
                l: WeightedPlaqueMeasure = data["measure"]
                pts = reduce_mod1(l.plaque.points)
                acc = {k: data["acc"][k] + fn(pts) for k, fn in self.accumulators.items()}
                evaluators = {
                    k: pulled_back_sum(self.builder.f, fn, data["level"]) for k, fn in self.accumulators.items()
                }
                split = self.builder.transfer_split(l.plaque, {"G": l.log_density, **acc}, evaluators)

                c = pushed_weights(split)

                for ci, child, pay, full in zip(c, split.children, split.payloads, split.full):
                    m = WeightedPlaqueMeasure(child, pay["G"], 0.0, l.holder_exp, 1.0)
                    self.graph.add_node(
                        self._next_id,
                        measure=m,
                        weight=data["weight"] * float(ci),
                        level=self.depth + 1,
                        acc={k: pay[k] for k in self.accumulators},
                        full=full,
                    )
                    self.graph.add_edge(node, self._next_id, c=float(ci))
                    self._next_id += 1

            self.depth += 1
            n_leaves = len(self.leaves())
            if n_leaves > self.max_leaves:
                raise TreeTooLarge(n_leaves, self.max_leaves)
        self._log_statistics()

    def total_weight(self, level: Optional[int] = None) -> float:
        return float(sum(self.graph.nodes[n]["weight"] for n in self.leaves(level)))

    def integrate(self, phi: Accumulator, level: Optional[int] = None) -> float:
        """∫ φ d(T^n l) as Σ weight·l_i(φ)"""
        total = 0.0
        for n in self.leaves(level):
            data = self.graph.nodes[n]
            m: WeightedPlaqueMeasure = data["measure"]
            total += data["weight"] * m.integrate(phi(reduce_mod1(m.plaque.points)))
        return total

    def leaf_table(self, level: Optional[int] = None) -> List[Tuple[float, WeightedPlaqueMeasure, Dict[str, np.ndarray]]]:
        return [
            (self.graph.nodes[n]["weight"], self.graph.nodes[n]["measure"], self.graph.nodes[n]["acc"])
            for n in self.leaves(level)
        ]

    def _log_statistics(self) -> None:
        leaves = self.leaves()
        partial = sum(1 for n in leaves if not self.graph.nodes[n].get("full", True))
        logger.info(
            f"Transfer tree depth {self.depth}: {self.graph.number_of_nodes()} nodes, "
            f"{len(leaves)} leaves ({partial} partial), weight {self.total_weight():.12f}"
        )

    def save(self, filepath: str) -> None:
        Path(filepath).parent.mkdir(parents=True, exist_ok=True)
        joblib.dump({"graph": self.graph, "depth": self.depth}, filepath)
        logger.info(f"✅ Transfer tree saved to {filepath}")

    def load(self, filepath: str) -> None:
        data = joblib.load(filepath)
        self.graph = data["graph"]
        self.depth = data["depth"]
        self._next_id = max(self.graph.nodes) + 1
        logger.info(f"✅ Transfer tree loaded from {filepath}")


def transfer_functionals(
    builder: PlaqueBuilder,
    l0: WeightedPlaqueMeasure,
    l1: WeightedPlaqueMeasure,
    observables: List[Accumulator],
    n: int,
    max_leaves: int = 20_000,
) -> np.ndarray:
    """
    |∫φ d(T^k l0) - ∫φ d(T^k l1)| for k = 0..n, one column per observable
    """
    trees = [TransferTree(builder, l0, max_leaves=max_leaves), TransferTree(builder, l1, max_leaves=max_leaves)]
    out = np.zeros((n + 1, len(observables)))
    for k in range(n + 1):
        if k > 0:
            for t in trees:
                t.expand(1)
        for j, phi in enumerate(observables):
            out[k, j] = abs(trees[0].integrate(phi) - trees[1].integrate(phi))
    return out
