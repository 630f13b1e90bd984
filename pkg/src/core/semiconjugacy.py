"""
Semiconjugacy
Series solution of h∘f = A∘h with h = id + u, inversion of h and probes of its fibers and leaves
"""

import logging
from dataclasses import dataclass, replace
from typing import TYPE_CHECKING, Optional, Tuple

import numpy as np

from src.core.da_family import DAMap, FrameField
from src.core.torus_linalg import (
    TorusPoint,
    eigen_coords,
    from_eigen_coords,
    grid_points,
    periodic_trilinear,
    reduce_mod1,
    torus_distance,
)
from src.utils.errors import DepthInsufficient, LeafIntegrationDiverged, NoConvergence
from src.utils.parallel import chunked_map, rng_for

if TYPE_CHECKING:
    from src.core.plaques import Plaque

logger = logging.getLogger(__name__)


def _series(f: DAMap, points: np.ndarray, depth: int) -> np.ndarray:
    """
    Truncated orbit sums in eigencoordinates

    u_i(x) = -Σ_{k=1..D} μ_i^{k-1} p_i(f^{-k} x) for the contracting i = 1, 2 and
    u_3(x) = Σ_{k=0..D-1} μ_3^{-(k+1)} p_3(f^k x).
    """
    points = np.atleast_2d(points)
    if f.is_linear:
        return np.zeros_like(points, dtype=float)

    spec = f.spectral
    mu = spec.mu
    acc = np.zeros_like(points, dtype=float)

    y = points
    weight = np.ones(2)
    for _ in range(depth):
        y = f.inverse_step(y)
        pc = eigen_coords(spec, f.perturbation(y))
        acc[:, :2] -= weight[None, :] * pc[:, :2]
        weight = weight * mu[:2]

    y = points
    w3 = 1.0 / mu[2]
    for _ in range(depth):
        pc = eigen_coords(spec, f.perturbation(y))
        acc[:, 2] += w3 * pc[:, 2]
        w3 /= mu[2]
        y = f.step(y)

    return from_eigen_coords(spec, acc)


def tail_bound(f: DAMap, depth: int) -> float:
    """Bound on the series truncation error at the given depth"""
    if f.is_linear:
        return 0.0
    k1, k2, k3 = f.spectral.kappa
    p_sup = f.amplitude * np.max(np.abs(f.spectral.dual_frame @ f.e2))
    return float(p_sup * (k2 ** depth / (1.0 - k2) + k3 ** (-depth) / (k3 - 1.0)))


def _suggest_depth(f: DAMap, tolerance: float) -> int:
    depth = 1
    while tail_bound(f, depth) >= tolerance / 10.0 and depth < 10_000:
        depth += 1
    return depth


@dataclass(frozen=True)
class DisplacementField:
    """
    Periodic displacement u with h = id + u

    mode="grid" interpolates node values trilinearly; mode="series" evaluates the
    truncated orbit sums directly.
    """

    f: DAMap
    values: np.ndarray
    grid_n: int
    truncation_depth: int
    residual_sup: float
    interpolation_residual: float
    lipschitz_est: float
    sup_norm: float
    mode: str = "grid"

    def with_mode(self, mode: str) -> "DisplacementField":
        if mode not in ("grid", "series"):
            raise ValueError(f"Unknown displacement mode: {mode}")
        return replace(self, mode=mode)

    def evaluate(self, points) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=float))
        if self.f.is_linear:
            return np.zeros_like(points)
        if self.mode == "series":
            return _series(self.f, reduce_mod1(points), self.truncation_depth)
        return periodic_trilinear(self.values, points)

    def h(self, points) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=float))
        return reduce_mod1(points + self.evaluate(points))

    def h_lift(self, points) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=float))
        return points + self.evaluate(points)

    def residual(self, points) -> np.ndarray:
        """dist(h(f x), A h(x)) per point"""
        points = np.atleast_2d(points)
        hx = self.h(points)
        hfx = self.h(self.f.step(points))
        ahx = reduce_mod1(hx @ self.f.matrix.T)
        return torus_distance(hfx, ahx)


def solve_h(
    f: DAMap,
    grid_n: int = 64,
    depth: int = 60,
    tolerance: float = 1e-6,
    test_n: int = 17,
    threads: Optional[int] = None,
) -> DisplacementField:
    """
    Fill the displacement grid from the orbit-sum series

    Args:
        f: DA map (the base map; the power is irrelevant here)
        grid_n: nodes per axis
        depth: orbit-sum length
        tolerance: bound for the series residual on the off-grid test set
        test_n: off-grid test points per axis

    Returns:
        DisplacementField in grid mode

    Raises:
        DepthInsufficient: series residual above tolerance
    """
    if f.is_linear:
        values = np.zeros((grid_n, grid_n, grid_n, 3))
        return DisplacementField(f, values, grid_n, depth, 0.0, 0.0, 0.0, 0.0)

    nodes = grid_points(grid_n)
    values = chunked_map(lambda p: _series(f, p, depth), nodes, threads)
    values = values.reshape(grid_n, grid_n, grid_n, 3)

    diffs = [np.linalg.norm(np.roll(values, -1, axis=a) - values, axis=-1) for a in range(3)]
    lipschitz = float(max(d.max() for d in diffs) * grid_n)
    sup_norm = float(np.linalg.norm(values, axis=-1).max())

    field_ = DisplacementField(f, values, grid_n, depth, 0.0, 0.0, lipschitz, sup_norm)
    test = grid_points(test_n, centered=True)
    series_res = float(np.max(field_.with_mode("series").residual(test)))
    interp_res = float(np.max(field_.residual(test)))

    if series_res > tolerance:
        raise DepthInsufficient(series_res, _suggest_depth(f, tolerance))

    logger.info(
        f"✓ Semiconjugacy on {grid_n}^3 nodes depth={depth}: series residual {series_res:.2e}, "
        f"grid residual {interp_res:.2e}, ‖u‖={sup_norm:.4f}, Lip={lipschitz:.3f}"
    )
    return replace(field_, residual_sup=series_res, interpolation_residual=interp_res)


def eval_h(u: DisplacementField, x: TorusPoint) -> TorusPoint:
    return TorusPoint(tuple(float(v) for v in u.h(x.array)[0]))  # type: ignore[arg-type]


# ---------------------------------------------------------------------------
# Inversion
# ---------------------------------------------------------------------------

_PLATEAU_STEP = 1e-6
_PLATEAU_SLOPE = 1e-6


def _center_gap(u: DisplacementField, z: np.ndarray, t: np.ndarray) -> np.ndarray:
    """G(t) = t + u_2(z + t e2); h(z + t e2) = z exactly when G(t) = 0"""
    e2 = u.f.e2
    disp = u.evaluate(z + t[:, None] * e2[None, :])
    return t + disp @ e2


def invert_h_batch(
    u: DisplacementField,
    z: np.ndarray,
    tol: float = 1e-9,
    max_iter: int = 100,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Vectorized h^{-1}

    Fixed-point iteration y ← z - u(y) first; points that do not converge are solved by
    bisection of G(t) = t + u_2(z + t e2) along the center line through z. A flat G at the
    root marks a nontrivial fiber.

    Returns:
        (y, ok) with ok False where z is a candidate nontrivial-fiber point
    """
    z = reduce_mod1(np.atleast_2d(z))
    if u.f.is_linear:
        return z.copy(), np.ones(len(z), dtype=bool)

    y = z.copy()
    done = np.zeros(len(z), dtype=bool)
    for _ in range(max_iter):
        active = ~done
        if not active.any():
            break
        y_new = z[active] - u.evaluate(y[active])
        y[active] = y_new
        err = torus_distance(u.h(y[active]), z[active])
        idx = np.flatnonzero(active)
        done[idx[err < tol]] = True

    ok = done.copy()
    todo = np.flatnonzero(~done)
    if len(todo):
        zt = z[todo]
        bound = u.sup_norm + 1e-3
        lo = np.full(len(todo), -bound)
        hi = np.full(len(todo), bound)
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            g = _center_gap(u, zt, mid)
            lo = np.where(g < 0, mid, lo)
            hi = np.where(g >= 0, mid, hi)
            if np.all(hi - lo < tol * 1e-2):
                break
        t = 0.5 * (lo + hi)
        yt = reduce_mod1(zt + t[:, None] * u.f.e2[None, :])
        slope = (
            _center_gap(u, zt, t + _PLATEAU_STEP) - _center_gap(u, zt, t - _PLATEAU_STEP)
        ) / (2 * _PLATEAU_STEP)
        err = torus_distance(u.h(yt), zt)
        y[todo] = yt
        ok[todo] = (err < tol) & (slope > _PLATEAU_SLOPE)

    return reduce_mod1(y), ok


def invert_h(u: DisplacementField, z: TorusPoint, tol: float = 1e-9, max_iter: int = 100) -> TorusPoint:
    """
    Single-point h^{-1}

    Raises:
        NoConvergence: z is a candidate nontrivial-fiber point
    """
    y, ok = invert_h_batch(u, z.array, tol, max_iter)
    if not ok[0]:
        raise NoConvergence(f"h^-1 did not converge at {z.coords}", point=z.coords)
    return TorusPoint(tuple(float(v) for v in y[0]))  # type: ignore[arg-type]


def fiber_probe(
    u: DisplacementField,
    f: DAMap,
    z: TorusPoint,
    arc_len: float = 0.05,
    samples: int = 201,
    tol: float = 1e-9,
) -> float:
    """
    Estimated diameter of the fiber h^{-1}(z)

    The center leaves of the family are the e2 lines, so the segment is sampled along e2
    through the inverse image.
    """
    y, _ = invert_h_batch(u, z.array, tol)
    t = np.linspace(-arc_len / 2, arc_len / 2, samples)
    seg = y[0][None, :] + t[:, None] * f.e2[None, :]
    close = torus_distance(u.h(seg), z.array[None, :]) < tol
    if close.sum() <= 1:
        return 0.0
    hits = t[close]
    return float(hits.max() - hits.min())


# ---------------------------------------------------------------------------
# Leaf probes
# ---------------------------------------------------------------------------

def _integrate_leaf(frames: FrameField, bundle: str, start: np.ndarray, length: np.ndarray,
                    step: float) -> np.ndarray:
    """RK4 along the unit field Ê^bundle in the universal cover; returns endpoints"""
    x = start.copy()
    n_steps = np.ceil(length / step).astype(int)
    h = np.where(n_steps > 0, length / np.maximum(n_steps, 1), 0.0)
    for k in range(int(n_steps.max(initial=0))):
        active = k < n_steps
        if not active.any():
            break
        xa, ha = x[active], h[active][:, None]
        k1 = frames.at(xa, bundle)
        k2 = frames.at(xa + 0.5 * ha * k1, bundle)
        k3 = frames.at(xa + 0.5 * ha * k2, bundle)
        k4 = frames.at(xa + ha * k3, bundle)
        x[active] = xa + ha * (k1 + 2 * k2 + 2 * k3 + k4) / 6.0
    return x


def quasi_isometry_probe(
    f: DAMap,
    frames: FrameField,
    leaf: str = "c",
    n_pairs: int = 64,
    max_length: float = 5.0,
    seed: int = 0,
) -> Tuple[float, float]:
    """
    Fit d_leaf ≤ a·d + b over pairs joined by integrated leaf arcs

    Returns:
        (a, b): a is the largest ratio over pairs at distance ≥ 1 (all pairs if none), b the
        smallest intercept making the bound hold for every pair
    """
    if leaf not in ("s", "c", "u"):
        raise ValueError(f"Unknown leaf family: {leaf}")
    rng = rng_for(seed, 0)
    starts = rng.random((n_pairs, 3))
    lengths = rng.uniform(0.5, max_length, n_pairs)
    ends = _integrate_leaf(frames, leaf, starts, lengths, step=1.0 / (4 * frames.grid_n))

    if not np.all(np.isfinite(ends)):
        raise LeafIntegrationDiverged(f"{leaf}-leaf integration produced non-finite points")
    d = np.linalg.norm(ends - starts, axis=-1)
    if np.any(d < 1e-12 * lengths):
        raise LeafIntegrationDiverged(f"{leaf}-leaf arc returned to its start")

    far = d >= 1.0
    ratios = lengths / d
    a = float(ratios[far].max() if far.any() else ratios.max())
    b = float(max(0.0, np.max(lengths - a * d)))
    logger.info(f"✓ Quasi-isometry ({leaf}-leaf, {n_pairs} pairs): a={a:.6f}, b={b:.6f}")
    return a, b


def leaf_bijectivity_check(u: DisplacementField, plaque: "Plaque") -> float:
    """Minimal increment of the e3-parameter of h along the plaque polyline"""
    pts = np.asarray(plaque.points, dtype=float)
    c3 = eigen_coords(u.f.spectral, u.h_lift(pts))[:, 2]
    return float(np.min(np.diff(c3)))


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------

@dataclass
class SemiconjugacyReport:
    residual_sup: float
    interpolation_residual: float
    fiber_bound_K: float
    qi_a: float
    qi_b: float
    inversion_success_rate: float
    sup_norm: float
    lipschitz_est: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def semiconjugacy_report(
    u: DisplacementField,
    frames: FrameField,
    n_fiber: int = 256,
    n_inversion: int = 10_000,
    n_pairs: int = 64,
    tol: float = 1e-9,
    seed: int = 0,
) -> SemiconjugacyReport:
    """Residuals, fiber sweep, quasi-isometry fit and inversion success rate in one pass"""
    rng = rng_for(seed, 1)
    zs = rng.random((n_inversion, 3))
    _, ok = invert_h_batch(u, zs, tol)

    fibers = [
        fiber_probe(u, u.f, TorusPoint(tuple(float(c) for c in z)), tol=tol)  # type: ignore[arg-type]
        for z in rng.random((n_fiber, 3))
    ]
    a, b = quasi_isometry_probe(u.f, frames, "c", n_pairs, seed=seed)

    report = SemiconjugacyReport(
        residual_sup=u.residual_sup,
        interpolation_residual=u.interpolation_residual,
        fiber_bound_K=float(max(fibers, default=0.0)),
        qi_a=a,
        qi_b=b,
        inversion_success_rate=float(ok.mean()),
        sup_norm=u.sup_norm,
        lipschitz_est=u.lipschitz_est,
    )
    logger.info(
        f"✓ Semiconjugacy report: K={report.fiber_bound_K:.3e}, "
        f"inversion success {report.inversion_success_rate:.4%}"
    )
    return report
