"""
Ergodic Statistics
Sampling the maximal measure through h^{-1}, Lyapunov exponents, correlation decay,
large-deviation tails and the plaque moment bounds
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from sklearn.linear_model import LinearRegression
from sklearn.metrics import r2_score
from tqdm import tqdm

from src.core.da_family import DAMap, FrameField
from src.core.plaques import (
    Plaque,
    PlaqueBuilder,
    TransferTree,
    WeightedPlaqueMeasure,
    reference_measure,
)
from src.core.semiconjugacy import DisplacementField, invert_h_batch
from src.core.torus_linalg import (
    DEFAULT_MODULUS,
    IntegerAutomorphism,
    TorusPoint,
    apply_auto_batch,
    periodic_trilinear,
    reduce_mod1,
    wrap_delta,
)
from src.utils.errors import ExcessiveDropRate, InsufficientSignal
from src.utils.parallel import chunked_map, rng_for

logger = logging.getLogger(__name__)

Observable = Callable[[np.ndarray], np.ndarray]

SAMPLE_CHUNK = 65_536
MAX_DROP_RATE = 0.01
_SAMPLE_STREAM = 10


# ---------------------------------------------------------------------------
# Observables
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ObservableSpec:
    """
    Hölder observable on the torus

    kind is one of "character" (cos 2π k·x), "cusp" (d(x, center)^exponent),
    "nodegrid" (trilinear interpolation of node values) or "constant".
    """

    kind: str
    holder_exp: float = 0.5
    k: Tuple[int, int, int] = (0, 0, 0)
    center: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    exponent: float = 0.5
    values: Optional[np.ndarray] = field(default=None, compare=False)
    constant: float = 0.0
    shift: float = 0.0

    def __post_init__(self):
        if self.kind not in ("character", "cusp", "nodegrid", "constant"):
            raise ValueError(f"Unknown observable kind: {self.kind}")
        if not (0.0 < self.holder_exp < 1.0):
            raise ValueError(f"Hölder exponent must lie in (0,1); got {self.holder_exp}")
        if self.kind == "nodegrid" and self.values is None:
            raise ValueError("nodegrid observable needs node values")

    @classmethod
    def character(cls, k: Sequence[int], gamma: float = 0.5) -> "ObservableSpec":
        return cls("character", gamma, k=tuple(int(v) for v in k))  # type: ignore[arg-type]

    @classmethod
    def cusp(cls, center: Sequence[float], gamma: float = 0.5) -> "ObservableSpec":
        return cls("cusp", gamma, center=tuple(float(v) for v in center), exponent=gamma)  # type: ignore[arg-type]

    @classmethod
    def nodegrid(cls, values: np.ndarray, gamma: float = 0.5) -> "ObservableSpec":
        return cls("nodegrid", gamma, values=np.asarray(values, dtype=float))

    @classmethod
    def const(cls, c: float) -> "ObservableSpec":
        return cls("constant", 0.5, constant=float(c))

    def shifted(self, delta: float) -> "ObservableSpec":
        """φ + delta"""
        return ObservableSpec(
            self.kind, self.holder_exp, self.k, self.center, self.exponent,
            self.values, self.constant, self.shift + delta,
        )

    def __call__(self, points) -> np.ndarray:
        x = np.atleast_2d(np.asarray(points, dtype=float))
        if self.kind == "character":
            out = np.cos(2.0 * np.pi * (x @ np.asarray(self.k, dtype=float)))
        elif self.kind == "cusp":
            d = np.linalg.norm(wrap_delta(x - np.asarray(self.center)), axis=-1)
            out = d ** self.exponent
        elif self.kind == "nodegrid":
            out = periodic_trilinear(self.values[..., None], x)[:, 0]  # type: ignore[index]
        else:
            out = np.full(len(x), self.constant)
        return out + self.shift

    @property
    def sup_norm(self) -> float:
        if self.kind == "character":
            base = 1.0
        elif self.kind == "cusp":
            base = (np.sqrt(3.0) / 2.0) ** self.exponent
        elif self.kind == "nodegrid":
            base = float(np.max(np.abs(self.values)))
        else:
            base = abs(self.constant)
        return base + abs(self.shift)

    @property
    def holder_const(self) -> float:
        g = self.holder_exp
        if self.kind == "character":
            return float(2.0 ** (1.0 - g) * (2.0 * np.pi * np.linalg.norm(self.k)) ** g)
        if self.kind == "cusp":
            # d^e is e-Hölder with constant 1 and the torus has diameter √3/2
            return float((np.sqrt(3.0) / 2.0) ** (self.exponent - g)) if self.exponent >= g else float("inf")
        if self.kind == "nodegrid":
            vals = self.values
            n = vals.shape[0]  # type: ignore[union-attr]
            steps = [np.max(np.abs(np.roll(vals, -1, axis=a) - vals)) for a in range(3)]
            lip = n * float(np.sqrt(np.sum(np.square(steps))))
            big = 2.0 * float(np.max(np.abs(vals)))
            return float(lip ** g * big ** (1.0 - g)) if big > 0 else 0.0
        return 0.0

    @property
    def holder_norm(self) -> float:
        return self.sup_norm + self.holder_const

    def empirical_holder_quotient(self, n_pairs: int = 1000, seed: int = 0) -> float:
        rng = rng_for(seed, 3)
        a = rng.random((n_pairs, 3))
        b = reduce_mod1(a + rng.normal(scale=0.05, size=(n_pairs, 3)))
        d = np.linalg.norm(wrap_delta(a - b), axis=-1)
        ok = d > 0
        return float(np.max(np.abs(self(a) - self(b))[ok] / d[ok] ** self.holder_exp))

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "holder_exp": self.holder_exp,
            "k": list(self.k),
            "center": list(self.center),
            "exponent": self.exponent,
            "constant": self.constant,
            "shift": self.shift,
            "holder_norm": self.holder_norm,
        }


def block_observable(f: DAMap, phi: Observable, N: int) -> Observable:
    """φ_N = Σ_{i<N} φ∘f^i for the f^N reduction"""

    def _block(points):
        x = np.atleast_2d(points)
        total = np.zeros(len(x))
        for _ in range(N):
            total += phi(x)
            x = f.step(x)
        return total

    return _block


# ---------------------------------------------------------------------------
# Series and fits
# ---------------------------------------------------------------------------

@dataclass
class EstimateSeries:
    n_values: np.ndarray
    estimates: np.ndarray
    stderrs: np.ndarray
    sample_count: int
    seed: int
    name: str = ""

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"n": self.n_values, "estimate": self.estimates, "stderr": self.stderrs})


@dataclass
class RateFit:
    log_intercept: float
    rate: float
    r_squared: float
    fit_range: Tuple[int, int]
    points_used: int

    @property
    def tau(self) -> float:
        return float(np.exp(self.rate))

    def to_dict(self) -> dict:
        return {
            "log_intercept": self.log_intercept,
            "rate": self.rate,
            "tau": self.tau,
            "r_squared": self.r_squared,
            "fit_range": list(self.fit_range),
            "points_used": self.points_used,
        }


def fit_exponential(series: EstimateSeries, min_points: int = 5) -> RateFit:
    """
    Least-squares line through (n, log|estimate|) over entries above 3·stderr

    Raises:
        InsufficientSignal: fewer than min_points usable entries
    """
    est = np.asarray(series.estimates, dtype=float)
    err = np.asarray(series.stderrs, dtype=float)
    n = np.asarray(series.n_values, dtype=float)
    usable = (np.abs(est) > 3.0 * err) & (est != 0) & np.isfinite(est)
    if usable.sum() < min_points:
        raise InsufficientSignal(
            f"Only {int(usable.sum())} entries above the noise floor (need {min_points})"
        )

    X = n[usable].reshape(-1, 1)
    y = np.log(np.abs(est[usable]))
    model = LinearRegression().fit(X, y)
    r2 = float(np.clip(r2_score(y, model.predict(X)), 0.0, 1.0)) if len(y) > 1 else 1.0

    fit = RateFit(
        log_intercept=float(model.intercept_),
        rate=float(model.coef_[0]),
        r_squared=r2,
        fit_range=(int(n[usable].min()), int(n[usable].max())),
        points_used=int(usable.sum()),
    )
    logger.info(f"✓ Fit {series.name or 'series'}: rate={fit.rate:.4f} (τ={fit.tau:.4f}), r²={fit.r_squared:.4f}")
    return fit


def predicted_tau(lambda5: float, gamma: float, rho: float) -> float:
    """Combined decay rate max(e^{-λ5 γ/2}, ρ) from transfer contraction and coupling tail"""
    return float(max(np.exp(-lambda5 * gamma / 2.0), rho))


# ---------------------------------------------------------------------------
# Sampling the maximal measure
# ---------------------------------------------------------------------------

@dataclass
class SampleSet:
    """Lattice points x_m (Lebesgue) and y_m = h^{-1}(x_m) (distributed as ν_f)"""

    automorphism: IntegerAutomorphism
    numerators: np.ndarray
    x: np.ndarray
    y: np.ndarray
    drop_rate: float
    seed: int
    modulus: int = DEFAULT_MODULUS

    def __len__(self) -> int:
        return len(self.x)


def _invert_chunk(u: DisplacementField, z: np.ndarray, tol: float) -> np.ndarray:
    y, ok = invert_h_batch(u, z, tol)
    return np.concatenate([y, ok[:, None].astype(float)], axis=-1)


def _invert(u: DisplacementField, z: np.ndarray, tol: float, threads: Optional[int]):
    if len(z) == 0:
        return np.zeros((0, 3)), np.zeros(0, dtype=bool)
    packed = chunked_map(lambda p: _invert_chunk(u, p, tol), z, threads)
    return packed[:, :3], packed[:, 3] > 0.5


def sample_nu_f(
    u: DisplacementField,
    A: IntegerAutomorphism,
    count: int,
    seed: int,
    modulus: int = DEFAULT_MODULUS,
    tol: float = 1e-9,
    threads: Optional[int] = None,
) -> SampleSet:
    """
    Lebesgue-random lattice points and their h-preimages

    Points whose inversion fails are dropped and their fraction recorded.

    Raises:
        ExcessiveDropRate: more than 1% of the points dropped
    """
    chunks = []
    for c, start in enumerate(range(0, count, SAMPLE_CHUNK)):
        size = min(SAMPLE_CHUNK, count - start)
        chunks.append(rng_for(seed, _SAMPLE_STREAM, c).integers(0, modulus, size=(size, 3), dtype=np.int64))
    nums = np.concatenate(chunks) if chunks else np.zeros((0, 3), dtype=np.int64)
    x = nums / modulus
    y, ok = _invert(u, x, tol, threads)

    drop = float(1.0 - ok.mean()) if len(ok) else 0.0
    if drop > MAX_DROP_RATE:
        raise ExcessiveDropRate(drop, MAX_DROP_RATE)
    if drop > 0:
        logger.warning(f"Dropped {drop:.2e} of the samples (candidate nontrivial fibers)")
    logger.info(f"✓ Sampled {int(ok.sum())} points of ν_f (seed={seed})")
    return SampleSet(A, nums[ok], x[ok], y[ok], drop, seed, modulus)


def _orbit_preimages(
    u: DisplacementField,
    samples: SampleSet,
    n_max: int,
    tol: float,
    threads: Optional[int],
    quiet: bool = True,
):
    """Yield (n, y_n, ok_n) with y_n = h^{-1}(A^n x) along exact lattice orbits"""
    nums = samples.numerators
    for n in tqdm(range(n_max + 1), desc="lattice orbits", disable=quiet):
        if n == 0:
            yield 0, samples.y, np.ones(len(samples), dtype=bool)
            continue
        nums = apply_auto_batch(samples.automorphism, nums, 1, samples.modulus)
        y, ok = _invert(u, nums / samples.modulus, tol, threads)
        yield n, y, ok


# ---------------------------------------------------------------------------
# Exponents
# ---------------------------------------------------------------------------

@dataclass
class ExponentEstimate:
    bundle: str
    value: float
    stderr: float
    count: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _log_rates(f: DAMap, frames: FrameField, points: np.ndarray, bundle: str) -> np.ndarray:
    v = frames.at(points, bundle)
    w = np.einsum("mij,mj->mi", f.jacobian(points), v)
    return np.log(np.linalg.norm(w, axis=-1))


def _exponent(f, frames, u, samples, n_orbit, bundle, tol, threads) -> ExponentEstimate:
    A_N = samples.automorphism.power(f.power)
    stepped = SampleSet(A_N, samples.numerators, samples.x, samples.y, samples.drop_rate,
                        samples.seed, samples.modulus)
    total = np.zeros(len(samples))
    alive = np.ones(len(samples), dtype=bool)
    for n, y, ok in _orbit_preimages(u, stepped, n_orbit - 1, tol, threads):
        alive &= ok
        total += np.where(ok, _log_rates(f, frames, y, bundle), 0.0)
    per_step = total[alive] / (n_orbit * f.power)
    est = ExponentEstimate(
        bundle=bundle,
        value=float(per_step.mean()),
        stderr=float(per_step.std(ddof=1) / np.sqrt(len(per_step))) if len(per_step) > 1 else 0.0,
        count=int(alive.sum()),
    )
    logger.info(f"✓ λ^{bundle} = {est.value:.6f} ± {est.stderr:.1e}")
    return est


def center_exponent(
    f: DAMap,
    frames: FrameField,
    u: DisplacementField,
    samples: SampleSet,
    n_orbit: int = 20,
    tol: float = 1e-9,
    threads: Optional[int] = None,
) -> ExponentEstimate:
    """
    Mean of (1/n) Σ log ‖dF Ê^c‖ along orbits of ν_f-samples, per application of f

    Orbit points are h^{-1}(A^{Nk} x_m) so f is never iterated in floating point.
    """
    return _exponent(f, frames, u, samples, n_orbit, "c", tol, threads)


def lyapunov_spectrum(
    f: DAMap,
    frames: FrameField,
    u: DisplacementField,
    samples: SampleSet,
    n_orbit: int = 20,
    tol: float = 1e-9,
    threads: Optional[int] = None,
) -> Dict[str, ExponentEstimate]:
    """Stable, center and unstable exponents of ν_f; logs a warning if λ^s < λ^c < 0 < λ^u fails"""
    spectrum = {b: _exponent(f, frames, u, samples, n_orbit, b, tol, threads) for b in ("s", "c", "u")}
    ordered = spectrum["s"].value < spectrum["c"].value < 0 < spectrum["u"].value
    if not ordered:
        logger.warning(f"Exponent ordering fails: {[round(e.value, 5) for e in spectrum.values()]}")
    return spectrum


def _center_log_norm(f: DAMap, frames: FrameField, points: np.ndarray, n: int) -> np.ndarray:
    """log ‖df^n(x) Ê^c(x)‖ by pushing Ê^c along the f-orbit"""
    x = reduce_mod1(np.atleast_2d(points))
    v = frames.at(x, "c")
    total = np.zeros(len(x))
    for _ in range(n):
        v = np.einsum("mij,mj->mi", f.step_jacobian(x), v)
        norm = np.linalg.norm(v, axis=-1)
        total += np.log(norm)
        v = v / norm[:, None]
        x = f.step(x)
    return total


def mostly_contracting_check(
    f: DAMap,
    frames: FrameField,
    plaques: List[Plaque],
    n: int,
) -> Tuple[float, float]:
    """
    Worst reference-measure integral of log ‖dF^n|E^c‖ over the plaques

    Returns:
        (worst_integral, alpha0) with alpha0 = -worst_integral
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    integrals = [
        reference_measure(p).integrate(_center_log_norm(f, frames, p.points, n)) for p in plaques
    ]
    worst = float(max(integrals))
    logger.info(f"✓ Mostly contracting check n={n}: worst integral {worst:.6f} over {len(plaques)} plaques")
    return worst, -worst


# ---------------------------------------------------------------------------
# Birkhoff sums
# ---------------------------------------------------------------------------

def birkhoff_sums(f: DAMap, phi: Observable, points: np.ndarray, n: int) -> np.ndarray:
    """S_n φ = Σ_{k<n} φ∘f^k at each point (floating-point f-orbit)"""
    x = reduce_mod1(np.atleast_2d(points))
    total = np.zeros(len(x))
    for _ in range(n):
        total += phi(x)
        x = f.step(x)
    return total


def birkhoff_sum(f: DAMap, phi: Observable, y: TorusPoint, n: int) -> float:
    return float(birkhoff_sums(f, phi, y.array, n)[0])


def correlation_series(
    f: DAMap,
    u: DisplacementField,
    phi: Observable,
    psi: Observable,
    n_max: int,
    count: int,
    seed: int,
    samples: Optional[SampleSet] = None,
    tol: float = 1e-9,
    threads: Optional[int] = None,
    quiet: bool = True,
) -> EstimateSeries:
    """
    Ĉ_n = mean((φ_n - mean φ_n)(ψ_0 - mean ψ_0)) with φ_n = φ∘h^{-1}∘A^n on exact lattice orbits

    Raises:
        ExcessiveDropRate: an orbit step loses more than 1% of the samples
    """
    if samples is None:
        samples = sample_nu_f(u, f.spectral.automorphism, count, seed, tol=tol, threads=threads)
    psi0 = psi(samples.y)
    n_values, estimates, stderrs = [], [], []
    for n, y, ok in _orbit_preimages(u, samples, n_max, tol, threads, quiet):
        drop = 1.0 - ok.mean()
        if drop > MAX_DROP_RATE:
            raise ExcessiveDropRate(drop, MAX_DROP_RATE)
        a = phi(y[ok])
        b = psi0[ok]
        z = (a - a.mean()) * (b - b.mean())
        n_values.append(n)
        estimates.append(float(z.mean()))
        stderrs.append(float(z.std(ddof=1) / np.sqrt(len(z))) if len(z) > 1 else 0.0)

    return EstimateSeries(
        np.asarray(n_values), np.asarray(estimates), np.asarray(stderrs), len(samples), seed, "correlation"
    )


def character_orbit_check(A: IntegerAutomorphism, k: Sequence[int], n_max: int) -> bool:
    """True when (A^T)^n k ≠ ±k for 1 ≤ n ≤ n_max, so characters decorrelate exactly under A"""
    kt = np.array(k, dtype=object)
    at = np.array(A.entries, dtype=object).T
    v = kt.copy()
    for _ in range(n_max):
        v = at.dot(v)
        if all(v == kt) or all(v == -kt):
            return False
    return True


def deviation_tail(
    f: DAMap,
    u: DisplacementField,
    phi: Observable,
    eps: float,
    n_list: Sequence[int],
    count: int,
    seed: int,
    samples: Optional[SampleSet] = None,
    tol: float = 1e-9,
    threads: Optional[int] = None,
    quiet: bool = True,
) -> EstimateSeries:
    """
    Fraction of ν_f-samples with |S_n(φ - ν_f(φ))| > ε n

    S_n is accumulated along exact lattice orbits composed with h^{-1}.
    """
    if samples is None:
        samples = sample_nu_f(u, f.spectral.automorphism, count, seed, tol=tol, threads=threads)
    mean = float(np.mean(phi(samples.y)))
    targets = sorted(set(int(n) for n in n_list))
    n_max = max(targets) if targets else 0

    sums = np.zeros(len(samples))
    alive = np.ones(len(samples), dtype=bool)
    records = {}
    if 0 in targets:
        records[0] = (0.0, 0.0)
    for n, y, ok in _orbit_preimages(u, samples, max(n_max - 1, 0), tol, threads, quiet):
        if n_max == 0:
            break
        alive &= ok
        sums += np.where(ok, phi(y) - mean, 0.0)
        steps = n + 1
        if steps in targets:
            hit = (np.abs(sums[alive]) > eps * steps).astype(float)
            p = float(hit.mean()) if len(hit) else 0.0
            records[steps] = (p, float(np.sqrt(p * (1 - p) / max(len(hit), 1))))

    return EstimateSeries(
        np.asarray(targets),
        np.asarray([records[n][0] for n in targets]),
        np.asarray([records[n][1] for n in targets]),
        len(samples),
        seed,
        "deviation",
    )


# ---------------------------------------------------------------------------
# Plaque-level bounds
# ---------------------------------------------------------------------------

def plaque_birkhoff_mean(f: DAMap, plaque: Plaque, phi: Observable, n: int) -> float:
    """Reference-measure mean of S_n φ over the plaque"""
    return reference_measure(plaque).integrate(birkhoff_sums(f, phi, plaque.points, n))


def plaque_deviation_tail(f: DAMap, l: WeightedPlaqueMeasure, phi: Observable, eps: float, n: int) -> float:
    """l(|S_n φ| > ε n), with segments counted by the fraction of their endpoints above threshold"""
    above = (np.abs(birkhoff_sums(f, phi, l.plaque.points, n)) > eps * n).astype(float)
    return l.integrate(above)


def preimage_piece(builder: PlaqueBuilder, plaque: Plaque, n: int, nodes: int = 33) -> Plaque:
    """
    The piece of the plaque mapped by f^n onto a whole linear plaque, taken around the
    middle node
    """
    mid = len(plaque.h_param) // 2
    t_mid = plaque.h_param[mid]
    mat = builder.f.spectral.automorphism.power(n).matrix.astype(float)
    scale = float(builder.f.spectral.mu[2] ** n)
    image = mat @ plaque.linear_points([t_mid])[0]
    _, lo, hi = builder.partition.segment(reduce_mod1(image))
    a, b = sorted((lo / scale, hi / scale))
    a = max(t_mid + a, plaque.h_param[0])
    b = min(t_mid + b, plaque.h_param[-1])
    return builder.sub_plaque(plaque, np.linspace(a, b, nodes))


def oscillation_check(builder: PlaqueBuilder, plaque: Plaque, phi: Observable, n: int) -> float:
    """max - min of S_n φ over one n-step preimage piece of the plaque"""
    piece = preimage_piece(builder, plaque, n)
    sums = birkhoff_sums(builder.f, phi, piece.points, n)
    return float(sums.max() - sums.min())


def moment_bound_check(
    builder: PlaqueBuilder,
    plaque: Plaque,
    phi: Observable,
    s_mom: float,
    n: int,
    max_leaves: int = 20_000,
) -> Tuple[float, float]:
    """
    Σ_j c_j exp(s·max S_n φ) over the n-step transfer tree

    Returns:
        (lhs at n, (lhs at n=1)^n)
    """
    tree = TransferTree(builder, reference_measure(plaque), {"S": phi}, max_leaves=max_leaves)
    tree.expand(n)

    def _lhs(level: int) -> float:
        return float(sum(w * np.exp(s_mom * np.max(acc["S"])) for w, _, acc in tree.leaf_table(level)))

    lhs = _lhs(n)
    theta = _lhs(1)
    logger.info(f"✓ Moment bound n={n}, s={s_mom}: lhs={lhs:.6f}, θ1^n={theta ** n:.6f}")
    return lhs, theta ** n


def center_derivative_moment(
    builder: PlaqueBuilder,
    plaque: Plaque,
    n: int,
    max_leaves: int = 20_000,
) -> Tuple[float, float]:
    """
    Σ_j c_j max ‖dF^n|E^c‖ over the preimage pieces of the n-step tree

    Returns:
        (lhs at n, (lhs at n=1)^n)
    """
    f, frames = builder.f, builder.frames

    def _log_center(points: np.ndarray) -> np.ndarray:
        return _log_rates(f, frames, points, "c")

    tree = TransferTree(builder, reference_measure(plaque), {"L": _log_center}, max_leaves=max_leaves)
    tree.expand(n)

    def _lhs(level: int) -> float:
        return float(sum(w * np.exp(np.max(acc["L"])) for w, _, acc in tree.leaf_table(level)))

    return _lhs(n), _lhs(1) ** n
