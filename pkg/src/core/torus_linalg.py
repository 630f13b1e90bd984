"""
Toral Automorphisms
Integer 3x3 automorphisms, spectral splitting, exact lattice orbits and eigenframe coordinates
"""

import logging
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from src.utils.errors import (
    ModulusOverflow,
    NonFiniteInput,
    NotInvertibleOverZ,
    SpectrumNotRealSplit,
    WrongStableDimension,
)

logger = logging.getLogger(__name__)

# 2^31 - 1 is prime, so every nonzero residue is invertible
DEFAULT_MODULUS = 2_147_483_647

# Companion matrix of x^3 - 3x^2 + 1
COMPANION_MATRIX = ((0, 0, -1), (1, 0, 0), (0, 1, 3))

IntMatrix = Tuple[Tuple[int, int, int], Tuple[int, int, int], Tuple[int, int, int]]


def _det3(m: Sequence[Sequence[int]]) -> int:
    return (
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    )


def _matmul(a: Sequence[Sequence[int]], b: Sequence[Sequence[int]], modulus: int = 0) -> IntMatrix:
    rows = []
    for i in range(3):
        row = []
        for j in range(3):
            v = sum(a[i][k] * b[k][j] for k in range(3))
            row.append(v % modulus if modulus else v)
        rows.append(tuple(row))
    return tuple(rows)  # type: ignore[return-value]


def _identity() -> IntMatrix:
    return ((1, 0, 0), (0, 1, 0), (0, 0, 1))


def _matpow(m: Sequence[Sequence[int]], n: int, modulus: int = 0) -> IntMatrix:
    """Exponentiation by squaring on Python integers (optionally reduced mod modulus)"""
    result = _identity()
    base = tuple(tuple((v % modulus) if modulus else v for v in row) for row in m)
    while n > 0:
        if n & 1:
            result = _matmul(result, base, modulus)
        base = _matmul(base, base, modulus)
        n >>= 1
    return result


@dataclass(frozen=True)
class IntegerAutomorphism:
    """An element of GL(3, Z), stored as Python integers"""

    entries: IntMatrix
    det: int

    @classmethod
    def from_matrix(cls, m) -> "IntegerAutomorphism":
        arr = np.asarray(m)
        if arr.shape != (3, 3):
            raise ValueError(f"Automorphism must be 3x3; got shape {arr.shape}")
        if not np.all(np.isfinite(arr.astype(float))) or not np.all(np.equal(arr, np.round(arr))):
            raise ValueError("Automorphism must have integer entries")

        entries = tuple(tuple(int(v) for v in row) for row in arr)
        det = _det3(entries)
        if det not in (1, -1):
            raise NotInvertibleOverZ(det)
        return cls(entries, det)  # type: ignore[arg-type]

    @property
    def matrix(self) -> np.ndarray:
        return np.array(self.entries, dtype=np.int64)

    def inverse(self) -> "IntegerAutomorphism":
        m = self.entries
        cof = [[0] * 3 for _ in range(3)]
        for i in range(3):
            for j in range(3):
                rows = [r for r in range(3) if r != i]
                cols = [c for c in range(3) if c != j]
                minor = m[rows[0]][cols[0]] * m[rows[1]][cols[1]] - m[rows[0]][cols[1]] * m[rows[1]][cols[0]]
                cof[i][j] = (-1) ** (i + j) * minor
        # inverse = adj / det and det = +-1
        inv = tuple(tuple(cof[j][i] * self.det for j in range(3)) for i in range(3))
        return IntegerAutomorphism(inv, self.det)  # type: ignore[arg-type]

    def power(self, n: int) -> "IntegerAutomorphism":
        """Exact integer power; negative n uses the integer inverse"""
        if n < 0:
            return self.inverse().power(-n)
        return IntegerAutomorphism(_matpow(self.entries, n), self.det ** n)

    def power_mod(self, n: int, modulus: int) -> IntMatrix:
        base = self.entries if n >= 0 else self.inverse().entries
        return _matpow(base, abs(n), modulus)


@dataclass(frozen=True)
class SpectralData:
    """
    Ordered spectral splitting of a hyperbolic automorphism

    mu holds the signed eigenvalues ordered by modulus; frame has the unit
    eigenvectors e1, e2, e3 (stable, center, unstable) as columns and
    dual_frame is its inverse.
    """

    automorphism: IntegerAutomorphism
    mu: np.ndarray
    kappa: np.ndarray
    frame: np.ndarray
    dual_frame: np.ndarray
    inverted: bool = False

    @property
    def log_kappa(self) -> np.ndarray:
        return np.log(self.kappa)

    @property
    def topological_entropy(self) -> float:
        return float(np.log(self.kappa[2]))

    @property
    def matrix(self) -> np.ndarray:
        return self.automorphism.matrix.astype(float)

    def to_dict(self) -> dict:
        return {
            "matrix": [list(r) for r in self.automorphism.entries],
            "det": self.automorphism.det,
            "mu": [float(v) for v in self.mu],
            "kappa": [float(v) for v in self.kappa],
            "log_kappa": [float(v) for v in self.log_kappa],
            "frame": self.frame.T.tolist(),
            "topological_entropy": self.topological_entropy,
            "inverted": self.inverted,
        }


@dataclass(frozen=True)
class TorusPoint:
    coords: Tuple[float, float, float]

    def __post_init__(self):
        if len(self.coords) != 3:
            raise ValueError("TorusPoint needs three coordinates")
        for c in self.coords:
            if not (0.0 <= c < 1.0):
                raise ValueError(f"TorusPoint coordinate {c} outside [0,1)")

    @property
    def array(self) -> np.ndarray:
        return np.array(self.coords, dtype=float)


@dataclass(frozen=True)
class LatticePoint:
    """A point of the rational lattice (1/Q) Z^3 / Z^3"""

    numerators: Tuple[int, int, int]
    modulus: int = DEFAULT_MODULUS

    def __post_init__(self):
        if self.modulus <= 0:
            raise ValueError("Lattice modulus must be positive")
        for v in self.numerators:
            if not (0 <= v < self.modulus):
                raise ValueError(f"Numerator {v} outside [0, {self.modulus})")

    def to_torus(self) -> TorusPoint:
        return TorusPoint(tuple(v / self.modulus for v in self.numerators))  # type: ignore[arg-type]


# ---------------------------------------------------------------------------
# Spectral analysis
# ---------------------------------------------------------------------------

def _char_poly(m: IntMatrix) -> Tuple[int, int, int]:
    """Coefficients (a, b, c) of det(xI - M) = x^3 + a x^2 + b x + c"""
    tr = m[0][0] + m[1][1] + m[2][2]
    minors = (
        m[0][0] * m[1][1] - m[0][1] * m[1][0]
        + m[0][0] * m[2][2] - m[0][2] * m[2][0]
        + m[1][1] * m[2][2] - m[1][2] * m[2][1]
    )
    return -tr, minors, -_det3(m)


def _isolate_roots(a: int, b: int, c: int) -> List[float]:
    """Three real roots of a monic cubic with positive discriminant"""

    def p(x):
        return ((x + a) * x + b) * x + c

    def dp(x):
        return (3.0 * x + 2.0 * a) * x + b

    disc_crit = 4.0 * a * a - 12.0 * b
    r1 = (-2.0 * a - np.sqrt(disc_crit)) / 6.0
    r2 = (-2.0 * a + np.sqrt(disc_crit)) / 6.0
    bound = 1.0 + max(abs(a), abs(b), abs(c))

    roots = []
    for lo, hi in ((-bound, r1), (r1, r2), (r2, bound)):
        plo = p(lo)
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            pm = p(mid)
            if pm == 0.0:
                lo = hi = mid
                break
            if (pm < 0) == (plo < 0):
                lo, plo = mid, pm
            else:
                hi = mid
        x = 0.5 * (lo + hi)
        # Newton polish
        for _ in range(4):
            d = dp(x)
            if d == 0.0:
                break
            x = x - p(x) / d
        roots.append(float(x))
    return roots


def _eigenvector(m: np.ndarray, mu: float) -> np.ndarray:
    k = m - mu * np.eye(3)
    best = None
    best_norm = 0.0
    for i, j in ((0, 1), (0, 2), (1, 2)):
        v = np.cross(k[i], k[j])
        n = np.linalg.norm(v)
        if n > best_norm:
            best, best_norm = v, n
    if best is None or best_norm == 0.0:
        raise SpectrumNotRealSplit(f"Degenerate eigenspace for eigenvalue {mu}")
    v = best / best_norm
    if v[np.argmax(np.abs(v))] < 0:
        v = -v
    return v


def analyze_matrix(m, orient: bool = False) -> SpectralData:
    """
    Spectral splitting of a hyperbolic integer automorphism

    Args:
        m: 3x3 integer matrix with det +-1
        orient: if True, a matrix with one contracting eigenvalue is replaced by
            its inverse (so the center is always contracting)

    Returns:
        SpectralData with 0 < kappa1 < kappa2 < 1 < kappa3
    """
    auto = m if isinstance(m, IntegerAutomorphism) else IntegerAutomorphism.from_matrix(m)
    a, b, c = _char_poly(auto.entries)

    # Exact integer tests first: eigenvalues +-1 and the discriminant sign
    if 1 + a + b + c == 0 or -1 + a - b + c == 0:
        raise SpectrumNotRealSplit("Spectrum has an eigenvalue of modulus one")
    disc = 18 * a * b * c - 4 * a ** 3 * c + a * a * b * b - 4 * b ** 3 - 27 * c * c
    if disc < 0:
        raise SpectrumNotRealSplit("Spectrum has a complex-conjugate pair")
    if disc == 0:
        raise SpectrumNotRealSplit("Spectrum has a repeated eigenvalue")

    roots = sorted(_isolate_roots(a, b, c), key=abs)
    mu = np.array(roots)
    kappa = np.abs(mu)

    if np.any(np.abs(kappa - 1.0) < 1e-12):
        raise SpectrumNotRealSplit("Spectrum has an eigenvalue of modulus one")

    n_contracting = int(np.sum(kappa < 1.0))
    if n_contracting != 2:
        if orient and n_contracting == 1:
            logger.info("Stable dimension is 1; analyzing the inverse automorphism")
            inverse = analyze_matrix(auto.inverse(), orient=False)
            return SpectralData(
                inverse.automorphism, inverse.mu, inverse.kappa,
                inverse.frame, inverse.dual_frame, inverted=True,
            )
        raise WrongStableDimension(n_contracting)

    if not (kappa[0] < kappa[1] < 1.0 < kappa[2]):
        raise SpectrumNotRealSplit(f"Moduli are not strictly ordered: {kappa}")

    mat = auto.matrix.astype(float)
    frame = np.column_stack([_eigenvector(mat, float(v)) for v in mu])
    dual = np.linalg.inv(frame)

    for i in range(3):
        resid = np.linalg.norm(mat @ frame[:, i] - mu[i] * frame[:, i])
        if resid >= 1e-10:
            raise SpectrumNotRealSplit(f"Eigenvector {i} residual {resid:.2e} too large")

    for arr in (mu, kappa, frame, dual):
        arr.setflags(write=False)

    logger.info(f"✓ Spectrum kappa={np.round(kappa, 4).tolist()} (det={auto.det})")
    return SpectralData(auto, mu, kappa, frame, dual)


# ---------------------------------------------------------------------------
# Points, lattices and coordinates
# ---------------------------------------------------------------------------

def reduce_mod1(p) -> np.ndarray:
    """Componentwise fractional part in [0,1) for arrays of any shape"""
    arr = np.asarray(p, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteInput("Cannot reduce non-finite coordinates")
    r = arr - np.floor(arr)
    # x - floor(x) rounds to 1.0 for tiny negative x
    return np.where(r >= 1.0, 0.0, r)


def torus_reduce(p: Sequence[float]) -> TorusPoint:
    r = reduce_mod1(p)
    if r.shape != (3,):
        raise ValueError(f"torus_reduce expects a triple; got shape {r.shape}")
    return TorusPoint(tuple(float(v) for v in r))  # type: ignore[arg-type]


def wrap_delta(d) -> np.ndarray:
    """Shortest representative of a displacement on the torus"""
    d = np.asarray(d, dtype=float)
    return d - np.round(d)


def torus_distance(a, b) -> np.ndarray:
    return np.linalg.norm(wrap_delta(np.asarray(a) - np.asarray(b)), axis=-1)


def apply_auto(auto: IntegerAutomorphism, x: LatticePoint, n: int) -> LatticePoint:
    """Exact image A^n x on the lattice of x (Python integers, no overflow)"""
    q = x.modulus
    p = auto.power_mod(n, q)
    nums = tuple(sum(p[i][j] * x.numerators[j] for j in range(3)) % q for i in range(3))
    return LatticePoint(nums, q)  # type: ignore[arg-type]


def _mulmod_batch(p: IntMatrix, nums: np.ndarray, modulus: int) -> np.ndarray:
    """(P @ x) mod Q for an (m,3) int64 batch, splitting x into 16-bit halves"""
    if modulus >= 2 ** 31:
        raise ModulusOverflow(f"Batched lattice arithmetic needs Q < 2^31; got {modulus}")
    pm = np.array(p, dtype=np.int64) % modulus
    hi = nums >> 16
    lo = nums & 0xFFFF
    # entries < 2^31, hi < 2^15: each product < 2^46, sums of three stay far below 2^63
    part_hi = (hi @ pm.T) % modulus
    part_lo = (lo @ pm.T) % modulus
    return ((part_hi << 16) % modulus + part_lo) % modulus


def apply_auto_batch(auto: IntegerAutomorphism, nums: np.ndarray, n: int,
                     modulus: int = DEFAULT_MODULUS) -> np.ndarray:
    """Vectorized apply_auto on an (m,3) array of numerators"""
    nums = np.asarray(nums, dtype=np.int64)
    if nums.size and (nums.min() < 0 or nums.max() >= modulus):
        raise ValueError("Lattice numerators outside [0, Q)")
    return _mulmod_batch(auto.power_mod(n, modulus), nums, modulus)


def eigen_coords(spec: SpectralData, x) -> np.ndarray:
    """Coordinates c with x = c1 e1 + c2 e2 + c3 e3 (batched over leading axes)"""
    return np.asarray(x, dtype=float) @ spec.dual_frame.T


def from_eigen_coords(spec: SpectralData, c) -> np.ndarray:
    return np.asarray(c, dtype=float) @ spec.frame.T


# ---------------------------------------------------------------------------
# Periodic grids
# ---------------------------------------------------------------------------

def grid_points(n: int, centered: bool = False) -> np.ndarray:
    """Points of the uniform n^3 grid as an (n^3, 3) array, index order [ix, iy, iz]"""
    offset = 0.5 if centered else 0.0
    axis = (np.arange(n) + offset) / n
    gx, gy, gz = np.meshgrid(axis, axis, axis, indexing="ij")
    return np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)


def periodic_trilinear(values: np.ndarray, points) -> np.ndarray:
    """
    Trilinear interpolation of a periodic node field

    Args:
        values: array of shape (n, n, n, k) sampled at nodes i/n
        points: (m, 3) array of torus coordinates

    Returns:
        (m, k) interpolated values
    """
    n = values.shape[0]
    g = reduce_mod1(points) * n
    base = np.floor(g)
    frac = g - base
    i0 = base.astype(np.int64) % n
    i1 = (i0 + 1) % n

    out = np.zeros((g.shape[0], values.shape[-1]))
    for cx in (0, 1):
        wx = frac[:, 0] if cx else 1.0 - frac[:, 0]
        ix = i1[:, 0] if cx else i0[:, 0]
        for cy in (0, 1):
            wy = frac[:, 1] if cy else 1.0 - frac[:, 1]
            iy = i1[:, 1] if cy else i0[:, 1]
            for cz in (0, 1):
                wz = frac[:, 2] if cz else 1.0 - frac[:, 2]
                iz = i1[:, 2] if cz else i0[:, 2]
                out += (wx * wy * wz)[:, None] * values[ix, iy, iz]
    return out
