"""
Coupling
Recursive coupling of plaque rectangles: first run, β-stopping rule, recursion on stopped
mass and the coupling-time tail statistics
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import networkx as nx
import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from tqdm import tqdm

from src.core.da_family import rate_at
from src.core.ergodic_stats import EstimateSeries, RateFit, fit_exponential
from src.core.plaques import (
    Plaque,
    PlaqueBuilder,
    TransferTree,
    WeightedPlaqueMeasure,
    pulled_back_sum,
    reference_measure,
)
from src.core.torus_linalg import eigen_coords, from_eigen_coords, reduce_mod1, torus_distance
from src.utils.errors import (
    ChildConstructionFailed,
    InsufficientSignal,
    NoEpsApproachWithinBudget,
    PairingMismatch,
    RecursionBudgetExhausted,
    TreeTooLarge,
)

logger = logging.getLogger(__name__)

_RESOLUTION = 1e-10
_DISTANCE_SAMPLES = 9
_CANDIDATE_CHECKS = 64
_MASS_TOL = 1e-9


class CouplingParams(BaseModel):
    """Stopping constants K, λ, ε plus the recursion and resolution budgets"""

    model_config = ConfigDict(extra="forbid", populate_by_name=True, frozen=True)

    K: float = Field(4.0, gt=0, description="Stopping-rule prefactor")
    lam: float = Field(0.05, gt=0, alias="lambda", description="Stopping-rule rate")
    eps: float = Field(0.05, gt=0, description="cs-distance threshold of the first run")
    max_runs: int = Field(8, ge=1, description="Recursion depth")
    mass_floor: float = Field(1e-4, ge=0, description="Pairs lighter than this share of the initial mass are not rerun")
    horizon: int = Field(6, ge=1, description="Stopping steps per run after n0")
    max_n0: int = Field(8, ge=1, description="First-run search budget")
    max_pairs: int = Field(64, ge=1, description="Rectangle pairs processed per run")
    max_active: int = Field(512, ge=1, description="Matched pairs refined per step")
    max_leaves: int = Field(20_000, ge=1, description="Transfer-tree leaf cap")
    pairing_tolerance: float = Field(0.25, gt=0, le=1, description="Largest unmatched share of a pair's children")
    atoms_per_pair: int = Field(9, ge=2, description="Node atoms stored per coupled pair")

    @property
    def contraction_rate(self) -> float:
        """Per-step factor e^{-λ/2} of the surviving-pair distance bound"""
        return float(np.exp(-self.lam / 2.0))

    @property
    def rho1(self) -> float:
        """ρ1 = K ε e^{-λ/2}"""
        return float(self.K * self.eps * self.contraction_rate)

    def stopping_bound(self, k: int) -> float:
        return float(self.K * np.exp(-self.lam * k))

    def distance_bound(self, n: int) -> float:
        """r_n = K ε e^{-λ n/2}"""
        return float(self.K * self.eps * np.exp(-self.lam * n / 2.0))

    def check_consistency(self, center_exponent: float, theta1: float, s_mom: float, delta: float) -> Dict[str, bool]:
        """λ < -λ^c/4, e^{-λ s} > θ1 and ε ≤ δ/(2K) against measured values"""
        checks = {
            "lambda_below_center_rate": self.lam < -center_exponent / 4.0,
            "moment_rate_dominates": float(np.exp(-self.lam * s_mom)) > theta1,
            "eps_within_continuity_radius": self.eps <= delta / (2.0 * self.K),
        }
        for name, ok in checks.items():
            if not ok:
                logger.warning(f"Coupling parameter check failed: {name}")
        return checks


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------

@dataclass
class PlaqueRectangle:
    """Plaque with its reference measure times a height interval"""

    plaque: Plaque
    height: Tuple[float, float] = (0.0, 1.0)
    scale: float = 1.0

    def __post_init__(self):
        lo, hi = self.height
        if not (0.0 <= lo < hi <= 1.0):
            raise ValueError(f"Height must be a subinterval of [0,1]; got {self.height}")

    @property
    def mass(self) -> float:
        return self.scale * (self.height[1] - self.height[0])

    @property
    def measure(self) -> WeightedPlaqueMeasure:
        return reference_measure(self.plaque)

    def atom_masses(self) -> np.ndarray:
        return self.measure.segment_masses() * self.mass


@dataclass
class FirstRunResult:
    n0: int
    matched: Tuple[Plaque, Plaque]
    c_hat: Tuple[float, float]
    t_bar: Tuple[float, float]
    stopped_mass_n0: float
    matched_mass: float
    complements: Tuple[List[Tuple[Optional[Plaque], float]], List[Tuple[Optional[Plaque], float]]]
    mass_bound: Tuple[float, float, float] = (0.0, 0.0, 0.0)

    @property
    def positive_mass_bound(self) -> float:
        """a0·a1^{n0}·t0 from the measured overlap share, smallest chain coefficient and height cut"""
        a0, a1, t0 = self.mass_bound
        return float(a0 * a1 ** self.n0 * t0)

    def to_dict(self) -> dict:
        return {
            "n0": self.n0,
            "c_hat": list(self.c_hat),
            "t_bar": list(self.t_bar),
            "stopped_mass_n0": self.stopped_mass_n0,
            "matched_mass": self.matched_mass,
            "a0_hat": self.mass_bound[0],
            "a1_hat": self.mass_bound[1],
            "t0_hat": self.mass_bound[2],
            "positive_mass_bound": self.positive_mass_bound,
        }


@dataclass
class CoupledAtom:
    """Matched node pairs of a surviving piece, stored at absolute time `time`"""

    first: np.ndarray
    second: np.ndarray
    mass: float
    R: int
    time: int

    def to_dict(self) -> dict:
        return {
            "first": self.first.tolist(),
            "second": self.second.tolist(),
            "mass": self.mass,
            "R": self.R,
            "time": self.time,
        }


@dataclass
class CouplingRecord:
    coupled: List[CoupledAtom]
    pn_masses: Dict[int, float]
    uncoupled_mass: float
    runs: int
    initial_mass: float
    params: CouplingParams
    first_runs: List[FirstRunResult] = field(default_factory=list)
    max_distance_ratio: float = 0.0
    distance_violations: int = 0
    failed_first_runs: int = 0
    budget_exhausted: bool = False
    overflow_mass: float = 0.0

    @property
    def coupled_mass(self) -> float:
        return float(sum(a.mass for a in self.coupled))

    @property
    def conservation_error(self) -> float:
        return abs(self.coupled_mass + self.uncoupled_mass - self.initial_mass)

    def to_dict(self) -> dict:
        return {
            "coupled": [a.to_dict() for a in self.coupled],
            "coupled_mass": self.coupled_mass,
            "pn_masses": {str(k): v for k, v in sorted(self.pn_masses.items())},
            "uncoupled_mass": self.uncoupled_mass,
            "runs": self.runs,
            "initial_mass": self.initial_mass,
            "params": self.params.model_dump(by_alias=True),
            "first_runs": [fr.to_dict() for fr in self.first_runs],
            "max_distance_ratio": self.max_distance_ratio,
            "distance_violations": self.distance_violations,
            "failed_first_runs": self.failed_first_runs,
            "budget_exhausted": self.budget_exhausted,
            "overflow_mass": self.overflow_mass,
        }


@dataclass
class MatchedPair:
    """Two pieces with identical h-parameters, node i matched to node i"""

    first: Plaque
    second: Plaque
    mass: float
    steps: int = 0  # refinement steps since n0


@dataclass
class RecursionItem:
    first: Plaque
    second: Plaque
    mass: float
    start: int


@dataclass
class CouplingState:
    builder: PlaqueBuilder
    n0: int
    start: int
    active: List[MatchedPair]
    queue: List[RecursionItem] = field(default_factory=list)
    uncoupled: float = 0.0
    max_distance_ratio: float = 0.0
    distance_violations: int = 0


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------

def _range(p: Plaque) -> Tuple[float, float]:
    return float(p.h_param[0]), float(p.h_param[-1])


def _transverse(builder: PlaqueBuilder, a: Plaque, b: Plaque) -> float:
    """Distance between the two linear lines in one cube"""
    spec = builder.f.spectral
    d = eigen_coords(spec, a.anchor) - eigen_coords(spec, b.anchor)
    d[2] = 0.0
    return float(np.linalg.norm(from_eigen_coords(spec, d)))


def _common_params(a: Plaque, b: Plaque, lo: float, hi: float) -> np.ndarray:
    inner = np.concatenate([a.h_param, b.h_param])
    inner = inner[(inner > lo + _RESOLUTION) & (inner < hi - _RESOLUTION)]
    return np.unique(np.concatenate([[lo], inner, [hi]]))


def _restrict(builder: PlaqueBuilder, p: Plaque, lo: float, hi: float) -> Plaque:
    inner = p.h_param[(p.h_param > lo + _RESOLUTION) & (p.h_param < hi - _RESOLUTION)]
    return builder.sub_plaque(p, np.concatenate([[lo], inner, [hi]]))


def _gaps(p: Plaque, taken: List[Tuple[float, float]]) -> List[Tuple[float, float]]:
    """Parts of the plaque's h-range not covered by the taken intervals"""
    lo, hi = _range(p)
    out = []
    cursor = lo
    for a, b in sorted(taken):
        if a - cursor > _RESOLUTION:
            out.append((cursor, a))
        cursor = max(cursor, b)
    if hi - cursor > _RESOLUTION:
        out.append((cursor, hi))
    return out


def _cs_distance(builder: PlaqueBuilder, a: Plaque, b: Plaque, lo: float, hi: float) -> float:
    params = np.linspace(lo, hi, _DISTANCE_SAMPLES)
    pa = builder.plaque_points(a, params)
    pb = builder.plaque_points(b, params)
    return float(np.max(torus_distance(pa, pb)))


def _log_center(builder: PlaqueBuilder):
    f, frames = builder.f, builder.frames

    def _rate(points: np.ndarray) -> np.ndarray:
        return rate_at(f, frames, points, "c")

    return _rate


def pair_masses(
    first: List[Tuple[Optional[Plaque], float]],
    second: List[Tuple[Optional[Plaque], float]],
    start: int,
) -> Tuple[List[RecursionItem], float]:
    """
    Greedy largest-first matching of two equal-mass piece lists, splitting masses fractionally

    Returns:
        (items, unpaired_mass) where unpaired_mass collects pieces without a plaque and any
        rounding leftover
    """
    order_a = sorted(range(len(first)), key=lambda i: (-first[i][1], i))
    order_b = sorted(range(len(second)), key=lambda i: (-second[i][1], i))
    left_a = [first[i][1] for i in order_a]
    left_b = [second[i][1] for i in order_b]

    items: List[RecursionItem] = []
    unpaired = 0.0
    i = j = 0
    while i < len(order_a) and j < len(order_b):
        m = min(left_a[i], left_b[j])
        pa, pb = first[order_a[i]][0], second[order_b[j]][0]
        if m > 0:
            if pa is None or pb is None:
                unpaired += m
            else:
                items.append(RecursionItem(pa, pb, m, start))
        left_a[i] -= m
        left_b[j] -= m
        if left_a[i] <= 0:
            i += 1
        if left_b[j] <= 0:
            j += 1
    # both sides carry the same total, so only rounding is left over
    unpaired += 0.5 * (sum(left_a[i:]) + sum(left_b[j:]))
    return items, unpaired


# ---------------------------------------------------------------------------
# First run
# ---------------------------------------------------------------------------

def _chain_min_coefficient(tree: TransferTree, node: int) -> float:
    path = nx.shortest_path(tree.graph, 0, node)
    cs = [tree.graph.edges[a, b]["c"] for a, b in zip(path[:-1], path[1:])]
    return float(min(cs, default=1.0))


def first_run(
    Y1: PlaqueRectangle,
    Y2: PlaqueRectangle,
    params: CouplingParams,
    builder: PlaqueBuilder,
) -> FirstRunResult:
    """
    Push both plaques forward until an image piece of each lies in one box with
    cs-distance ≤ ε at every matched h-parameter

    The heaviest qualifying pair is matched; heights are cut to t̄ so the matched masses
    agree and everything else is stopped at n0.

    Raises:
        NoEpsApproachWithinBudget: no pair found within params.max_n0 steps
    """
    if abs(Y1.mass - Y2.mass) > 1e-12:
        raise PairingMismatch(f"Rectangle masses differ: {Y1.mass} vs {Y2.mass}")
    trees = [
        TransferTree(builder, Y.measure, max_leaves=params.max_leaves) for Y in (Y1, Y2)
    ]
    threshold = params.eps + 2.0 * builder.u.sup_norm

    for n in range(1, params.max_n0 + 1):
        for t in trees:
            t.expand(1)
        leaves = [t.leaves() for t in trees]
        info = [
            [(node, t.graph.nodes[node]["weight"], t.graph.nodes[node]["measure"].plaque) for node in lv]
            for t, lv in zip(trees, leaves)
        ]

        candidates = []
        for i, (n1, w1, p1) in enumerate(info[0]):
            lo1, hi1 = _range(p1)
            for k, (n2, w2, p2) in enumerate(info[1]):
                if p1.box_id != p2.box_id:
                    continue
                lo, hi = max(lo1, _range(p2)[0]), min(hi1, _range(p2)[1])
                if hi - lo <= _RESOLUTION:
                    continue
                lin = _transverse(builder, p1, p2)
                if lin > threshold:
                    continue
                c1 = w1 * (hi - lo) / (hi1 - lo1)
                c2 = w2 * (hi - lo) / (p2.h_length)
                candidates.append((-round(min(c1, c2), 12), lin, i, k, lo, hi, c1, c2))

        for cand in sorted(candidates)[:_CANDIDATE_CHECKS]:
            _, _, i, k, lo, hi, c1, c2 = cand
            p1, p2 = info[0][i][2], info[1][k][2]
            if _cs_distance(builder, p1, p2, lo, hi) > params.eps:
                continue
            return _finish_first_run(Y1, trees, info, i, k, lo, hi, c1, c2, n, builder)

    raise NoEpsApproachWithinBudget(
        f"No ε={params.eps} approach within {params.max_n0} steps; ε may be too small for the box resolution"
    )


def _finish_first_run(Y1, trees, info, i, k, lo, hi, c1, c2, n0, builder) -> FirstRunResult:
    mass = Y1.mass
    t_bar = (c2 / c1, 1.0) if c2 <= c1 else (1.0, c1 / c2)
    params_common = _common_params(info[0][i][2], info[1][k][2], lo, hi)
    matched = (
        builder.sub_plaque(info[0][i][2], params_common),
        builder.sub_plaque(info[1][k][2], params_common),
    )
    matched_share = c1 * t_bar[0]

    complements: List[List[Tuple[Optional[Plaque], float]]] = [[], []]
    for side, (idx, c, tb) in enumerate(((i, c1, t_bar[0]), (k, c2, t_bar[1]))):
        for j, (_, w, p) in enumerate(info[side]):
            if j != idx:
                complements[side].append((p, mass * w))
                continue
            for a, b in _gaps(p, [(lo, hi)]):
                complements[side].append((_restrict(builder, p, a, b), mass * w * (b - a) / p.h_length))
            if tb < 1.0:
                complements[side].append((matched[side], mass * c * (1.0 - tb)))

    a0 = (hi - lo) / max(info[0][i][2].h_length, info[1][k][2].h_length)
    a1 = min(_chain_min_coefficient(trees[0], info[0][i][0]), _chain_min_coefficient(trees[1], info[1][k][0]))
    result = FirstRunResult(
        n0=n0,
        matched=matched,
        c_hat=(float(c1), float(c2)),
        t_bar=(float(t_bar[0]), float(t_bar[1])),
        stopped_mass_n0=float(1.0 - matched_share),
        matched_mass=float(mass * matched_share),
        complements=(complements[0], complements[1]),
        mass_bound=(float(a0), float(a1), float(min(t_bar))),
    )
    logger.info(
        f"✓ First run n0={n0}: ĉ=({c1:.4f}, {c2:.4f}), t̄=({t_bar[0]:.4f}, {t_bar[1]:.4f}), "
        f"matched mass {result.matched_mass:.4e}"
    )
    return result


# ---------------------------------------------------------------------------
# Stopping steps
# ---------------------------------------------------------------------------

def start_state(fr: FirstRunResult, builder: PlaqueBuilder, start: int = 0) -> CouplingState:
    """Matched pair at n0 and the complement queued for the next run"""
    first, second = fr.matched
    state = CouplingState(
        builder=builder,
        n0=fr.n0,
        start=start,
        active=[MatchedPair(first, second, fr.matched_mass)],
    )
    items, unpaired = pair_masses(fr.complements[0], fr.complements[1], start + fr.n0)
    state.queue.extend(items)
    state.uncoupled += unpaired
    return state


def _split_pair(builder: PlaqueBuilder, pair: MatchedPair, params: CouplingParams):
    """Children of both sides, matched one-to-one by box, h-overlap and nearest line"""
    s1, s2 = builder.transfer_split(pair.first), builder.transfer_split(pair.second)
    threshold = params.K * params.eps + 2.0 * builder.u.sup_norm

    claims: Dict[int, Tuple[float, int, float, float]] = {}
    for i, c1 in enumerate(s1.children):
        best = None
        for k, c2 in enumerate(s2.children):
            if c1.box_id != c2.box_id:
                continue
            lo, hi = max(_range(c1)[0], _range(c2)[0]), min(_range(c1)[1], _range(c2)[1])
            if hi - lo <= _RESOLUTION:
                continue
            lin = _transverse(builder, c1, c2)
            if lin <= threshold and (best is None or lin < best[0]):
                best = (lin, k, lo, hi)
        if best is not None and (best[1] not in claims or best[0] < claims[best[1]][0]):
            claims[best[1]] = (best[0], i, best[2], best[3])

    return s1, s2, {v[1]: (k, v[2], v[3]) for k, v in claims.items()}


def stopping_step(state: CouplingState, n: int, params: CouplingParams) -> Tuple[CouplingState, float]:
    """
    One refinement step at time n > n0

    Pairs whose β = sup ‖dF^{n-n0}|Ê^c‖ over the preimage nodes exceeds K e^{-λ(n-n0)} stop and
    are queued for the next run; children left unmatched by the refinement stop as well.
    Surviving pairs are audited against r_n = K ε e^{-λ n/2}.

    Returns:
        (state, stopped mass at n)

    Raises:
        PairingMismatch: unmatched child share of a pair above params.pairing_tolerance
    """
    if n <= state.n0:
        raise ValueError(f"Stopping steps start after n0={state.n0}; got n={n}")
    builder = state.builder
    k = n - state.n0
    bound = params.stopping_bound(k)
    r_n = params.distance_bound(n)
    time = state.start + n

    survivors: List[MatchedPair] = []
    stopped = 0.0
    for pair in state.active:
        try:
            s1, s2, matches = _split_pair(builder, pair, params)
        except ChildConstructionFailed as exc:
            logger.warning(f"Pair of mass {pair.mass:.3e} could not be refined: {exc}")
            state.uncoupled += pair.mass
            continue

        carried = pulled_back_sum(builder.f, _log_center(builder), pair.steps)
        total1 = sum(c.h_length for c in s1.children)
        total2 = sum(c.h_length for c in s2.children)
        taken1: Dict[int, List[Tuple[float, float]]] = {}
        taken2: Dict[int, List[Tuple[float, float]]] = {}
        matched_mass = 0.0

        for i, (kk, lo, hi) in sorted(matches.items()):
            c1, c2 = s1.children[i], s2.children[kk]
            taken1.setdefault(i, []).append((lo, hi))
            taken2.setdefault(kk, []).append((lo, hi))
            mass = pair.mass * (hi - lo) / total1
            matched_mass += mass

            common = _common_params(c1, c2, lo, hi)
            sub1, sub2 = builder.sub_plaque(c1, common), builder.sub_plaque(c2, common)
            L1 = carried(builder.f.inverse(sub1.points))
            L2 = carried(builder.f.inverse(sub2.points))
            beta = float(np.exp(max(L1.max(), L2.max())))

            if beta > bound:
                state.queue.append(RecursionItem(sub1, sub2, mass, time))
                stopped += mass
                continue

            d = float(np.max(torus_distance(reduce_mod1(sub1.points), reduce_mod1(sub2.points))))
            state.max_distance_ratio = max(state.max_distance_ratio, d / r_n)
            if d > r_n:
                state.distance_violations += 1
            survivors.append(MatchedPair(sub1, sub2, mass, pair.steps + 1))

        leftover = pair.mass - matched_mass
        if leftover > params.pairing_tolerance * pair.mass:
            raise PairingMismatch(
                f"{leftover / pair.mass:.2%} of a pair's children found no partner at n={n}"
            )
        if leftover > _RESOLUTION * pair.mass:
            slivers = []
            for s, taken, total in ((s1, taken1, total1), (s2, taken2, total2)):
                parts = []
                for j, child in enumerate(s.children):
                    for a, b in _gaps(child, taken.get(j, [])):
                        parts.append((child, a, b))
                length = sum(b - a for _, a, b in parts)
                pieces = []
                for child, a, b in parts:
                    plaque = _restrict(builder, child, a, b) if b - a > 1e3 * _RESOLUTION else None
                    pieces.append((plaque, leftover * (b - a) / length))
                slivers.append(pieces)
            items, unpaired = pair_masses(slivers[0], slivers[1], time)
            state.queue.extend(items)
            state.uncoupled += unpaired
            stopped += leftover - unpaired
        else:
            state.uncoupled += max(leftover, 0.0)

    state.active = survivors
    logger.debug(f"Step n={n}: {len(survivors)} surviving pairs, stopped mass {stopped:.4e}")
    return state, stopped


def _atoms(pair: MatchedPair, R: int, time: int, per_pair: int) -> CoupledAtom:
    idx = np.unique(np.linspace(0, len(pair.first.points) - 1, per_pair).round().astype(int))
    return CoupledAtom(
        first=reduce_mod1(pair.first.points[idx]),
        second=reduce_mod1(pair.second.points[idx]),
        mass=pair.mass,
        R=R,
        time=time,
    )


# ---------------------------------------------------------------------------
# Full run
# ---------------------------------------------------------------------------

def run_coupling(
    Y1: PlaqueRectangle,
    Y2: PlaqueRectangle,
    params: CouplingParams,
    builder: PlaqueBuilder,
    quiet: bool = True,
) -> CouplingRecord:
    """
    Couple two rectangles recursively

    Each run matches one pair at n0 (coupling time R = start + n0 for everything that never
    stops) and refines it for params.horizon steps; stopped pieces are paired by mass and
    rerun. Mass left after max_runs, below the floor, beyond max_pairs or in more than
    max_active live pairs is reported as uncoupled; pairs alive after params.horizon steps
    count as never stopping.
    """
    initial = Y1.mass
    record = CouplingRecord([], {}, 0.0, 0, initial, params)
    queue = [RecursionItem(Y1.plaque, Y2.plaque, Y1.mass, 0)]
    if abs(Y1.mass - Y2.mass) > 1e-12:
        raise PairingMismatch(f"Rectangle masses differ: {Y1.mass} vs {Y2.mass}")

    for run in range(params.max_runs):
        if not queue:
            break
        record.runs = run + 1
        queue.sort(key=lambda it: (-it.mass, it.start))
        keep = [it for it in queue[: params.max_pairs] if it.mass >= params.mass_floor * initial]
        dropped = sum(it.mass for it in queue) - sum(it.mass for it in keep)
        if dropped > 0:
            record.uncoupled_mass += dropped
            logger.info(f"Run {run + 1}: {dropped:.3e} mass below floor or beyond {params.max_pairs} pairs")

        next_queue: List[RecursionItem] = []
        for item in tqdm(keep, desc=f"coupling run {run + 1}", disable=quiet):
            scale = item.mass
            R1 = PlaqueRectangle(item.first, scale=scale)
            R2 = PlaqueRectangle(item.second, scale=scale)
            try:
                fr = first_run(R1, R2, params, builder)
            except (NoEpsApproachWithinBudget, TreeTooLarge, ChildConstructionFailed) as exc:
                logger.warning(f"First run failed for mass {item.mass:.3e}: {exc}")
                record.failed_first_runs += 1
                record.uncoupled_mass += item.mass
                continue
            record.first_runs.append(fr)
            _tally(record, item.start + fr.n0, item.mass - fr.matched_mass)

            state = start_state(fr, builder, item.start)
            last = fr.n0
            for n in range(fr.n0 + 1, fr.n0 + params.horizon + 1):
                if not state.active or len(state.active) > params.max_active:
                    break
                state, stopped = stopping_step(state, n, params)
                _tally(record, item.start + n, stopped)
                last = n

            alive = float(sum(p.mass for p in state.active))
            if len(state.active) > params.max_active:
                logger.warning(
                    f"{len(state.active)} matched pairs exceed max_active={params.max_active} at "
                    f"n={last}; {alive:.3e} mass reported as uncoupled"
                )
                record.overflow_mass += alive
                record.uncoupled_mass += alive
            else:
                R = item.start + fr.n0
                record.coupled.extend(_atoms(p, R, item.start + last, params.atoms_per_pair) for p in state.active)
            record.uncoupled_mass += state.uncoupled
            record.max_distance_ratio = max(record.max_distance_ratio, state.max_distance_ratio)
            record.distance_violations += state.distance_violations
            next_queue.extend(state.queue)
        queue = next_queue

    leftover = sum(it.mass for it in queue)
    if leftover > 0:
        exhausted = RecursionBudgetExhausted(f"{len(queue)} pairs ({leftover:.3e} mass) left after {params.max_runs} runs")
        logger.warning(f"{type(exhausted).__name__}: {exhausted}; reported as uncoupled")
        record.budget_exhausted = True
        record.uncoupled_mass += leftover

    logger.info(
        f"✓ Coupling: {record.runs} runs, coupled {record.coupled_mass:.6f}, "
        f"uncoupled {record.uncoupled_mass:.6f}, conservation error {record.conservation_error:.1e}"
    )
    return record


def _tally(record: CouplingRecord, time: int, mass: float) -> None:
    if mass > 0:
        record.pn_masses[time] = record.pn_masses.get(time, 0.0) + mass


# ---------------------------------------------------------------------------
# Statistics on records
# ---------------------------------------------------------------------------

def tail_series(rec: CouplingRecord, max_n: int = 30) -> EstimateSeries:
    """
    m(R > N)/m(initial) for N = 0..min(R_max - 1, max_n)

    Uncoupled mass has R = ∞ and counts in every entry; past the last coupling time the tail
    is that constant floor.
    """
    R = np.array([a.R for a in rec.coupled], dtype=int)
    m = np.array([a.mass for a in rec.coupled])
    top = min(int(R.max()) - 1, max_n) if len(R) else -1
    ns = np.arange(0, top + 1)
    tails = (np.array([m[R > n].sum() for n in ns]) + rec.uncoupled_mass) / rec.initial_mass
    return EstimateSeries(ns, tails, np.zeros(len(ns)), len(R), 0, "coupling_tail")


def tail_statistics(rec: CouplingRecord, min_points: int = 5) -> RateFit:
    """
    Exponential fit of m(R > N), uncoupled mass included

    A fully coupled record with a single coupling time is degenerate: the tail is a step,
    reported with rate -inf (ρ̂2 = 0).

    Raises:
        InsufficientSignal: coupled mass ≤ half the initial mass, or fewer than min_points
            tail entries
    """
    if rec.coupled_mass <= 0.5 * rec.initial_mass:
        raise InsufficientSignal(f"Coupled mass {rec.coupled_mass:.4f} does not exceed half the initial mass")
    distinct = sorted({a.R for a in rec.coupled})
    if len(distinct) == 1 and rec.uncoupled_mass <= _MASS_TOL * rec.initial_mass:
        logger.info(f"Coupling tail degenerate: every atom has R={distinct[0]}")
        return RateFit(
            log_intercept=float(np.log(rec.coupled_mass / rec.initial_mass)),
            rate=float("-inf"),
            r_squared=1.0,
            fit_range=(distinct[0], distinct[0]),
            points_used=0,
        )
    series = tail_series(rec)
    if len(series.n_values) < min_points:
        raise InsufficientSignal(
            f"Coupling tail has {len(series.n_values)} points (need {min_points}); "
            f"{len(distinct)} coupling times, uncoupled share {rec.uncoupled_mass / rec.initial_mass:.4f}"
        )
    return fit_exponential(series, min_points=min_points)


def matched_distance_check(rec: CouplingRecord, f, n: int = 20, rho: Optional[float] = None) -> float:
    """
    C1 = max over coupled atoms and 0 ≤ j ≤ n of d(F^j z1, F^j z2)/ρ1^{time + j - R}

    The atoms are stored at their recorded time, so j counts steps past it. rho defaults to
    params.rho1 = K ε e^{-λ/2}.
    """
    rho1 = rec.params.rho1 if rho is None else rho
    worst = 0.0
    for atom in rec.coupled:
        x1, x2 = atom.first, atom.second
        for j in range(n + 1):
            d = float(np.max(torus_distance(x1, x2)))
            worst = max(worst, d / rho1 ** (atom.time + j - atom.R))
            x1, x2 = f.map(x1), f.map(x2)
    logger.info(f"✓ Matched distances: C1={worst:.4e} with ρ1={rho1:.4f} over {len(rec.coupled)} atoms")
    return worst


def hyperbolic_block_mass(
    plaque: Plaque,
    params: CouplingParams,
    builder: PlaqueBuilder,
    n_max: int,
) -> Tuple[float, float]:
    """
    Reference mass of the set U of points with a preimage piece violating
    ‖dF^n|Ê^c‖ < K e^{-λ n} for some n ≤ n_max

    Returns:
        (q1_hat, a0_hat = 1 - q1_hat)
    """
    tree = TransferTree(builder, reference_measure(plaque), {"L": _log_center(builder)}, params.max_leaves)
    flagged = {0: False}
    for level in range(1, n_max + 1):
        tree.expand(1)
        bound = params.stopping_bound(level)
        for node in tree.leaves(level):
            parent = next(iter(tree.graph.predecessors(node)))
            acc = tree.graph.nodes[node]["acc"]["L"]
            flagged[node] = flagged[parent] or float(np.exp(acc.max())) >= bound

    total = tree.total_weight(n_max)
    q1 = sum(tree.graph.nodes[nd]["weight"] for nd in tree.leaves(n_max) if flagged[nd]) / total
    return float(q1), float(1.0 - q1)
