"""
Experiment Runner
Binds config, field cache, the core modules and the writers into one call per subcommand
"""

import json
import logging
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
from tqdm import tqdm

from src.core.coupling import (
    CouplingRecord,
    PlaqueRectangle,
    hyperbolic_block_mass,
    matched_distance_check,
    run_coupling,
    tail_series,
    tail_statistics,
)
from src.core.da_family import (
    DAMap,
    FrameField,
    PartialHyperbolicityReport,
    compute_frames,
    make_da_map,
    verify_partial_hyperbolicity,
)
from src.core.ergodic_stats import (
    EstimateSeries,
    ObservableSpec,
    RateFit,
    SampleSet,
    center_derivative_moment,
    character_orbit_check,
    correlation_series,
    deviation_tail,
    fit_exponential,
    lyapunov_spectrum,
    moment_bound_check,
    mostly_contracting_check,
    oscillation_check,
    plaque_birkhoff_mean,
    predicted_tau,
    sample_nu_f,
)
from src.core.plaques import (
    Plaque,
    PlaqueBuilder,
    holder_measure,
    holonomy_discrepancy,
    linear_partition,
    project_E0,
    reference_measure,
    transfer_functionals,
)
from src.core.semiconjugacy import (
    DisplacementField,
    invert_h_batch,
    leaf_bijectivity_check,
    semiconjugacy_report,
    solve_h,
)
from src.core.torus_linalg import TorusPoint, analyze_matrix, reduce_mod1
from src.utils.cache import KIND_DISPLACEMENT, KIND_FRAMES, field_fingerprint, load_or_compute
from src.utils.config import ExperimentConfig
from src.utils.errors import (
    ChildConstructionFailed,
    DATorusError,
    HImageNonMonotone,
    HolonomyOutOfPlaque,
    InsufficientSignal,
    LeafIntegrationDiverged,
    LeafIntegrationStalled,
    NotSameBox,
)
from src.utils.io import write_json, write_series
from src.utils.parallel import rng_for
from src.visualization.rate_plots import RatePlotter

logger = logging.getLogger(__name__)

SUBCOMMANDS = (
    "spectrum",
    "verify-ph",
    "solve-h",
    "plaques",
    "lyapunov",
    "correlations",
    "deviations",
    "moment-bound",
    "coupling",
    "plots",
    "all",
)

# Philox stream keys for the runner's own draws
_PLAQUE_STREAM = 30
_HOLDER_STREAM = 31

_GROWTH_ERRORS = (LeafIntegrationDiverged, LeafIntegrationStalled, HImageNonMonotone, ChildConstructionFailed)


def _tag(s: float) -> str:
    return f"s{s:g}"


def _fit_or_none(series: EstimateSeries, n_min: int = 1) -> Tuple[Optional[RateFit], str]:
    keep = series.n_values >= n_min
    trimmed = EstimateSeries(
        series.n_values[keep], series.estimates[keep], series.stderrs[keep],
        series.sample_count, series.seed, series.name,
    )
    try:
        return fit_exponential(trimmed), ""
    except InsufficientSignal as exc:
        logger.warning(f"No rate for {series.name}: {exc}")
        return None, str(exc)


def _subset(samples: SampleSet, count: int) -> SampleSet:
    return SampleSet(
        samples.automorphism, samples.numerators[:count], samples.x[:count], samples.y[:count],
        samples.drop_rate, samples.seed, samples.modulus,
    )


def _merge(records: List[CouplingRecord]) -> CouplingRecord:
    pn: Dict[int, float] = {}
    for rec in records:
        for k, v in rec.pn_masses.items():
            pn[k] = pn.get(k, 0.0) + v
    return CouplingRecord(
        coupled=[a for rec in records for a in rec.coupled],
        pn_masses=pn,
        uncoupled_mass=float(sum(rec.uncoupled_mass for rec in records)),
        runs=max(rec.runs for rec in records),
        initial_mass=float(sum(rec.initial_mass for rec in records)),
        params=records[0].params,
        first_runs=[fr for rec in records for fr in rec.first_runs],
        max_distance_ratio=max(rec.max_distance_ratio for rec in records),
        distance_violations=sum(rec.distance_violations for rec in records),
        failed_first_runs=sum(rec.failed_first_runs for rec in records),
        budget_exhausted=any(rec.budget_exhausted for rec in records),
        overflow_mass=float(sum(rec.overflow_mass for rec in records)),
    )


class ExperimentRunner:
    """
    Run the laboratory experiments for one configuration

    Expensive objects (maps, displacement fields, frames, samples, plaques) are built once
    per amplitude and reused across subcommands of the same run. Every artifact carries the
    config fingerprint and seed.
    """

    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.seed = config.seed
        self.threads = config.threads
        self.quiet = config.quiet
        self.fingerprint = config.fingerprint()

        self.output_dir = Path(config.output_dir)
        self.series_dir = self.output_dir / "series"
        self.cache_dir = Path(config.cache_dir)
        self.output_dir.mkdir(exist_ok=True, parents=True)

        logger.info("Analyzing linear part...")
        self.spectral = analyze_matrix(config.matrix, orient=config.orient)
        self.bump = config.bump.build()

        self._maps: Dict[float, DAMap] = {}
        self._fields: Dict[float, DisplacementField] = {}
        self._frames: Dict[float, FrameField] = {}
        self._builders: Dict[float, PlaqueBuilder] = {}
        self._samples: Dict[float, SampleSet] = {}
        self._plaques: Dict[Tuple[float, int], List[Plaque]] = {}
        self._ph: Dict[float, PartialHyperbolicityReport] = {}
        self.results: Dict[str, dict] = {}

    # shared objects --------------------------------------------------------

    def _write(self, name: str, payload: dict) -> Path:
        self.results[name] = payload
        return write_json(self.output_dir / f"{name}.json", payload, self.fingerprint, self.seed)

    def map_for(self, s: float) -> DAMap:
        if s not in self._maps:
            self._maps[s] = make_da_map(self.spectral, self.bump, s, self.config.power, threads=self.threads)
        return self._maps[s]

    def _field_key(self, kind: str, s: float, **extra) -> bytes:
        cfg = self.config
        return field_fingerprint(
            kind=kind, matrix=cfg.matrix, orient=cfg.orient,
            bump=cfg.bump.model_dump(mode="json"), s=s, **extra,
        )

    def displacement(self, s: float) -> DisplacementField:
        if s in self._fields:
            return self._fields[s]
        cfg, f = self.config, self.map_for(s)

        def _compute():
            u = solve_h(f, cfg.grid_n, cfg.depth, cfg.h_tolerance, cfg.test_n, self.threads)
            meta = {
                "residual_sup": u.residual_sup,
                "interpolation_residual": u.interpolation_residual,
                "lipschitz_est": u.lipschitz_est,
                "sup_norm": u.sup_norm,
            }
            return u.values, meta

        key = self._field_key("displacement", s, grid_n=cfg.grid_n, depth=cfg.depth)
        path = self.cache_dir / f"u_{_tag(s)}_n{cfg.grid_n}.bin"
        values, meta = load_or_compute(path, KIND_DISPLACEMENT, key, _compute)
        self._fields[s] = DisplacementField(
            f, values, cfg.grid_n, cfg.depth,
            float(meta.get("residual_sup", 0.0)),
            float(meta.get("interpolation_residual", 0.0)),
            float(meta.get("lipschitz_est", 0.0)),
            float(meta.get("sup_norm", 0.0)),
        )
        return self._fields[s]

    def frames(self, s: float) -> FrameField:
        if s in self._frames:
            return self._frames[s]
        cfg, f = self.config, self.map_for(s)

        def _compute():
            fr = compute_frames(f, cfg.frame_grid_n, cfg.frame_iters, cfg.frame_tolerance, self.threads)
            packed = np.concatenate([fr.stable, fr.center, fr.unstable, fr.residuals], axis=-1)
            return packed, {"iterations": fr.iterations}

        key = self._field_key(
            "frames", s, power=cfg.power, grid_n=cfg.frame_grid_n, iters=cfg.frame_iters,
        )
        path = self.cache_dir / f"frames_{_tag(s)}_n{cfg.frame_grid_n}.bin"
        packed, meta = load_or_compute(path, KIND_FRAMES, key, _compute)
        self._frames[s] = FrameField(
            grid_n=cfg.frame_grid_n,
            stable=packed[..., 0:3],
            center=packed[..., 3:6],
            unstable=packed[..., 6:9],
            residuals=packed[..., 9:12],
            iterations=int(meta.get("iterations", cfg.frame_iters)),
        )
        return self._frames[s]

    def builder(self, s: float) -> PlaqueBuilder:
        if s not in self._builders:
            partition = linear_partition(self.spectral, self.config.boxes_per_axis)
            self._builders[s] = PlaqueBuilder(
                self.map_for(s), self.displacement(s), self.frames(s), partition, step=self.config.plaque_step,
            )
        return self._builders[s]

    def samples(self, s: float) -> SampleSet:
        if s not in self._samples:
            self._samples[s] = sample_nu_f(
                self.displacement(s), self.spectral.automorphism, self.config.sample_count, self.seed,
                tol=self.config.inversion_tol, threads=self.threads,
            )
        return self._samples[s]

    def plaques(self, s: float, count: int, stream: int = 0) -> List[Plaque]:
        """count plaques through ν_f-distributed base points (h^{-1} of uniform points)"""
        key = (s, stream)
        cached = self._plaques.get(key, [])
        if len(cached) >= count:
            return cached[:count]

        builder = self.builder(s)
        rng = rng_for(self.seed, _PLAQUE_STREAM, stream)
        out: List[Plaque] = []
        attempts = 0
        while len(out) < count and attempts < 4:
            attempts += 1
            z = rng.random((2 * count, 3))
            y, ok = invert_h_batch(self.displacement(s), z, self.config.inversion_tol)
            for point in reduce_mod1(y[ok]):
                if len(out) == count:
                    break
                try:
                    out.append(builder.grow_plaque(TorusPoint(tuple(float(c) for c in point))))  # type: ignore[arg-type]
                except _GROWTH_ERRORS as exc:
                    logger.warning(f"Skipping plaque at {point.tolist()}: {exc}")
        logger.info(f"✓ Grew {len(out)} plaques at s={s} (stream {stream})")
        self._plaques[key] = out
        return out

    def ph_report(self, s: float) -> PartialHyperbolicityReport:
        if s not in self._ph:
            cfg = self.config
            self._ph[s] = verify_partial_hyperbolicity(
                self.map_for(s), cfg.verify_grid_n, cfg.cone_angle, cfg.frame_iters, self.threads,
            )
        return self._ph[s]

    # subcommands -----------------------------------------------------------

    def run_spectrum(self) -> dict:
        sp = self.spectral
        partition = linear_partition(sp, self.config.boxes_per_axis)
        payload = {
            **sp.to_dict(),
            "log_kappa": sp.log_kappa.tolist(),
            "topological_entropy": sp.topological_entropy,
            "power": self.config.power,
            "markov_defect": partition.markov_defect(power=self.config.power, seed=self.seed),
        }
        self._write("spectrum", payload)
        return payload

    def run_verify_ph(self) -> dict:
        payload = {_tag(s): self.ph_report(s).to_dict() for s in self.config.s_values}
        for s in self.config.s_values:
            rep = self._ph[s]
            mark = "✓" if rep.verified else "✗"
            logger.info(f"{mark} s={s}: λ5 ∈ [{rep.lambda5_min:.4f}, {rep.lambda5_max:.4f}] {rep.reason}")
        self._write("verify_ph", payload)
        return payload

    def run_solve_h(self) -> dict:
        cfg = self.config
        payload = {}
        for s in cfg.s_values:
            u = self.displacement(s)
            report = semiconjugacy_report(
                u, self.frames(s), n_inversion=min(cfg.sample_count, 10_000), tol=cfg.inversion_tol, seed=self.seed,
            )
            payload[_tag(s)] = {**report.to_dict(), "grid_n": u.grid_n, "truncation_depth": u.truncation_depth}
        self._write("solve_h", payload)
        return payload

    def run_plaques(self) -> dict:
        """Transfer Jacobian, holonomy invariance, E(R) contraction and projection scaling"""
        cfg = self.config
        payload = {}
        for s in cfg.s_values:
            builder = self.builder(s)
            plaques = self.plaques(s, cfg.n_plaques)

            splits = [builder.transfer_split(p) for p in tqdm(plaques, desc="transfer splits", disable=self.quiet)]
            weights = np.concatenate([sp.weights for sp in splits])
            clusters = int(len(np.unique(np.round(weights / 1e-6))))

            same_box: Dict[int, List[Plaque]] = {}
            for p in self.plaques(s, 2 * cfg.n_plaques, stream=2):
                same_box.setdefault(p.box_id, []).append(p)
            discrepancies = []
            for group in same_box.values():
                for a, b in zip(group[:-1], group[1:]):
                    if len(discrepancies) == cfg.n_plaques:
                        break
                    try:
                        moved = builder.cs_holonomy(reference_measure(a), b.base)
                    except (NotSameBox, HolonomyOutOfPlaque) as exc:
                        logger.info(f"Holonomy pair skipped: {exc}")
                        continue
                    discrepancies.append(holonomy_discrepancy(moved, reference_measure(b)))

            report = self.ph_report(s)
            gamma = 0.5
            bound = float(np.exp(-report.lambda5_min * gamma) * (1 + 1e-3))
            bound_max = float(np.exp(-report.lambda5_max * gamma) * (1 + 1e-3))
            rng = rng_for(self.seed, _HOLDER_STREAM)
            ratios, projections = [], []
            for p in plaques:
                l = holder_measure(p, 1.0, gamma, center_index=int(rng.integers(len(p.points))))
                parent = l.measured_holder()
                children = builder.transfer_step(l)
                if parent > 0:
                    ratios.append(max(m.holder_const for _, m in children) / parent)
                row = []
                for R in (0.05, 0.1, 0.2):
                    _, dist, const = project_E0(holder_measure(p, R, gamma), R0=0.2)
                    row.append((dist / R, const))
                projections.append(row)
            proj = np.asarray(projections)

            seeds = plaques[:2]
            uniqueness = []
            if len(seeds) == 2:
                obs = [self.config.observable(o.name) for o in cfg.observables[:3]]
                uniqueness = transfer_functionals(
                    builder, reference_measure(seeds[0]), reference_measure(seeds[1]), obs, min(cfg.moment_n, 4),
                    max_leaves=cfg.coupling.max_leaves,
                ).tolist()

            payload[_tag(s)] = {
                "plaques": len(plaques),
                "weight_sum_error": float(max(abs(sp.weights.sum() - 1.0) for sp in splits)) if splits else 0.0,
                "density_variation_max": float(max((sp.density_variation for sp in splits), default=0.0)),
                "weight_clusters": clusters,
                "a1_hat": float(weights.min()) if len(weights) else 0.0,
                "leaf_bijectivity_min": float(min((leaf_bijectivity_check(builder.u, p) for p in plaques), default=0.0)),
                "holonomy_pairs": len(discrepancies),
                "holonomy_discrepancy_max": float(max(discrepancies, default=0.0)),
                "holder_ratio_max": float(max(ratios, default=0.0)),
                "holder_ratio_bound": bound,
                "holder_contracts": bool(all(r <= bound for r in ratios)),
                "holder_ratio_bound_max": bound_max,
                "holder_contracts_max": bool(all(r <= bound_max for r in ratios)),
                "projection_ratio": proj[..., 0].max(axis=0).tolist() if len(proj) else [],
                "projection_within_const": bool(np.all(proj[..., 0] <= proj[..., 1])) if len(proj) else True,
                "uniqueness_differences": uniqueness,
            }
        self._write("plaques", payload)
        return payload

    def run_lyapunov(self) -> dict:
        cfg = self.config
        payload = {}
        for s in cfg.s_values:
            f, u, frames = self.map_for(s), self.displacement(s), self.frames(s)
            samples = _subset(self.samples(s), cfg.exponent_samples) if s in self._samples else sample_nu_f(
                u, self.spectral.automorphism, cfg.exponent_samples, self.seed,
                tol=cfg.inversion_tol, threads=self.threads,
            )
            spectrum = lyapunov_spectrum(f, frames, u, samples, cfg.orbit_length, cfg.inversion_tol, self.threads)
            worst, alpha0 = mostly_contracting_check(f, frames, self.plaques(s, cfg.n_plaques), cfg.contracting_n)
            log_k2 = float(self.spectral.log_kappa[1])
            payload[_tag(s)] = {
                "exponents": {b: e.to_dict() for b, e in spectrum.items()},
                "log_kappa2": log_k2,
                "center_below_log_kappa2": spectrum["c"].value <= log_k2 + 0.01,
                "mostly_contracting_worst": worst,
                "alpha0": alpha0,
                "contracting_n": cfg.contracting_n,
            }
        self._write("lyapunov", payload)
        return payload

    def run_correlations(self) -> dict:
        cfg = self.config
        payload: Dict[str, dict] = {"fits": {}}
        for s in cfg.s_values:
            f, u = self.map_for(s), self.displacement(s)
            samples = self.samples(s)
            rows = {}
            for pair in cfg.correlation_pairs:
                phi, psi = cfg.observable(pair.phi), cfg.observable(pair.psi)
                series = correlation_series(
                    f, u, phi, psi, cfg.n_max, cfg.sample_count, self.seed, samples=samples,
                    tol=cfg.inversion_tol, threads=self.threads, quiet=self.quiet,
                )
                stem = f"correlation_{_tag(s)}_{pair.phi}_{pair.psi}"
                series.name = stem
                write_series(self.series_dir / f"{stem}.csv", series, self.fingerprint, self.seed)
                fit, reason = _fit_or_none(series)
                tail = series.n_values >= 1
                rows[f"{pair.phi}/{pair.psi}"] = {
                    "fit": fit.to_dict() if fit else None,
                    "reason": reason,
                    "within_noise": bool(np.all(np.abs(series.estimates[tail]) <= 3 * series.stderrs[tail] + 1e-15)),
                    "exact_character_decorrelation": (
                        phi.kind == "character" and character_orbit_check(self.spectral.automorphism, phi.k, cfg.n_max)
                    ),
                }
                payload["fits"][stem] = rows[f"{pair.phi}/{pair.psi}"]["fit"]
            payload[_tag(s)] = {"pairs": rows, "drop_rate": samples.drop_rate, "samples": len(samples)}
        self._write("correlations", payload)
        return payload

    def run_deviations(self) -> dict:
        cfg = self.config
        payload: Dict[str, dict] = {"fits": {}}
        phi = cfg.observable(cfg.deviation_observable)
        for s in cfg.s_values:
            f, u = self.map_for(s), self.displacement(s)
            samples = self.samples(s)
            series = deviation_tail(
                f, u, phi, cfg.deviation_eps, cfg.deviation_n, cfg.sample_count, self.seed, samples=samples,
                tol=cfg.inversion_tol, threads=self.threads, quiet=self.quiet,
            )
            stem = f"deviation_{_tag(s)}_{cfg.deviation_observable}"
            series.name = stem
            write_series(self.series_dir / f"{stem}.csv", series, self.fingerprint, self.seed)
            fit, reason = _fit_or_none(series, n_min=0)

            small = _subset(samples, min(len(samples), 10_000))
            zero = deviation_tail(f, u, ObservableSpec.const(0.0), cfg.deviation_eps, cfg.deviation_n,
                                  len(small), self.seed, samples=small, tol=cfg.inversion_tol, threads=self.threads)
            wide = deviation_tail(f, u, phi, 2.0 * phi.sup_norm + 1.0, cfg.deviation_n,
                                  len(small), self.seed, samples=small, tol=cfg.inversion_tol, threads=self.threads)
            payload["fits"][stem] = fit.to_dict() if fit else None
            payload[_tag(s)] = {
                "fit": payload["fits"][stem],
                "reason": reason,
                "eps": cfg.deviation_eps,
                "zero_observable_max": float(np.max(zero.estimates, initial=0.0)),
                "large_eps_max": float(np.max(wide.estimates, initial=0.0)),
            }
        self._write("deviations", payload)
        return payload

    def run_moment_bound(self) -> dict:
        cfg = self.config
        payload = {}
        base = cfg.observable(cfg.deviation_observable)
        for s in cfg.s_values:
            builder = self.builder(s)
            plaque = self.plaques(s, 1)[0]
            mean_samples = sample_nu_f(
                self.displacement(s), self.spectral.automorphism, min(cfg.exponent_samples, 10_000), self.seed,
                tol=cfg.inversion_tol, threads=self.threads,
            )
            phi = base.shifted(-float(np.mean(base(mean_samples.y))) - cfg.moment_shift)

            rows = []
            for n in range(1, cfg.moment_n + 1):
                lhs, theta_n = moment_bound_check(builder, plaque, phi, cfg.moment_s, n, cfg.coupling.max_leaves)
                dlhs, dtheta_n = center_derivative_moment(builder, plaque, n, cfg.coupling.max_leaves)
                rows.append({
                    "n": n,
                    "sum_lhs": lhs,
                    "sum_theta_n": theta_n,
                    "sum_ok": lhs <= theta_n * 1.05,
                    "center_lhs": dlhs,
                    "center_theta_n": dtheta_n,
                    "center_ok": dlhs <= dtheta_n * 1.05,
                    "oscillation": oscillation_check(builder, plaque, phi, n),
                    "plaque_mean": plaque_birkhoff_mean(builder.f, plaque, phi, n),
                })
            payload[_tag(s)] = {
                "theta1": rows[0]["sum_theta_n"],
                "center_theta1": rows[0]["center_theta_n"],
                "s_mom": cfg.moment_s,
                "rows": rows,
            }
        self._write("moment_bound", payload)
        return payload

    def run_coupling(self) -> dict:
        cfg, params = self.config, self.config.coupling
        payload: Dict[str, dict] = {"fits": {}}
        for s in cfg.s_values:
            builder = self.builder(s)
            plaques = self.plaques(s, 2 * cfg.coupling_pairs, stream=1)
            records, pairs = [], []
            for i in tqdm(range(len(plaques) // 2), desc=f"coupling s={s}", disable=self.quiet):
                Y1, Y2 = PlaqueRectangle(plaques[2 * i]), PlaqueRectangle(plaques[2 * i + 1])
                try:
                    rec = run_coupling(Y1, Y2, params, builder, quiet=True)
                except DATorusError as exc:
                    logger.warning(f"Coupling pair {i} failed: {exc}")
                    pairs.append({"pair": i, "error": str(exc)})
                    continue
                records.append(rec)
                fr = rec.first_runs[0] if rec.first_runs else None
                pairs.append({
                    "pair": i,
                    "first_run": fr.to_dict() if fr else None,
                    "first_run_positive": bool(fr is not None and fr.matched_mass > 0),
                    "first_run_above_bound": bool(fr is not None and fr.matched_mass >= fr.positive_mass_bound),
                    "coupled_mass": rec.coupled_mass,
                    "uncoupled_mass": rec.uncoupled_mass,
                    "conservation_error": rec.conservation_error,
                    "runs": rec.runs,
                })

            summary: dict = {"pairs": pairs, "params": params.model_dump(by_alias=True)}
            if records:
                merged = _merge(records)
                stem = f"coupling_tail_{_tag(s)}"
                write_series(self.series_dir / f"{stem}.csv", tail_series(merged), self.fingerprint, self.seed)
                try:
                    tail = tail_statistics(merged)
                    summary["tail_fit"] = tail.to_dict()
                except InsufficientSignal as exc:
                    logger.warning(f"Coupling tail not fitted: {exc}")
                    summary["tail_fit"] = None
                    summary["tail_reason"] = str(exc)
                payload["fits"][stem] = summary["tail_fit"]
                summary["C1"] = matched_distance_check(merged, builder.f, 20)
                summary["rho1"] = params.rho1
                summary["C1_contraction"] = matched_distance_check(merged, builder.f, 20, rho=params.contraction_rate)
                summary["contraction_rate"] = params.contraction_rate
                summary["uncoupled_fraction"] = merged.uncoupled_mass / merged.initial_mass
                summary["pn_masses"] = {str(k): v for k, v in sorted(merged.pn_masses.items())}
                summary["coupled_fraction"] = merged.coupled_mass / merged.initial_mass
                summary["distance_violations"] = merged.distance_violations
                summary["failed_first_runs"] = merged.failed_first_runs
                summary["overflow_mass"] = merged.overflow_mass
                write_json(
                    self.output_dir / f"coupling_records_{_tag(s)}.json",
                    {"records": [r.to_dict() for r in records]}, self.fingerprint, self.seed,
                )
            q1, a0 = hyperbolic_block_mass(plaques[0], params, builder, cfg.block_n) if plaques else (0.0, 0.0)
            summary["q1_hat"], summary["a0_hat"] = q1, a0
            payload[_tag(s)] = summary
        self._write("coupling", payload)
        return payload

    def run_plots(self) -> dict:
        fits: Dict[str, RateFit] = {}
        for name in ("correlations", "deviations", "coupling"):
            path = self.output_dir / f"{name}.json"
            if not path.exists():
                continue
            for stem, fd in json.loads(path.read_text()).get("fits", {}).items():
                if fd is not None:
                    fits[stem] = RateFit(
                        fd["log_intercept"], fd["rate"], fd["r_squared"], tuple(fd["fit_range"]), fd["points_used"],
                    )
        plotter = RatePlotter(str(self.output_dir / "plots"))
        charts = plotter.plot_directory(self.series_dir, fits)
        payload = {"charts": [str(p) for p in charts]}
        self._write("plots", payload)
        return payload

    def run_all(self) -> dict:
        """Full pipeline plus a summary of the checks it measured"""
        logger.info("\n" + "=" * 80)
        logger.info("STARTING FULL PIPELINE")
        logger.info("=" * 80 + "\n")

        steps: List[Tuple[str, Callable[[], dict]]] = [
            ("spectrum", self.run_spectrum),
            ("verify-ph", self.run_verify_ph),
            ("solve-h", self.run_solve_h),
            ("plaques", self.run_plaques),
            ("lyapunov", self.run_lyapunov),
            ("correlations", self.run_correlations),
            ("deviations", self.run_deviations),
            ("moment-bound", self.run_moment_bound),
            ("coupling", self.run_coupling),
            ("plots", self.run_plots),
        ]
        for i, (name, step) in enumerate(steps, 1):
            logger.info(f"\n🔹 Step {i}/{len(steps)}: {name}")
            step()

        # continuity radius: half a partition box side
        delta = linear_partition(self.spectral, self.config.boxes_per_axis).side / 2.0
        summary = {}
        for s in self.config.s_values:
            t = _tag(s)
            lyap, moment, coup = self.results["lyapunov"][t], self.results["moment_bound"][t], self.results["coupling"][t]
            center = lyap["exponents"]["c"]["value"]
            tail_fit = coup.get("tail_fit")
            rho = tail_fit["tau"] if tail_fit and np.isfinite(tail_fit["rate"]) else self.config.coupling.contraction_rate
            summary[t] = {
                "verified": self.results["verify_ph"][t]["verified"],
                "center_exponent": center,
                "predicted_tau": predicted_tau(self._ph[s].lambda5_min, 0.5, rho),
                "parameter_checks": self.config.coupling.check_consistency(
                    center, moment["theta1"], moment["s_mom"], delta,
                ),
            }
        self._write("summary", summary)

        logger.info("\n" + "=" * 80)
        logger.info("✅ PIPELINE COMPLETE!")
        logger.info("=" * 80 + "\n")
        return summary

    def run(self, subcommand: str) -> dict:
        if subcommand not in SUBCOMMANDS:
            raise ValueError(f"Unknown subcommand: {subcommand}")
        method = getattr(self, "run_" + subcommand.replace("-", "_"))
        return method()
