"""
Experiment Configuration
Validated pydantic model tree for all experiments, loaded from TOML with DATORUS_* overrides
"""

import hashlib
import json
import logging
import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import List, Literal, Optional, Tuple, Union

import numpy as np
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from src.core.coupling import CouplingParams
from src.core.da_family import BumpSpec
from src.core.ergodic_stats import ObservableSpec
from src.core.torus_linalg import COMPANION_MATRIX, TorusPoint
from src.utils.errors import ConfigInvalid

logger = logging.getLogger(__name__)

load_dotenv()


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)


class BumpConfig(_Strict):
    center: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    radius: float = Field(0.3, gt=0, lt=0.5)
    kind: Literal["radial", "center_odd"] = "center_odd"

    def build(self) -> BumpSpec:
        return BumpSpec(TorusPoint(tuple(float(c) % 1.0 for c in self.center)), self.radius, self.kind)  # type: ignore[arg-type]


class ObservableConfig(_Strict):
    """Descriptor of one observable; nodegrid values are drawn from the seed"""

    name: str
    kind: Literal["character", "cusp", "nodegrid", "constant"]
    holder_exp: float = Field(0.5, gt=0, lt=1)
    k: Tuple[int, int, int] = (1, 0, 0)
    center: Tuple[float, float, float] = (0.5, 0.5, 0.5)
    grid_n: int = Field(8, ge=2)
    constant: float = 0.0

    def build(self, seed: int = 0) -> ObservableSpec:
        if self.kind == "character":
            return ObservableSpec.character(self.k, self.holder_exp)
        if self.kind == "cusp":
            return ObservableSpec.cusp(self.center, self.holder_exp)
        if self.kind == "nodegrid":
            digest = int(hashlib.sha256(self.name.encode()).hexdigest()[:8], 16)
            rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, digest])))
            values = rng.uniform(-1.0, 1.0, (self.grid_n,) * 3)
            return ObservableSpec.nodegrid(values, self.holder_exp)
        return ObservableSpec.const(self.constant)


class ObservablePair(_Strict):
    phi: str
    psi: str


def _default_observables() -> List[ObservableConfig]:
    return [
        ObservableConfig(name="char_100", kind="character", k=(1, 0, 0)),
        ObservableConfig(name="char_011", kind="character", k=(0, 1, 1)),
        ObservableConfig(name="cusp_a", kind="cusp", center=(0.5, 0.5, 0.5)),
        ObservableConfig(name="cusp_b", kind="cusp", center=(0.25, 0.75, 0.5)),
    ]


def _default_pairs() -> List[ObservablePair]:
    return [
        ObservablePair(phi="char_100", psi="char_100"),
        ObservablePair(phi="char_011", psi="char_011"),
        ObservablePair(phi="cusp_a", psi="cusp_b"),
    ]


class ExperimentConfig(_Strict):
    """All experiment knobs; defaults are the acceptance-scale settings"""

    matrix: List[List[int]] = Field(default_factory=lambda: [list(r) for r in COMPANION_MATRIX])
    orient: bool = False
    bump: BumpConfig = Field(default_factory=BumpConfig)
    s: Union[float, List[float]] = 0.05
    power: int = Field(3, ge=1, description="Iterate N analyzed in place of f")

    grid_n: int = Field(64, ge=4, description="Displacement grid nodes per axis")
    depth: int = Field(60, ge=1, description="Orbit-sum truncation depth")
    h_tolerance: float = Field(1e-6, gt=0)
    test_n: int = Field(17, ge=2)
    inversion_tol: float = Field(1e-9, gt=0)

    frame_grid_n: int = Field(32, ge=4)
    frame_iters: int = Field(40, ge=1)
    frame_tolerance: float = Field(1e-6, gt=0)
    verify_grid_n: int = Field(64, ge=16)
    cone_angle: float = Field(0.3, gt=0, lt=1.5)

    boxes_per_axis: int = Field(2, ge=1)
    plaque_step: float = Field(0.02, gt=0)
    n_plaques: int = Field(100, ge=1)

    n_max: int = Field(25, ge=1)
    sample_count: int = Field(1_000_000, ge=10)
    exponent_samples: int = Field(100_000, ge=10)
    orbit_length: int = Field(50, ge=1)
    contracting_n: int = Field(5, ge=1)
    seed: int = Field(0, ge=0, lt=2 ** 64)

    observables: List[ObservableConfig] = Field(default_factory=_default_observables)
    correlation_pairs: List[ObservablePair] = Field(default_factory=_default_pairs)
    deviation_observable: str = "char_100"
    deviation_eps: float = Field(0.1, gt=0)
    deviation_n: List[int] = Field(default_factory=lambda: list(range(5, 41, 5)))

    moment_s: float = Field(0.5, gt=0)
    moment_n: int = Field(5, ge=1)
    moment_shift: float = Field(0.1, ge=0)

    coupling: CouplingParams = Field(default_factory=CouplingParams)
    coupling_pairs: int = Field(20, ge=1)
    block_n: int = Field(4, ge=1)

    output_dir: str = "results"
    cache_dir: str = "cache"
    threads: Optional[int] = Field(None, ge=1)
    quiet: bool = False

    @field_validator("matrix")
    @classmethod
    def _square(cls, m: List[List[int]]) -> List[List[int]]:
        if len(m) != 3 or any(len(r) != 3 for r in m):
            raise ValueError("matrix must be 3x3")
        return m

    @field_validator("s")
    @classmethod
    def _amplitudes(cls, s):
        values = s if isinstance(s, list) else [s]
        if not values or any(v < 0 for v in values):
            raise ValueError("amplitudes must be non-negative")
        return s

    @property
    def s_values(self) -> List[float]:
        return [float(v) for v in (self.s if isinstance(self.s, list) else [self.s])]

    def observable(self, name: str) -> ObservableSpec:
        for obs in self.observables:
            if obs.name == name:
                return obs.build(self.seed)
        raise ConfigInvalid(f"Unknown observable: {name}")

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json", by_alias=True), sort_keys=True, separators=(",", ":"))

    def fingerprint(self) -> str:
        """SHA-256 of the canonical JSON dump"""
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()

    def fingerprint_bytes(self) -> bytes:
        return bytes.fromhex(self.fingerprint())


def _apply_env(data: dict) -> dict:
    env = {
        "output_dir": os.getenv("DATORUS_OUTPUT_DIR"),
        "cache_dir": os.getenv("DATORUS_CACHE_DIR"),
        "threads": os.getenv("DATORUS_THREADS"),
    }
    for key, value in env.items():
        if value is not None and key not in data:
            data[key] = value
    return data


def load_config(path: Optional[str] = None, **overrides) -> ExperimentConfig:
    """
    Read a TOML config, apply DATORUS_* environment overrides and explicit overrides

    Raises:
        ConfigInvalid: unreadable file, unknown key or failed validation
    """
    data: dict = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                data = tomllib.load(fh)
        except (OSError, tomllib.TOMLDecodeError) as exc:
            raise ConfigInvalid(f"Cannot read config {path}: {exc}") from exc

    data = _apply_env(data)
    data.update({k: v for k, v in overrides.items() if v is not None})
    try:
        config = ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigInvalid(str(exc)) from exc

    logger.info(f"✓ Config loaded ({path or 'defaults'}), fingerprint {config.fingerprint()[:12]}")
    return config


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise TypeError(f"Cannot write {type(v).__name__} as TOML")


def defaults_toml() -> str:
    """The default config as TOML text (tables for nested models, arrays of tables for lists)"""
    data = ExperimentConfig().model_dump(mode="json", by_alias=True)
    scalars, tables, arrays = [], [], []
    for key, value in data.items():
        if value is None:
            continue
        if isinstance(value, dict):
            body = "\n".join(f"{k} = {_toml_value(v)}" for k, v in value.items() if v is not None)
            tables.append(f"[{key}]\n{body}")
        elif isinstance(value, list) and value and isinstance(value[0], dict):
            for item in value:
                body = "\n".join(f"{k} = {_toml_value(v)}" for k, v in item.items() if v is not None)
                arrays.append(f"[[{key}]]\n{body}")
        else:
            scalars.append(f"{key} = {_toml_value(value)}")
    return "\n".join(scalars) + "\n\n" + "\n\n".join(tables + arrays) + "\n"
