"""
Artifact Writers
CSV series via pandas and stable-key JSON reports, each stamped with fingerprint and seed
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict

import numpy as np
import pandas as pd

from src.core.ergodic_stats import EstimateSeries

logger = logging.getLogger(__name__)


def _plain(obj: Any) -> Any:
    """numpy scalars and arrays to JSON-native values"""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def write_json(path, payload: Dict[str, Any], fingerprint: str, seed: int) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    body = {**_plain(payload), "config_fingerprint": fingerprint, "seed": seed}
    path.write_text(json.dumps(body, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    logger.info(f"✓ Wrote {path}")
    return path


def write_series(path, series: EstimateSeries, fingerprint: str, seed: int) -> Path:
    """n,estimate,stderr CSV plus a JSON sidecar with provenance"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    series.to_frame().to_csv(path, index=False, float_format="%.17g", lineterminator="\n")
    write_json(
        path.with_suffix(".meta.json"),
        {"name": series.name, "sample_count": series.sample_count, "series_seed": series.seed},
        fingerprint,
        seed,
    )
    return path


def read_series(path) -> EstimateSeries:
    df = pd.read_csv(path)
    missing = {"n", "estimate", "stderr"} - set(df.columns)
    if missing:
        raise ValueError(f"{path}: missing columns {sorted(missing)}")
    meta_path = Path(path).with_suffix(".meta.json")
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    return EstimateSeries(
        df["n"].to_numpy(dtype=int),
        df["estimate"].to_numpy(dtype=float),
        df["stderr"].to_numpy(dtype=float),
        int(meta.get("sample_count", len(df))),
        int(meta.get("series_seed", 0)),
        meta.get("name", Path(path).stem),
    )
