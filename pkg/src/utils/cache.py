"""
Field Cache
Binary cache of node grids (displacement u, invariant frames) keyed by a config fingerprint
"""

import hashlib
import json
import logging
from pathlib import Path
from typing import Callable, Optional, Tuple

import numpy as np

from src.utils.errors import CorruptCache

logger = logging.getLogger(__name__)

MAGIC = b"DATORUS1"
VERSION = 1

KIND_DISPLACEMENT = 1
KIND_FRAMES = 2

# channels per payload kind: u, then Ê^s, Ê^c, Ê^u and invariance residuals
CHANNELS = {KIND_DISPLACEMENT: 3, KIND_FRAMES: 12}

HEADER = np.dtype([
    ("magic", "S8"),
    ("version", "<u4"),
    ("kind", "<u4"),
    ("fingerprint", "V32"),
    ("dims", "<u4", (3,)),
])


def field_fingerprint(**parts) -> bytes:
    """SHA-256 of the sorted-key JSON of the inputs a field depends on"""
    return hashlib.sha256(json.dumps(parts, sort_keys=True, default=list).encode()).digest()


def write_field(path, values: np.ndarray, kind: int, fingerprint: bytes) -> Path:
    """
    Write an (n, n, n, c) grid: header, then c channel blocks of float64 in x-fastest order
    """
    values = np.asarray(values, dtype=float)
    if values.ndim != 4:
        raise ValueError(f"Cache grids must be (n, n, n, c); got shape {values.shape}")
    if values.shape[-1] != CHANNELS.get(kind):
        raise ValueError(f"Payload kind {kind} takes {CHANNELS.get(kind)} channels; got {values.shape[-1]}")
    if len(fingerprint) != 32:
        raise ValueError("Fingerprint must be 32 bytes")

    header = np.zeros(1, dtype=HEADER)
    header["magic"] = MAGIC
    header["version"] = VERSION
    header["kind"] = kind
    header["fingerprint"] = np.void(fingerprint)
    header["dims"] = values.shape[:3]

    blocks = [values[..., c].ravel(order="F") for c in range(values.shape[-1])]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(header.tobytes())
        fh.write(np.concatenate(blocks).astype("<f8").tobytes())
    logger.info(f"✅ Cached grid {values.shape} (kind {kind}) to {path}")
    return path


def read_header(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < HEADER.itemsize:
        raise CorruptCache(f"{path}: file shorter than the header")
    header = np.frombuffer(raw[:HEADER.itemsize], dtype=HEADER)[0]
    if bytes(header["magic"]) != MAGIC:
        raise CorruptCache(f"{path}: bad magic {bytes(header['magic'])!r}")
    if int(header["version"]) != VERSION:
        raise CorruptCache(f"{path}: cache version {int(header['version'])} not supported (expected {VERSION})")
    return header


def read_field(path, kind: int, fingerprint: Optional[bytes] = None) -> Optional[np.ndarray]:
    """
    Read a cached grid

    Returns:
        The (n, n, n, c) grid, or None when the fingerprint differs

    Raises:
        CorruptCache: wrong magic, version, kind or payload size
    """
    path = Path(path)
    header = read_header(path)
    if int(header["kind"]) != kind:
        raise CorruptCache(f"{path}: payload kind {int(header['kind'])}, expected {kind}")
    if fingerprint is not None and bytes(header["fingerprint"]) != fingerprint:
        logger.info(f"Cache {path} was built for another configuration")
        return None

    dims = tuple(int(d) for d in header["dims"])
    channels = CHANNELS[kind]
    payload = path.read_bytes()[HEADER.itemsize:]
    per_channel = int(np.prod(dims))
    if per_channel == 0 or channels == 0 or len(payload) != 8 * per_channel * channels:
        raise CorruptCache(
            f"{path}: payload of {len(payload)} bytes does not fit dims {dims} x {channels} channels"
        )

    data = np.frombuffer(payload, dtype="<f8")
    blocks = [data[c * per_channel:(c + 1) * per_channel].reshape(dims, order="F") for c in range(channels)]
    return np.stack(blocks, axis=-1).astype(float)


def cache_roundtrip(values: np.ndarray, path, kind: int = KIND_DISPLACEMENT, fingerprint: bytes = bytes(32)) -> np.ndarray:
    """Write then read back"""
    write_field(path, values, kind, fingerprint)
    out = read_field(path, kind, fingerprint)
    if out is None:
        raise CorruptCache(f"{path}: fingerprint changed between write and read")
    return out


def load_or_compute(
    path,
    kind: int,
    fingerprint: bytes,
    compute: Callable[[], Tuple[np.ndarray, dict]],
) -> Tuple[np.ndarray, dict]:
    """
    Return the cached grid for this fingerprint or compute and cache it

    compute returns the grid and scalar metadata (residuals, norms), kept in a sidecar
    JSON next to the grid.
    """
    path = Path(path)
    if path.exists():
        cached = read_field(path, kind, fingerprint)
        if cached is not None:
            logger.info(f"✓ Loaded cached grid from {path}")
            return cached, read_meta(path)
        # another configuration owns this file
        path = path.with_name(f"{path.stem}_{fingerprint.hex()[:12]}{path.suffix}")
        if path.exists():
            cached = read_field(path, kind, fingerprint)
            if cached is not None:
                return cached, read_meta(path)
    values, meta = compute()
    write_field(path, values, kind, fingerprint)
    path.with_suffix(".json").write_text(json.dumps(meta, sort_keys=True, indent=2))
    return values, meta


def read_meta(path) -> dict:
    sidecar = Path(path).with_suffix(".json")
    return json.loads(sidecar.read_text()) if sidecar.exists() else {}
