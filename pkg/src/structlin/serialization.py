"""JSON round trip for structured matrices.

Arrays are stored as base64-encoded little-endian float64 bytes, so a
save/load cycle reproduces every parameter bit for bit.
"""
from __future__ import annotations

import base64
import json
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .structures import StructuredMatrix, from_params

FORMAT = "structlin.matrix"
VERSION = 1


def encode_array(a) -> dict:
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "dtype": "<f8", "data": base64.b64encode(a.tobytes()).decode("ascii")}


def decode_array(d: dict) -> np.ndarray:
    try:
        raw = base64.b64decode(d["data"], validate=True)
        shape = tuple(int(s) for s in d["shape"])
        arr = np.frombuffer(raw, dtype=d.get("dtype", "<f8")).astype(np.float64)
        return arr.reshape(shape)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"malformed array record: {exc}") from None


def to_dict(m: StructuredMatrix) -> dict:
    return {
        "format": FORMAT,
        "version": VERSION,
        "family": m.family,
        "meta": m.meta(),
        "params": [encode_array(p) for p in m.params()],
    }


def from_dict(d: dict) -> StructuredMatrix:
    if not isinstance(d, dict) or d.get("format") != FORMAT:
        raise ConfigError(f"not a {FORMAT} document")
    if d.get("version") != VERSION:
        raise ConfigError(f"unsupported version {d.get('version')!r}")
    try:
        params = [decode_array(p) for p in d["params"]]
        return from_params(d["family"], d["meta"], params)
    except KeyError as exc:
        raise ConfigError(f"missing field {exc}") from None


def dumps(m: StructuredMatrix) -> str:
    return json.dumps(to_dict(m), indent=2, sort_keys=True)


def loads(text: str) -> StructuredMatrix:
    try:
        return from_dict(json.loads(text))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc}") from None


def save(m: StructuredMatrix, path) -> None:
    Path(path).write_text(dumps(m))


def load(path) -> StructuredMatrix:
    return loads(Path(path).read_text())


def load_dense(path) -> np.ndarray:
    """Dense matrix from a headerless CSV or from any saved structure (materialized)."""
    path = Path(path)
    if path.suffix.lower() == ".json":
        return load(path).materialize()
    try:
        return np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from None
