"""On-disk formats: weight files, feature files, token tables, run configs.

All binary formats are little-endian.

Weights (``TSCW``)::

    magic "TSCW" | version u32 | count u32
    per tensor: name_len u16 | name utf-8 | rank u8 | dims u32 * rank | float32 payload

Features (``TSCF``)::

    magic "TSCF" | version u32 | T u32 | d_feat u32 | frame_ms f32 | float32 payload (T x d_feat)
"""

from __future__ import annotations

import dataclasses
import os
import struct
import tempfile
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .errors import FormatError, InvalidConfig

WEIGHTS_MAGIC = b"TSCW"
FEATURES_MAGIC = b"TSCF"
VERSION = 1
BLANK_TOKEN = "<blank>"


def atomic_write(path: str | Path, data: bytes | str) -> None:
    """Write to a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    raw = data.encode() if isinstance(data, str) else data
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(raw)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_weights(tensors: Mapping[str, np.ndarray]) -> bytes:
    out = [WEIGHTS_MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        key = name.encode("utf-8")
        out.append(struct.pack("<H", len(key)) + key)
        out.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def decode_weights(raw: bytes) -> dict[str, np.ndarray]:
    if raw[:4] != WEIGHTS_MAGIC:
        raise FormatError("not a TSCW weight file")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise FormatError(f"unsupported weight file version {version}")
    pos, out = 12, {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", raw, pos)
            name = raw[pos + 2:pos + 2 + n].decode("utf-8")
            pos += 2 + n
            (rank,) = struct.unpack_from("<B", raw, pos)
            dims = struct.unpack_from(f"<{rank}I", raw, pos + 1)
            pos += 1 + 4 * rank
            size = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(raw, dtype="<f4", count=size, offset=pos).reshape(dims)
            out[name] = arr.copy()
            pos += 4 * size
    except (struct.error, ValueError) as exc:
        raise FormatError(f"truncated weight file: {exc}") from exc
    if pos != len(raw):
        raise FormatError(f"{len(raw) - pos} trailing bytes in weight file")
    return out


def save_weights(path, tensors: Mapping[str, np.ndarray]) -> None:
    atomic_write(path, encode_weights(tensors))


def load_weights(path) -> dict[str, np.ndarray]:
    return decode_weights(Path(path).read_bytes())


def encode_features(feats: np.ndarray, frame_ms: float = 10.0) -> bytes:
    feats = np.ascontiguousarray(feats, dtype="<f4")
    if feats.ndim != 2:
        raise FormatError("features must be a (T, d_feat) matrix")
    t, d = feats.shape
    return FEATURES_MAGIC + struct.pack("<IIIf", VERSION, t, d, frame_ms) + feats.tobytes()


def decode_features(raw: bytes) -> tuple[np.ndarray, float]:
    if raw[:4] != FEATURES_MAGIC:
        raise FormatError("not a TSCF feature file")
    version, t, d, frame_ms = struct.unpack_from("<IIIf", raw, 4)
    if version != VERSION:
        raise FormatError(f"unsupported feature file version {version}")
    payload = raw[20:]
    if len(payload) != 4 * t * d:
        raise FormatError(f"payload is {len(payload)} bytes, expected {4 * t * d}")
    return np.frombuffer(payload, dtype="<f4").reshape(t, d).copy(), frame_ms


def save_features(path, feats: np.ndarray, frame_ms: float = 10.0) -> None:
    atomic_write(path, encode_features(feats, frame_ms))


def load_features(path) -> tuple[np.ndarray, float]:
    return decode_features(Path(path).read_bytes())


def load_tokens(path) -> list[str]:
    tokens = Path(path).read_text(encoding="utf-8").split("\n")
    if tokens and tokens[-1] == "":
        tokens.pop()
    if not tokens or tokens[0] != BLANK_TOKEN:
        raise FormatError(f"token table must start with {BLANK_TOKEN!r}")
    return tokens


def save_tokens(path, tokens: list[str]) -> None:
    if not tokens or tokens[0] != BLANK_TOKEN:
        raise FormatError(f"token table must start with {BLANK_TOKEN!r}")
    atomic_write(path, "".join(t + "\n" for t in tokens))


def detokenize(ids, tokens: list[str]) -> str:
    return "".join(tokens[i] if 0 <= i < len(tokens) else f"<{i}>" for i in ids)


# -- run config ------------------------------------------------------------------

def _coerce(value: str, kind: Any):
    if kind is bool or kind == "bool":
        low = value.strip().lower()
        if low not in ("1", "0", "true", "false", "yes", "no"):
            raise InvalidConfig(f"not a boolean: {value!r}")
        return low in ("1", "true", "yes")
    if kind in (int, "int"):
        return int(value)
    if kind in (float, "float"):
        return float(value)
    return value.strip()


def parse_config_text(text: str, schema: Mapping[str, Any]) -> dict[str, Any]:
    """Flat ``key=value`` lines (``#`` comments allowed); unknown keys are rejected."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidConfig(f"line {n}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in schema:
            raise InvalidConfig(f"line {n}: unknown key {key!r}")
        try:
            out[key] = _coerce(value, schema[key])
        except ValueError as exc:
            raise InvalidConfig(f"line {n}: bad value for {key}: {value!r}") from exc
    return out


def dataclass_schema(*classes) -> dict[str, Any]:
    schema = {}
    for cls in classes:
        for f in dataclasses.fields(cls):
            schema[f.name] = f.type if not isinstance(f.type, str) else f.type
    return schema
