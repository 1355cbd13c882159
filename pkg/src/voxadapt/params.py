"""Flat, ordered parameter store for the reference models.

A ParamVector is a single float64 array plus a layout descriptor mapping named
blocks to shapes. It is immutable; optimizer steps and moving-average blends
build new vectors. Checkpoints use a UVF1-style container: magic, length-
prefixed JSON layout, then the raw little-endian float64 payload.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    HeaderError,
    MagicMismatchError,
    PayloadLengthError,
    ShapeMismatchError,
    TruncatedPayloadError,
)

PARAM_MAGIC = b"UVFPARM1"

Layout = tuple[tuple[str, tuple[int, ...]], ...]


@dataclass(frozen=True, eq=False)
class ParamVector:
    """Named, contiguous parameter blocks backed by one flat float64 array."""

    data: np.ndarray
    layout: Layout

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64).ravel()
        layout = tuple((str(name), tuple(int(s) for s in shape)) for name, shape in self.layout)
        total = sum(int(np.prod(shape)) for _, shape in layout)
        if arr.size != total:
            raise ShapeMismatchError(
                f"parameter array has {arr.size} values but layout declares {total}"
            )
        if not np.all(np.isfinite(arr)):
            raise ValueError("parameter vector contains non-finite values")
        arr = np.ascontiguousarray(arr)
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "layout", layout)

    def __len__(self) -> int:
        return int(self.data.size)

    def block(self, name: str) -> np.ndarray:
        """Read-only view of one named block, reshaped to its declared shape."""
        offset = 0
        for bname, shape in self.layout:
            size = int(np.prod(shape))
            if bname == name:
                return self.data[offset:offset + size].reshape(shape)
            offset += size
        raise KeyError(f"no parameter block named {name!r}")

    def with_data(self, data) -> "ParamVector":
        return ParamVector(np.asarray(data, dtype=np.float64), self.layout)

    @classmethod
    def zeros(cls, layout: Layout) -> "ParamVector":
        total = sum(int(np.prod(shape)) for _, shape in layout)
        return cls(np.zeros(total), layout)

    @classmethod
    def from_blocks(cls, blocks: list[tuple[str, np.ndarray]]) -> "ParamVector":
        layout = tuple((name, tuple(np.asarray(arr).shape)) for name, arr in blocks)
        data = np.concatenate([np.asarray(arr, dtype=np.float64).ravel() for _, arr in blocks])
        return cls(data, layout)


def save_params(params: ParamVector, path) -> None:
    header = {"blocks": [[name, list(shape)] for name, shape in params.layout], "dtype": "f64"}
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(PARAM_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(params.data.astype("<f8").tobytes())


def load_params(path) -> ParamVector:
    raw = Path(path).read_bytes()
    if len(raw) < len(PARAM_MAGIC) + 4:
        raise TruncatedPayloadError("file too short for a parameter container")
    if raw[: len(PARAM_MAGIC)] != PARAM_MAGIC:
        raise MagicMismatchError(f"bad magic {raw[:len(PARAM_MAGIC)]!r}")
    (hlen,) = struct.unpack("<I", raw[len(PARAM_MAGIC):len(PARAM_MAGIC) + 4])
    start = len(PARAM_MAGIC) + 4
    if len(raw) < start + hlen:
        raise TruncatedPayloadError("truncated parameter header")
    try:
        header = json.loads(raw[start:start + hlen].decode("utf-8"))
        layout = tuple((str(n), tuple(int(x) for x in shape)) for n, shape in header["blocks"])
    except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
        raise HeaderError(f"malformed parameter header: {exc}") from exc
    expected = sum(int(np.prod(s)) for _, s in layout) * 8
    payload = raw[start + hlen:]
    if len(payload) < expected:
        raise TruncatedPayloadError(f"truncated payload: expected {expected}, got {len(payload)}")
    if len(payload) > expected:
        raise PayloadLengthError(f"payload length mismatch: expected {expected}, got {len(payload)}")
    return ParamVector(np.frombuffer(payload, dtype="<f8").astype(np.float64), layout)
