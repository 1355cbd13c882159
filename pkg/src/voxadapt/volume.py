"""Core 3D volume types, intensity utilities, and the UVF1 on-disk format.

All volume types are immutable after construction (backing arrays are made
non-writeable) and every operation here is a pure function, so values can be
shared freely across threads.

Voxel layout is fixed package-wide: row-major (C order) with the `w` axis
fastest. Scalar and probability data are float64; labels are small integers.

UVF1 byte layout (normative for this package):
    bytes 0..7    magic b"UVFORGE1"
    bytes 8..11   header length, uint32 little-endian
    header        UTF-8 JSON with keys: shape [d,h,w], spacing [sd,sh,sw],
                  dtype ("f32"|"f64"|"u8"), kind ("scalar"|"label"|"prob"),
                  num_classes (label/prob only)
    payload       raw little-endian voxel data, C order
                  (prob volumes are stored channel-major: C blocks of d*h*w)
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    DegenerateRangeError,
    HeaderError,
    MagicMismatchError,
    PayloadLengthError,
    ShapeMismatchError,
    TruncatedPayloadError,
)

MAGIC = b"UVFORGE1"

_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8"), "u8": np.dtype("u1")}


@dataclass(frozen=True)
class Shape3:
    """Voxel counts (d, h, w); all axes at least 1."""

    d: int
    h: int
    w: int

    def __post_init__(self):
        for name in ("d", "h", "w"):
            n = getattr(self, name)
            if not isinstance(n, (int, np.integer)) or n < 1:
                raise ValueError(f"shape axis {name} must be a positive integer, got {n!r}")

    def as_tuple(self) -> tuple[int, int, int]:
        return (int(self.d), int(self.h), int(self.w))

    @property
    def voxels(self) -> int:
        return int(self.d) * int(self.h) * int(self.w)


@dataclass(frozen=True)
class Spacing3:
    """Millimetres per voxel along each axis; all strictly positive."""

    sd: float
    sh: float
    sw: float

    def __post_init__(self):
        for name in ("sd", "sh", "sw"):
            s = getattr(self, name)
            if not (s > 0):
                raise ValueError(f"spacing {name} must be > 0, got {s!r}")

    def as_tuple(self) -> tuple[float, float, float]:
        return (float(self.sd), float(self.sh), float(self.sw))


def _freeze(arr: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(arr)
    out.flags.writeable = False
    return out


@dataclass(frozen=True, eq=False)
class ScalarVolume:
    """Real-valued 3D image; data shape (d, h, w), float64, finite."""

    shape: Shape3
    spacing: Spacing3
    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.shape != self.shape.as_tuple():
            raise ShapeMismatchError(
                f"data shape {arr.shape} does not match declared shape {self.shape.as_tuple()}"
            )
        if not np.all(np.isfinite(arr)):
            raise ValueError("scalar volume contains non-finite values")
        object.__setattr__(self, "data", _freeze(arr))

    @classmethod
    def from_array(cls, arr, spacing=(1.0, 1.0, 1.0)) -> "ScalarVolume":
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim != 3:
            raise ShapeMismatchError(f"expected a 3D array, got ndim={arr.ndim}")
        return cls(Shape3(*arr.shape), Spacing3(*spacing), arr)

    def with_data(self, arr) -> "ScalarVolume":
        return ScalarVolume(self.shape, self.spacing, np.asarray(arr, dtype=np.float64))


@dataclass(frozen=True, eq=False)
class LabelVolume:
    """Integer class map with values in [0, num_classes)."""

    shape: Shape3
    spacing: Spacing3
    num_classes: int
    data: np.ndarray

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        arr = np.asarray(self.data)
        if not np.issubdtype(arr.dtype, np.integer):
            raise ValueError(f"label data must be integer-typed, got {arr.dtype}")
        arr = arr.astype(np.int64)
        if arr.shape != self.shape.as_tuple():
            raise ShapeMismatchError(
                f"data shape {arr.shape} does not match declared shape {self.shape.as_tuple()}"
            )
        if arr.size and (arr.min() < 0 or arr.max() >= self.num_classes):
            raise ValueError(
                f"label values must lie in [0, {self.num_classes}), "
                f"got range [{arr.min()}, {arr.max()}]"
            )
        object.__setattr__(self, "data", _freeze(arr))

    @classmethod
    def from_array(cls, arr, num_classes: int, spacing=(1.0, 1.0, 1.0)) -> "LabelVolume":
        arr = np.asarray(arr)
        if arr.ndim != 3:
            raise ShapeMismatchError(f"expected a 3D array, got ndim={arr.ndim}")
        return cls(Shape3(*arr.shape), Spacing3(*spacing), int(num_classes), arr)

    def one_hot(self) -> np.ndarray:
        """One-hot encoding, shape (C, d, h, w), float64."""
        classes = np.arange(self.num_classes).reshape(-1, 1, 1, 1)
        return (self.data[None] == classes).astype(np.float64)


@dataclass(frozen=True, eq=False)
class ProbVolume:
    """Per-voxel class probability field, shape (C, d, h, w).

    Channel values are non-negative and sum to 1 within 1e-6 at every voxel;
    this is validated on construction so every producing operation is checked.
    """

    shape: Shape3
    spacing: Spacing3
    num_classes: int
    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        expected = (self.num_classes,) + self.shape.as_tuple()
        if arr.shape != expected:
            raise ShapeMismatchError(f"prob data shape {arr.shape}, expected {expected}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("probability volume contains non-finite values")
        if arr.min() < -1e-12:
            raise ValueError(f"negative channel probability: {arr.min()}")
        sums = arr.sum(axis=0)
        worst = np.abs(sums - 1.0).max()
        if worst > 1e-6:
            raise ValueError(f"channel sums deviate from 1 by {worst:.3e} (> 1e-6)")
        object.__setattr__(self, "data", _freeze(arr))

    @classmethod
    def from_array(cls, arr, spacing=(1.0, 1.0, 1.0)) -> "ProbVolume":
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim != 4:
            raise ShapeMismatchError(f"expected a (C, d, h, w) array, got ndim={arr.ndim}")
        return cls(Shape3(*arr.shape[1:]), Spacing3(*spacing), arr.shape[0], arr)

    def argmax_labels(self) -> LabelVolume:
        """Per-voxel argmax; ties resolve to the lowest class id."""
        return LabelVolume(self.shape, self.spacing, self.num_classes,
                           np.argmax(self.data, axis=0))


def normalize_minmax(v: ScalarVolume) -> ScalarVolume:
    """Affinely map intensities onto [0, 1]; min goes to 0 and max to 1."""
    lo = float(v.data.min())
    hi = float(v.data.max())
    if hi <= lo:
        raise DegenerateRangeError("degenerate intensity range: volume is constant")
    return v.with_data((v.data - lo) / (hi - lo))


def histogram(v: ScalarVolume, bins: int) -> np.ndarray:
    """Normalized grayscale histogram of a [0, 1] volume.

    Bin i covers [i/bins, (i+1)/bins); the last bin is closed so 1.0 is counted.
    The result is non-negative and sums to 1 within 1e-9.
    """
    if bins < 2:
        raise ValueError(f"bins must be >= 2, got {bins}")
    data = v.data
    if data.min() < 0.0 or data.max() > 1.0:
        raise ValueError("histogram input must be normalized to [0, 1]")
    counts, _ = np.histogram(data, bins=bins, range=(0.0, 1.0))
    return counts.astype(np.float64) / data.size


def _header_bytes(header: dict) -> bytes:
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_volume(v, path) -> None:
    """Write a Scalar/Label/Prob volume in the UVF1 format."""
    if isinstance(v, ScalarVolume):
        kind, dtype, payload = "scalar", "f64", v.data
        header = {}
    elif isinstance(v, LabelVolume):
        if v.num_classes > 256:
            raise ValueError("u8 label payload supports at most 256 classes")
        kind, dtype, payload = "label", "u8", v.data.astype(np.uint8)
        header = {"num_classes": int(v.num_classes)}
    elif isinstance(v, ProbVolume):
        kind, dtype, payload = "prob", "f64", v.data
        header = {"num_classes": int(v.num_classes)}
    else:
        raise TypeError(f"cannot serialize object of type {type(v).__name__}")
    header.update(
        shape=list(v.shape.as_tuple()),
        spacing=list(v.spacing.as_tuple()),
        dtype=dtype,
        kind=kind,
    )
    blob = _header_bytes(header)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(np.ascontiguousarray(payload, dtype=_DTYPES[dtype]).tobytes())


def load_volume(path):
    """Read a UVF1 file back into the matching volume type."""
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 4:
        raise TruncatedPayloadError(f"file too short for a UVF1 header: {len(raw)} bytes")
    if raw[: len(MAGIC)] != MAGIC:
        raise MagicMismatchError(
            f"bad magic {raw[:len(MAGIC)]!r}, expected {MAGIC!r}"
        )
    (hlen,) = struct.unpack("<I", raw[len(MAGIC):len(MAGIC) + 4])
    start = len(MAGIC) + 4
    if len(raw) < start + hlen:
        raise TruncatedPayloadError("truncated payload: header extends past end of file")
    try:
        header = json.loads(raw[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise HeaderError(f"unreadable header JSON: {exc}") from exc
    try:
        shape = Shape3(*(int(x) for x in header["shape"]))
        spacing = Spacing3(*(float(x) for x in header["spacing"]))
        dtype = header["dtype"]
        kind = header["kind"]
    except (KeyError, TypeError, ValueError) as exc:
        raise HeaderError(f"malformed header fields: {exc}") from exc
    if dtype not in _DTYPES:
        raise HeaderError(f"unsupported dtype {dtype!r}")

    channels = 1
    if kind == "prob":
        channels = int(header.get("num_classes", 0))
        if channels < 2:
            raise HeaderError("prob volume header must declare num_classes >= 2")
    elif kind == "label":
        if "num_classes" not in header:
            raise HeaderError("label volume header must declare num_classes")
    elif kind != "scalar":
        raise HeaderError(f"unsupported kind {kind!r}")

    expected = shape.voxels * channels * _DTYPES[dtype].itemsize
    payload = raw[start + hlen:]
    if len(payload) < expected:
        raise TruncatedPayloadError(
            f"truncated payload: expected {expected} bytes, got {len(payload)}"
        )
    if len(payload) > expected:
        raise PayloadLengthError(
            f"payload length mismatch: expected {expected} bytes, got {len(payload)}"
        )
    arr = np.frombuffer(payload, dtype=_DTYPES[dtype])

    if kind == "scalar":
        return ScalarVolume(shape, spacing, arr.astype(np.float64).reshape(shape.as_tuple()))
    if kind == "label":
        return LabelVolume(
            shape, spacing, int(header["num_classes"]),
            arr.astype(np.int64).reshape(shape.as_tuple()),
        )
    return ProbVolume(
        shape, spacing, channels,
        arr.astype(np.float64).reshape((channels,) + shape.as_tuple()),
    )
