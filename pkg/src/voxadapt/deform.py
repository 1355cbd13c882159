"""Combined affine + smoothed elastic deformation for volumes and label maps.

The transform builds a per-voxel sampling grid in normalized coordinates
([-1, 1] spans the volume): an affine part (angle-axis rotation, anisotropic
scale, shift) plus a random displacement field drawn on a coarse grid, box
smoothed, and trilinearly upsampled. Images are resampled trilinearly with
zeros outside the volume; label maps use nearest-neighbor on the same grid
with background fill, so image and labels stay aligned.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._ndops import base_grid, box_filter1d, nearest_sample, trilinear_resize, trilinear_sample
from .errors import ShapeMismatchError
from .volume import LabelVolume, ScalarVolume, Shape3


@dataclass(frozen=True)
class AffineParams:
    """Angle-axis rotation (radians), per-axis scale, shift in normalized units."""

    rotation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    scale: tuple[float, float, float] = (1.0, 1.0, 1.0)
    shift: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if np.linalg.norm(self.rotation) >= np.pi:
            raise ValueError("rotation vector magnitude must be < pi")
        if any(s <= 0 for s in self.scale):
            raise ValueError("scale components must be strictly positive")

    def matrix(self) -> np.ndarray:
        """3x4 matrix [diag(scale) @ R | shift] acting on normalized coordinates."""
        rot = angle_axis_to_rotation(np.asarray(self.rotation, dtype=np.float64))
        mat = np.asarray(self.scale, dtype=np.float64)[:, None] * rot
        return np.concatenate([mat, np.asarray(self.shift, dtype=np.float64)[:, None]], axis=1)


@dataclass(frozen=True)
class ElasticParams:
    """Coarse random displacement-field settings.

    window: odd box-filter width; field_size: coarse grid extent per axis;
    alpha: displacement scale in normalized units; smooth_iters: filter passes.
    """

    window: int = 5
    field_size: int = 8
    alpha: float = 0.03
    smooth_iters: int = 3

    def __post_init__(self):
        if self.window < 1 or self.window % 2 == 0:
            raise ValueError("window must be odd and >= 1")
        if self.field_size < 2:
            raise ValueError("field_size must be >= 2")
        if self.smooth_iters < 0:
            raise ValueError("smooth_iters must be >= 0")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")


@dataclass(frozen=True, eq=False)
class DisplacementField:
    """Per-voxel (dz, dy, dx) offsets in normalized coordinates."""

    shape: Shape3
    components: np.ndarray  # (3, d, h, w)

    def __post_init__(self):
        arr = np.asarray(self.components, dtype=np.float64)
        if arr.shape != (3,) + self.shape.as_tuple():
            raise ShapeMismatchError("displacement components must be (3, d, h, w)")
        if not np.all(np.isfinite(arr)):
            raise ValueError("displacement field contains non-finite values")
        object.__setattr__(self, "components", arr)


def angle_axis_to_rotation(r: np.ndarray) -> np.ndarray:
    """Rodrigues rotation matrix for an angle-axis vector with |r| < pi."""
    r = np.asarray(r, dtype=np.float64)
    theta = float(np.linalg.norm(r))
    if theta >= np.pi:
        raise ValueError("rotation vector magnitude must be < pi")
    if theta < 1e-12:
        return np.eye(3)
    axis = r / theta
    k = np.array([
        [0.0, -axis[2], axis[1]],
        [axis[2], 0.0, -axis[0]],
        [-axis[1], axis[0], 0.0],
    ])
    return np.eye(3) + np.sin(theta) * k + (1.0 - np.cos(theta)) * (k @ k)


def build_affine_grid(matrix: np.ndarray, shape: Shape3) -> np.ndarray:
    """Per-voxel source coordinates g(p) = A @ [p_norm, 1], shape (3, d, h, w).

    Voxel index i maps to the center coordinate (2*i + 1)/N - 1.
    """
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.shape != (3, 4):
        raise ShapeMismatchError(f"affine matrix must be 3x4, got {matrix.shape}")
    if abs(np.linalg.det(matrix[:, :3])) < 1e-12:
        raise ValueError("affine 3x3 block is singular")
    grid = base_grid(shape.as_tuple())
    out = np.einsum("ij,jdhw->idhw", matrix[:, :3], grid)
    return out + matrix[:, 3][:, None, None, None]


def elastic_field(params: ElasticParams, shape: Shape3, rng: np.random.Generator) -> DisplacementField:
    """Random displacement field: coarse uniform noise, scaled, smoothed, upsampled."""
    f = params.field_size
    coarse = params.alpha * rng.uniform(-1.0, 1.0, size=(3, f, f, f))
    pad = params.window // 2
    if pad and params.smooth_iters:
        padded = np.zeros((3, f + 2 * pad, f + 2 * pad, f + 2 * pad))
        padded[:, pad:pad + f, pad:pad + f, pad:pad + f] = coarse
        coarse = padded
    for _ in range(params.smooth_iters):
        for axis in range(3):
            coarse = box_filter1d(coarse, params.window, axis + 1)
    if pad and params.smooth_iters:
        coarse = coarse[:, pad:pad + f, pad:pad + f, pad:pad + f]
    comps = np.stack([trilinear_resize(coarse[i], shape.as_tuple()) for i in range(3)])
    return DisplacementField(shape, comps)


def deformable_transform(
    img: ScalarVolume,
    lbl: LabelVolume | None,
    affine: AffineParams,
    elastic: ElasticParams,
    rng: np.random.Generator,
) -> tuple[ScalarVolume, LabelVolume | None]:
    """Apply one shared affine + elastic warp to an image and (optionally) labels."""
    if lbl is not None and lbl.shape != img.shape:
        raise ShapeMismatchError("image and label shapes must match")
    grid = build_affine_grid(affine.matrix(), img.shape)
    grid = grid + elastic_field(elastic, img.shape, rng).components
    warped = ScalarVolume(img.shape, img.spacing, trilinear_sample(img.data, grid))
    if lbl is None:
        return warped, None
    moved = nearest_sample(lbl.data, grid, fill=0)
    return warped, LabelVolume(lbl.shape, lbl.spacing, lbl.num_classes, moved)


@dataclass(frozen=True)
class DeformRanges:
    """Sampling ranges for random deformation parameters.

    rot_deg: per-axis rotation bound (degrees); scale/shift: per-axis uniform
    ranges; the elastic settings are passed through unchanged.
    """

    rot_deg: float = 10.0
    scale_lo: float = 0.9
    scale_hi: float = 1.1
    shift: float = 0.05
    elastic: ElasticParams = ElasticParams()

    def draw(self, rng: np.random.Generator) -> tuple[AffineParams, ElasticParams]:
        rot = np.deg2rad(rng.uniform(-self.rot_deg, self.rot_deg, size=3))
        scale = rng.uniform(self.scale_lo, self.scale_hi, size=3)
        shift = rng.uniform(-self.shift, self.shift, size=3)
        return AffineParams(tuple(rot), tuple(scale), tuple(shift)), self.elastic
