"""Segmentation quality metrics: volumetric overlap and surface distances.

Surfaces are boundary voxels under 6-connectivity with the array border
counting as outside; surface points live in physical millimetre coordinates
(voxel index times spacing). Nearest-surface distances use a KD-tree and are
checked against a quadratic brute-force oracle in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import ShapeMismatchError, UndefinedSurfaceMetricError
from .volume import LabelVolume

DEFAULT_NSD_TOL_MM = 1.0


@dataclass(frozen=True, eq=False)
class SurfaceSet:
    """Boundary voxel centers of one class, in millimetres."""

    points: np.ndarray  # (n, 3)

    def __len__(self) -> int:
        return int(self.points.shape[0])


@dataclass(frozen=True)
class ClassMetrics:
    dsc: float
    nsd: float | None
    asd: float | None


@dataclass(frozen=True)
class MetricReport:
    """Per-class metrics and their means.

    Classes absent from both volumes are excluded entirely; classes present in
    exactly one contribute DSC 0 and missing (None) surface metrics. Means of
    surface metrics run over the classes where they are defined.
    """

    per_class: dict[int, ClassMetrics]
    mean_dsc: float
    mean_nsd: float | None
    mean_asd: float | None

    def to_dict(self) -> dict:
        return {
            "per_class": {
                str(c): {"dsc": m.dsc, "nsd": m.nsd, "asd": m.asd}
                for c, m in sorted(self.per_class.items())
            },
            "mean_dsc": self.mean_dsc,
            "mean_nsd": self.mean_nsd,
            "mean_asd": self.mean_asd,
        }


def _check_shapes(pred: LabelVolume, gt: LabelVolume) -> None:
    if pred.shape != gt.shape:
        raise ShapeMismatchError(
            f"prediction shape {pred.shape.as_tuple()} != ground truth shape {gt.shape.as_tuple()}"
        )


def _boundary_mask(mask: np.ndarray) -> np.ndarray:
    """Voxels of the class with at least one 6-neighbor outside it (or on the border)."""
    interior = mask.copy()
    for axis in range(3):
        for step in (1, -1):
            shifted = np.zeros_like(mask)
            src = [slice(None)] * 3
            dst = [slice(None)] * 3
            if step == 1:
                src[axis] = slice(1, None)
                dst[axis] = slice(None, -1)
            else:
                src[axis] = slice(None, -1)
                dst[axis] = slice(1, None)
            shifted[tuple(dst)] = mask[tuple(src)]
            interior &= shifted
    return mask & ~interior


def surface_points(vol: LabelVolume, cls: int) -> SurfaceSet:
    """Surface voxel centers of one class in millimetres."""
    mask = vol.data == cls
    boundary = _boundary_mask(mask)
    idx = np.argwhere(boundary).astype(np.float64)
    return SurfaceSet(idx * np.asarray(vol.spacing.as_tuple()))


def dsc(pred: LabelVolume, gt: LabelVolume, cls: int) -> float:
    """Volumetric overlap 2|A&B| / (|A| + |B|); 1 when both empty, 0 when one is."""
    _check_shapes(pred, gt)
    a = pred.data == cls
    b = gt.data == cls
    na = int(a.sum())
    nb = int(b.sum())
    if na == 0 and nb == 0:
        return 1.0
    if na == 0 or nb == 0:
        return 0.0
    return 2.0 * float(np.logical_and(a, b).sum()) / (na + nb)


def _surface_pair(pred: LabelVolume, gt: LabelVolume, cls: int) -> tuple[SurfaceSet, SurfaceSet]:
    sp = surface_points(pred, cls)
    sg = surface_points(gt, cls)
    if len(sp) == 0 or len(sg) == 0:
        raise UndefinedSurfaceMetricError(
            f"undefined surface metric: class {cls} has an empty surface"
        )
    return sp, sg


def _nearest_distances(a: SurfaceSet, b: SurfaceSet) -> np.ndarray:
    dists, _ = cKDTree(b.points).query(a.points, k=1)
    return np.asarray(dists, dtype=np.float64)


def asd(pred: LabelVolume, gt: LabelVolume, cls: int) -> float:
    """Symmetric average surface distance in millimetres."""
    _check_shapes(pred, gt)
    sp, sg = _surface_pair(pred, gt, cls)
    d_pg = _nearest_distances(sp, sg)
    d_gp = _nearest_distances(sg, sp)
    return 0.5 * (float(d_pg.mean()) + float(d_gp.mean()))


def nsd(pred: LabelVolume, gt: LabelVolume, cls: int, tol_mm: float = DEFAULT_NSD_TOL_MM) -> float:
    """Fraction of surface points of each mask within tol_mm of the other's surface."""
    if tol_mm <= 0:
        raise ValueError(f"tol_mm must be > 0, got {tol_mm}")
    _check_shapes(pred, gt)
    sp, sg = _surface_pair(pred, gt, cls)
    d_pg = _nearest_distances(sp, sg)
    d_gp = _nearest_distances(sg, sp)
    hits = int((d_pg <= tol_mm).sum()) + int((d_gp <= tol_mm).sum())
    return hits / (len(sp) + len(sg))


def compute_report(
    pred: LabelVolume,
    gt: LabelVolume,
    tol_mm: float = DEFAULT_NSD_TOL_MM,
    include_background: bool = False,
) -> MetricReport:
    """Per-class DSC/NSD/ASD plus means, following the absence conventions above."""
    _check_shapes(pred, gt)
    if pred.num_classes != gt.num_classes:
        raise ShapeMismatchError("prediction and ground truth class counts differ")
    first = 0 if include_background else 1
    per_class: dict[int, ClassMetrics] = {}
    for cls in range(first, gt.num_classes):
        in_pred = bool((pred.data == cls).any())
        in_gt = bool((gt.data == cls).any())
        if not in_pred and not in_gt:
            continue
        if in_pred and in_gt:
            per_class[cls] = ClassMetrics(
                dsc=dsc(pred, gt, cls),
                nsd=nsd(pred, gt, cls, tol_mm),
                asd=asd(pred, gt, cls),
            )
        else:
            per_class[cls] = ClassMetrics(dsc=0.0, nsd=None, asd=None)
    if not per_class:
        raise UndefinedSurfaceMetricError("no class present in either volume")
    dscs = [m.dsc for m in per_class.values()]
    nsds = [m.nsd for m in per_class.values() if m.nsd is not None]
    asds = [m.asd for m in per_class.values() if m.asd is not None]
    return MetricReport(
        per_class=per_class,
        mean_dsc=float(np.mean(dscs)),
        mean_nsd=float(np.mean(nsds)) if nsds else None,
        mean_asd=float(np.mean(asds)) if asds else None,
    )
