"""Box-based structure perturbation: cut a patch from a donor volume into a recipient.

Used by consistency training to perturb anatomy while appearance stays intact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InfeasibleBoxError, ShapeMismatchError
from .volume import ScalarVolume, Shape3

MAX_ATTEMPTS = 100


@dataclass(frozen=True)
class BoxRegion:
    """Axis-aligned box given by corner indices and positive extents."""

    corner: tuple[int, int, int]
    size: tuple[int, int, int]

    def __post_init__(self):
        if any(c < 0 for c in self.corner) or any(s < 1 for s in self.size):
            raise ValueError("corner must be non-negative and size positive")

    def slices(self) -> tuple[slice, slice, slice]:
        return tuple(slice(c, c + s) for c, s in zip(self.corner, self.size))

    def fraction(self, shape: Shape3) -> float:
        return float(np.prod(self.size)) / shape.voxels


def sample_box(
    shape: Shape3,
    frac_range: tuple[float, float],
    rng: np.random.Generator,
    cubic: bool = False,
) -> BoxRegion:
    """Draw a box whose volume fraction lies in frac_range, placed uniformly.

    By default extents are drawn independently per axis; `cubic` restricts the
    draw to cube-shaped boxes. Raises InfeasibleBoxError when no box fits.
    """
    lo, hi = frac_range
    if not (0.0 < lo <= hi < 1.0):
        raise ValueError(f"frac_range must satisfy 0 < lo <= hi < 1, got {frac_range}")
    dims = shape.as_tuple()
    total = shape.voxels
    if hi * total < 1.0:
        raise InfeasibleBoxError(f"fraction range {frac_range} is below one voxel for shape {dims}")

    if cubic:
        edges = [e for e in range(1, min(dims) + 1) if lo <= e ** 3 / total <= hi]
        if not edges:
            raise InfeasibleBoxError(f"no cube edge meets fraction range {frac_range} in {dims}")
        edge = int(edges[rng.integers(len(edges))])
        size = (edge, edge, edge)
    else:
        size = None
        for _ in range(MAX_ATTEMPTS):
            sd = int(rng.integers(1, dims[0] + 1))
            sh = int(rng.integers(1, dims[1] + 1))
            base = sd * sh
            w_lo = max(1, int(np.ceil(lo * total / base)))
            w_hi = min(dims[2], int(np.floor(hi * total / base)))
            if w_lo <= w_hi:
                size = (sd, sh, int(rng.integers(w_lo, w_hi + 1)))
                break
        if size is None:
            raise InfeasibleBoxError(
                f"could not place a box with fraction in {frac_range} after {MAX_ATTEMPTS} attempts"
            )

    corner = tuple(int(rng.integers(0, n - s + 1)) for n, s in zip(dims, size))
    return BoxRegion(corner, size)


def cutmix(recipient: ScalarVolume, donor: ScalarVolume, box: BoxRegion) -> ScalarVolume:
    """Donor voxels inside the box, recipient voxels verbatim everywhere else."""
    if recipient.shape != donor.shape:
        raise ShapeMismatchError("recipient and donor shapes must match")
    dims = recipient.shape.as_tuple()
    if any(c + s > n for c, s, n in zip(box.corner, box.size, dims)):
        raise ValueError(f"box {box} exceeds volume shape {dims}")
    out = recipient.data.copy()
    out[box.slices()] = donor.data[box.slices()]
    return recipient.with_data(out)
