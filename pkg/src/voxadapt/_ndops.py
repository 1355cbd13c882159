"""Low-level dense-array helpers shared by the deformation, model, and phantom code.

Everything here operates on plain float64 ndarrays and is deterministic:
no reduction whose result depends on thread count, no in-place surprises.
"""

from __future__ import annotations

import numpy as np

# Grid coordinates within 1e-9 of an integer voxel index are snapped onto it so
# that grid-aligned resampling is exact (identity transforms, whole-voxel shifts).
SNAP_TOL = 1e-9


def axis_coords(n: int) -> np.ndarray:
    """Normalized voxel-center coordinates along one axis, in [-1, 1]."""
    return (2.0 * np.arange(n) + 1.0) / n - 1.0


def base_grid(shape: tuple[int, int, int]) -> np.ndarray:
    """Identity sampling grid of shape (3, d, h, w) in normalized coordinates."""
    d, h, w = shape
    zz, yy, xx = np.meshgrid(axis_coords(d), axis_coords(h), axis_coords(w), indexing="ij")
    return np.stack([zz, yy, xx])


def _unnormalize(grid: np.ndarray, shape: tuple[int, int, int]) -> np.ndarray:
    """Map normalized coordinates to fractional voxel indices (volume spans [-1, 1])."""
    u = np.empty_like(grid)
    for ax, n in enumerate(shape):
        u[ax] = (grid[ax] + 1.0) * (n / 2.0) - 0.5
    snapped = np.rint(u)
    near = np.abs(u - snapped) < SNAP_TOL
    u[near] = snapped[near]
    return u


def trilinear_sample(vol: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """Resample `vol` at normalized `grid` coordinates, zero-filled out of bounds."""
    d, h, w = vol.shape
    u = _unnormalize(grid, (d, h, w))
    i0 = np.floor(u).astype(np.int64)
    frac = u - i0
    out = np.zeros(u.shape[1:], dtype=np.float64)
    for dz in (0, 1):
        wz = frac[0] if dz else 1.0 - frac[0]
        iz = i0[0] + dz
        okz = (iz >= 0) & (iz < d)
        for dy in (0, 1):
            wy = frac[1] if dy else 1.0 - frac[1]
            iy = i0[1] + dy
            oky = (iy >= 0) & (iy < h)
            for dx in (0, 1):
                wx = frac[2] if dx else 1.0 - frac[2]
                ix = i0[2] + dx
                ok = okz & oky & (ix >= 0) & (ix < w)
                vals = vol[np.clip(iz, 0, d - 1), np.clip(iy, 0, h - 1), np.clip(ix, 0, w - 1)]
                out += wz * wy * wx * np.where(ok, vals, 0.0)
    return out


def nearest_sample(vol: np.ndarray, grid: np.ndarray, fill=0) -> np.ndarray:
    """Nearest-neighbor resampling on the same grid convention as trilinear_sample."""
    d, h, w = vol.shape
    u = _unnormalize(grid, (d, h, w))
    idx = np.floor(u + 0.5).astype(np.int64)
    ok = (
        (idx[0] >= 0) & (idx[0] < d)
        & (idx[1] >= 0) & (idx[1] < h)
        & (idx[2] >= 0) & (idx[2] < w)
    )
    vals = vol[
        np.clip(idx[0], 0, d - 1),
        np.clip(idx[1], 0, h - 1),
        np.clip(idx[2], 0, w - 1),
    ]
    return np.where(ok, vals, fill)


def box_filter1d(arr: np.ndarray, width: int, axis: int) -> np.ndarray:
    """Normalized box filter along one axis; values outside the array count as zero."""
    if width == 1:
        return arr.astype(np.float64, copy=True)
    if width % 2 == 0 or width < 1:
        raise ValueError(f"box filter width must be odd and >= 1, got {width}")
    half = width // 2
    moved = np.moveaxis(np.asarray(arr, dtype=np.float64), axis, 0)
    n = moved.shape[0]
    padded = np.zeros((n + 2 * half,) + moved.shape[1:], dtype=np.float64)
    padded[half:half + n] = moved
    csum = np.zeros((padded.shape[0] + 1,) + moved.shape[1:], dtype=np.float64)
    np.cumsum(padded, axis=0, out=csum[1:])
    smoothed = (csum[width:width + n] - csum[:n]) / width
    return np.moveaxis(smoothed, 0, axis)


def box_filter3d(vol: np.ndarray, width: int) -> np.ndarray:
    """Separable 3D normalized box filter with zero boundary."""
    out = vol
    for axis in range(3):
        out = box_filter1d(out, width, axis)
    return out


def trilinear_resize(vol: np.ndarray, shape: tuple[int, int, int]) -> np.ndarray:
    """Resize a 3D array with trilinear interpolation, edge-clamped."""
    src = np.asarray(vol, dtype=np.float64)
    coords = []
    for ax, n_out in enumerate(shape):
        n_in = src.shape[ax]
        u = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        coords.append(np.clip(u, 0.0, n_in - 1.0))
    uz, uy, ux = np.meshgrid(*coords, indexing="ij")
    i0 = [np.floor(u).astype(np.int64) for u in (uz, uy, ux)]
    frac = [u - i for u, i in zip((uz, uy, ux), i0)]
    out = np.zeros(shape, dtype=np.float64)
    dims = src.shape
    for dz in (0, 1):
        wz = frac[0] if dz else 1.0 - frac[0]
        iz = np.minimum(i0[0] + dz, dims[0] - 1)
        for dy in (0, 1):
            wy = frac[1] if dy else 1.0 - frac[1]
            iy = np.minimum(i0[1] + dy, dims[1] - 1)
            for dx in (0, 1):
                wx = frac[2] if dx else 1.0 - frac[2]
                ix = np.minimum(i0[2] + dx, dims[2] - 1)
                out += wz * wy * wx * src[iz, iy, ix]
    return out


def gradient_magnitude(vol: np.ndarray) -> np.ndarray:
    """Central-difference gradient magnitude (one-sided at the faces)."""
    gz, gy, gx = np.gradient(np.asarray(vol, dtype=np.float64))
    return np.sqrt(gz * gz + gy * gy + gx * gx)
