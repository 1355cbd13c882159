"""Synthetic two-domain phantom volumes with shared anatomy and distinct styles.

Anatomy is a set of nested, noise-deformed ellipsoid shells derived only from
the subject seed; the rendered image additionally depends on the style. Style A
maps deeper classes to brighter intensities with fine texture and low noise.
Style B inverts the intensity ordering, uses coarse texture, a multiplicative
bias field, and stronger noise, which makes intensity-driven models trained on
one style fail on the other. Same seed, different style: identical labels,
very differently rendered images.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._ndops import base_grid, box_filter3d, trilinear_resize
from .volume import LabelVolume, ScalarVolume, Shape3, Spacing3, normalize_minmax

DOMAIN_A = "A"
DOMAIN_B = "B"

# Anatomy constants: outer ellipsoid radius (normalized units), per-axis radius
# jitter, center jitter, and the amplitude/grid of the boundary noise field.
OUTER_RADIUS = 0.8
RADIUS_JITTER = (0.9, 1.05)
CENTER_JITTER = 0.08
SHELL_NOISE_AMP = 0.07
SHELL_NOISE_GRID = 6
INNER_THRESHOLD = 0.4

# Style constants.
STYLE_A_NOISE = 0.02
STYLE_B_NOISE = 0.05
STYLE_A_TEXTURE = 0.06
STYLE_B_TEXTURE = 0.10
STYLE_A_BIAS = 0.04
STYLE_B_BIAS = 0.25  # multiplicative field in [1 - b, 1 + b]
COARSE_TEXTURE_GRID = 6
BIAS_GRID = 4


@dataclass(frozen=True)
class SubjectSpec:
    """One phantom subject: seed fixes anatomy, style fixes appearance."""

    seed: int
    shape: Shape3 = Shape3(48, 48, 48)
    num_classes: int = 5
    style: str = DOMAIN_A
    spacing: Spacing3 = Spacing3(1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.style not in (DOMAIN_A, DOMAIN_B):
            raise ValueError(f"style must be {DOMAIN_A!r} or {DOMAIN_B!r}, got {self.style!r}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")


def _smooth_field(rng: np.random.Generator, grid: int, shape: tuple[int, int, int]) -> np.ndarray:
    """Coarse uniform noise in [-1, 1], lightly smoothed, upsampled to shape."""
    coarse = rng.uniform(-1.0, 1.0, size=(grid, grid, grid))
    coarse = box_filter3d(coarse, 3)
    field = trilinear_resize(coarse, shape)
    peak = np.abs(field).max()
    return field / peak if peak > 0 else field


def _shell_labels(spec: SubjectSpec, rng: np.random.Generator) -> np.ndarray:
    dims = spec.shape.as_tuple()
    center = rng.uniform(-CENTER_JITTER, CENTER_JITTER, size=3)
    radii = OUTER_RADIUS * rng.uniform(*RADIUS_JITTER, size=3)
    grid = base_grid(dims)
    rho = np.sqrt(sum(((grid[a] - center[a]) / radii[a]) ** 2 for a in range(3)))
    rho = rho * (1.0 + SHELL_NOISE_AMP * _smooth_field(rng, SHELL_NOISE_GRID, dims))
    shells = spec.num_classes - 1
    thresholds = np.linspace(1.0, INNER_THRESHOLD, shells)
    labels = np.zeros(dims, dtype=np.int64)
    for level in thresholds:  # decreasing: deeper shells overwrite shallower ones
        labels[rho <= level] += 1
    return labels


def gen_subject(spec: SubjectSpec) -> tuple[ScalarVolume, LabelVolume]:
    """Deterministically generate one (image, labels) pair for the spec."""
    dims = spec.shape.as_tuple()
    shells = spec.num_classes - 1
    if min(dims) // 2 < max(8, 2 * shells):
        raise ValueError(
            f"shape {dims} too small to carve {shells} shells; need a radius of at "
            f"least {max(8, 2 * shells)} voxels"
        )

    anatomy_rng = np.random.default_rng(np.random.SeedSequence([101, int(spec.seed)]))
    labels = _shell_labels(spec, anatomy_rng)

    style_id = 0 if spec.style == DOMAIN_A else 1
    looks_rng = np.random.default_rng(np.random.SeedSequence([202, int(spec.seed), style_id]))

    if spec.style == DOMAIN_A:
        base = np.linspace(0.15, 0.95, spec.num_classes)
        img = base[labels]
        img = img + STYLE_A_TEXTURE * _fine_texture(looks_rng, dims)
        img = img + STYLE_A_BIAS * _smooth_field(looks_rng, BIAS_GRID, dims)
        img = img + looks_rng.normal(0.0, STYLE_A_NOISE, size=dims)
    else:
        base = np.linspace(0.9, 0.1, spec.num_classes)
        img = base[labels]
        img = img * (1.0 + STYLE_B_BIAS * _smooth_field(looks_rng, BIAS_GRID, dims))
        img = img + STYLE_B_TEXTURE * _smooth_field(looks_rng, COARSE_TEXTURE_GRID, dims)
        img = img + looks_rng.normal(0.0, STYLE_B_NOISE, size=dims)

    image = normalize_minmax(ScalarVolume(spec.shape, spec.spacing, img))
    return image, LabelVolume(spec.shape, spec.spacing, spec.num_classes, labels)


def _fine_texture(rng: np.random.Generator, shape: tuple[int, int, int]) -> np.ndarray:
    noise = rng.uniform(-1.0, 1.0, size=shape)
    tex = box_filter3d(noise, 3)
    peak = np.abs(tex).max()
    return tex / peak if peak > 0 else tex


def gen_dataset(
    n: int,
    style: str,
    seed_base: int,
    out_dir,
    shape: Shape3 = Shape3(48, 48, 48),
    num_classes: int = 5,
    spacing: Spacing3 = Spacing3(1.0, 1.0, 1.0),
    split: str = "train",
    prefix: str = "s",
) -> list[dict]:
    """Generate n subjects with seeds seed_base..seed_base+n-1 and write them.

    Returns manifest entries: id, seed, style, split, and relative file paths.
    """
    from .volume import save_volume

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(n):
        seed = seed_base + i
        spec = SubjectSpec(seed=seed, shape=shape, num_classes=num_classes,
                           style=style, spacing=spacing)
        image, labels = gen_subject(spec)
        sid = f"{prefix}{i:03d}"
        img_name = f"{sid}_img.uvf"
        lbl_name = f"{sid}_lbl.uvf"
        save_volume(image, out_dir / img_name)
        save_volume(labels, out_dir / lbl_name)
        entries.append({
            "id": sid,
            "seed": seed,
            "style": style,
            "split": split,
            "image": img_name,
            "labels": lbl_name,
        })
    return entries


def write_manifest(entries: list[dict], path) -> None:
    Path(path).write_text(
        json.dumps({"subjects": entries}, sort_keys=True, indent=1), encoding="utf-8"
    )


def read_manifest(path) -> list[dict]:
    return json.loads(Path(path).read_text(encoding="utf-8"))["subjects"]
