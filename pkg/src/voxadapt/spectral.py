"""3D Fourier decomposition and low-frequency amplitude transfer between domains.

The appearance of a volume lives mostly in its amplitude spectrum while the
anatomy lives in the phase. Swapping the low-frequency amplitude box of one
volume with another's transfers appearance without moving structure. The swap
fraction is chosen adaptively from the histogram distance of the two inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatchError
from .volume import ScalarVolume, Shape3, Spacing3, histogram

# Largest possible Euclidean distance between two probability histograms,
# attained by one-hot vectors on different bins.
MAX_HIST_DISTANCE = float(np.sqrt(2.0))

BETA_MIN = 0.1
BETA_MAX = 1.0


@dataclass(frozen=True, eq=False)
class Spectrum:
    """Center-shifted amplitude/phase of a volume's 3D FFT (DC at index N//2)."""

    shape: Shape3
    spacing: Spacing3
    amplitude: np.ndarray
    phase: np.ndarray

    def __post_init__(self):
        amp = np.asarray(self.amplitude, dtype=np.float64)
        pha = np.asarray(self.phase, dtype=np.float64)
        if amp.shape != self.shape.as_tuple() or pha.shape != self.shape.as_tuple():
            raise ShapeMismatchError("amplitude/phase shape does not match declared shape")
        if amp.min() < 0:
            raise ValueError("amplitude spectrum must be non-negative")
        object.__setattr__(self, "amplitude", amp)
        object.__setattr__(self, "phase", pha)


@dataclass(frozen=True, eq=False)
class LowFreqMask:
    """Binary centered-box membership over shifted frequencies.

    The half-extent along an axis of size N is min(floor(beta * N / 2), N // 2),
    so beta = 1 covers the whole spectrum.
    """

    shape: Shape3
    beta: float
    membership: np.ndarray

    def __post_init__(self):
        if not (BETA_MIN <= self.beta <= BETA_MAX):
            raise ValueError(f"beta must lie in [{BETA_MIN}, {BETA_MAX}], got {self.beta}")
        m = np.asarray(self.membership, dtype=bool)
        if m.shape != self.shape.as_tuple():
            raise ShapeMismatchError("mask shape does not match declared shape")
        object.__setattr__(self, "membership", m)


def make_mask(shape: Shape3, beta: float) -> LowFreqMask:
    """Centered axis-aligned box mask covering the low-frequency amplitude."""
    member = np.ones(shape.as_tuple(), dtype=bool)
    for axis, n in enumerate(shape.as_tuple()):
        center = n // 2
        extent = min(int(np.floor(beta * n / 2.0)), n // 2)
        lo = max(center - extent, 0)
        hi = min(center + extent, n - 1)
        along = np.zeros(n, dtype=bool)
        along[lo:hi + 1] = True
        sl = [None, None, None]
        sl[axis] = slice(None)
        member &= along[tuple(sl)]
    return LowFreqMask(shape, float(beta), member)


def decompose(v: ScalarVolume) -> Spectrum:
    """FFT of a volume, split into center-shifted amplitude and phase."""
    f = np.fft.fftshift(np.fft.fftn(v.data))
    return Spectrum(v.shape, v.spacing, np.abs(f), np.angle(f))


def reconstruct(spec: Spectrum) -> ScalarVolume:
    """Invert `decompose`; keeps the real part of the inverse FFT."""
    f = spec.amplitude * np.exp(1j * spec.phase)
    x = np.fft.ifftn(np.fft.ifftshift(f))
    return ScalarVolume(spec.shape, spec.spacing, x.real)


def amplitude_swap(content: ScalarVolume, style: ScalarVolume, beta: float) -> ScalarVolume:
    """Replace the low-frequency amplitude of `content` with `style`'s.

    The output keeps the full phase of `content`, so it retains the content's
    structure while adopting the style volume's appearance. beta controls the
    swapped fraction of the spectrum.
    """
    if content.shape != style.shape:
        raise ShapeMismatchError(
            f"content shape {content.shape.as_tuple()} != style shape {style.shape.as_tuple()}"
        )
    if not (BETA_MIN <= beta <= BETA_MAX):
        raise ValueError(f"beta must lie in [{BETA_MIN}, {BETA_MAX}], got {beta}")
    spec_c = decompose(content)
    spec_s = decompose(style)
    mask = make_mask(content.shape, beta).membership
    amp = np.where(mask, spec_s.amplitude, spec_c.amplitude)
    f = np.fft.ifftshift(amp * np.exp(1j * spec_c.phase))
    x = np.fft.ifftn(f)
    residue = float(np.abs(x.imag).max())
    scale = max(1.0, float(np.abs(x.real).max()))
    if residue > 1e-9 * scale:
        raise ValueError(f"imaginary residue {residue:.3e} exceeds tolerance after swap")
    return ScalarVolume(content.shape, content.spacing, x.real)


def adaptive_beta(x_s: ScalarVolume, x_t: ScalarVolume, bins: int, alpha: float) -> float:
    """Histogram-adaptive swap fraction.

    The farther apart the two intensity histograms, the more of the spectrum is
    swapped. alpha is a per-pair jitter factor in [0.5, 1.5]; the result is
    clamped into [0.1, 1.0].
    """
    if not (0.5 <= alpha <= 1.5):
        raise ValueError(f"alpha must lie in [0.5, 1.5], got {alpha}")
    h_s = histogram(x_s, bins)
    h_t = histogram(x_t, bins)
    d_hist = float(np.linalg.norm(h_s - h_t))
    beta = max(BETA_MIN, (d_hist / MAX_HIST_DISTANCE) * alpha)
    return float(min(beta, BETA_MAX))
