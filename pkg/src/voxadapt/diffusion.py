"""Conditional denoising-diffusion mathematics.

Implements the cosine noise schedule, the forward noising step, label
conditioning by channel concatenation of a learned per-class embedding,
the reverse (ancestral) sampling step, the L1 training objective, and the
deformation hooks used when assembling training pairs and sampling masks.

The denoiser itself is abstract here (`DenoiserInterface`); a reference
convolutional implementation and an analytic Gaussian oracle are provided
for training and testing respectively.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import numpy as np

from .deform import DeformRanges, deformable_transform
from .errors import ShapeMismatchError
from .losses import LossOut
from .volume import LabelVolume, ScalarVolume

DEFAULT_TIMESTEPS = 250
DEFAULT_SCHEDULE_OFFSET = 0.008
BETA_CLIP = (1e-8, 0.999)


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Per-timestep noise levels; arrays are indexed by t-1 for t in 1..timesteps."""

    timesteps: int
    beta: np.ndarray
    alpha: np.ndarray
    alphabar: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        if self.timesteps < 1:
            raise ValueError("timesteps must be >= 1")
        arrays = {}
        for name in ("beta", "alpha", "alphabar", "sigma"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != (self.timesteps,):
                raise ShapeMismatchError(f"{name} must have length {self.timesteps}")
            arrays[name] = arr
        if arrays["beta"].min() <= 0 or arrays["beta"].max() >= 1:
            raise ValueError("beta values must lie in (0, 1)")
        if np.abs(arrays["alpha"] - (1.0 - arrays["beta"])).max() > 1e-12:
            raise ValueError("alpha must equal 1 - beta")
        if np.abs(arrays["sigma"] - np.sqrt(arrays["beta"])).max() > 1e-12:
            raise ValueError("sigma must equal sqrt(beta)")
        ab = arrays["alphabar"]
        if ab.min() <= 0 or ab.max() > 1 or np.any(np.diff(ab) >= 0):
            raise ValueError("alphabar must be in (0, 1] and strictly decreasing")
        for name, arr in arrays.items():
            object.__setattr__(self, name, arr)


def cosine_schedule(timesteps: int = DEFAULT_TIMESTEPS,
                    offset: float = DEFAULT_SCHEDULE_OFFSET) -> NoiseSchedule:
    """Cosine retention schedule with squared-cosine shape and offset.

    Betas are clipped into (1e-8, 0.999) and the retained-signal products are
    recomputed from the clipped betas so the schedule identities hold exactly.
    """
    if timesteps < 2:
        raise ValueError(f"timesteps must be >= 2, got {timesteps}")
    if offset <= 0:
        raise ValueError(f"schedule offset must be > 0, got {offset}")
    t = np.arange(timesteps + 1, dtype=np.float64)
    g = np.cos(((t / timesteps + offset) / (1.0 + offset)) * np.pi / 2.0) ** 2
    raw = g / g[0]
    beta = np.clip(1.0 - raw[1:] / raw[:-1], *BETA_CLIP)
    alpha = 1.0 - beta
    alphabar = np.cumprod(alpha)
    return NoiseSchedule(timesteps, beta, alpha, alphabar, np.sqrt(beta))


def _vol_data(x) -> np.ndarray:
    return x.data if isinstance(x, ScalarVolume) else np.asarray(x, dtype=np.float64)


def _like(template, arr: np.ndarray):
    if isinstance(template, ScalarVolume):
        return template.with_data(arr)
    return arr


def _check_t(t: int, sched: NoiseSchedule) -> int:
    t = int(t)
    if not (1 <= t <= sched.timesteps):
        raise ValueError(f"timestep {t} out of range [1, {sched.timesteps}]")
    return t


def q_sample(x0, t: int, eps, sched: NoiseSchedule):
    """Forward noising: sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps."""
    t = _check_t(t, sched)
    ab = sched.alphabar[t - 1]
    out = np.sqrt(ab) * _vol_data(x0) + np.sqrt(1.0 - ab) * _vol_data(eps)
    return _like(x0, out)


def p_step(x_t, t: int, eps_hat, sched: NoiseSchedule, z):
    """One reverse step of ancestral sampling.

    z must be standard normal for t > 1 and zero at t = 1.
    """
    t = _check_t(t, sched)
    a = sched.alpha[t - 1]
    ab = sched.alphabar[t - 1]
    mean = (_vol_data(x_t) - ((1.0 - a) / np.sqrt(1.0 - ab)) * _vol_data(eps_hat)) / np.sqrt(a)
    out = mean + sched.sigma[t - 1] * _vol_data(z)
    return _like(x_t, out)


@dataclass(frozen=True, eq=False)
class ConditionEmbedder:
    """Linear per-class embedding: one-hot class vectors to `channels` values."""

    num_classes: int
    channels: int
    weight: np.ndarray  # (channels, num_classes)
    bias: np.ndarray    # (channels,)

    def __post_init__(self):
        w = np.asarray(self.weight, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64)
        if w.shape != (self.channels, self.num_classes) or b.shape != (self.channels,):
            raise ShapeMismatchError("embedder weight/bias shapes are inconsistent")
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)

    def embed(self, c: LabelVolume) -> np.ndarray:
        """Embedding field of shape (channels, d, h, w)."""
        if c.num_classes > self.num_classes:
            raise ShapeMismatchError(
                f"label has {c.num_classes} classes, embedder supports {self.num_classes}"
            )
        return self.weight[:, c.data] + self.bias[:, None, None, None]


def init_embedder(num_classes: int, channels: int, rng: np.random.Generator) -> ConditionEmbedder:
    weight = rng.normal(0.0, 1.0, size=(channels, num_classes))
    return ConditionEmbedder(num_classes, channels, weight, np.zeros(channels))


def embed_condition(x_t, c: LabelVolume, emb: ConditionEmbedder) -> np.ndarray:
    """Conditioned denoiser input: the noisy volume stacked with the embedded mask.

    Output has 1 + channels channels, shape (1 + E, d, h, w).
    """
    data = _vol_data(x_t)
    if data.shape != c.shape.as_tuple():
        raise ShapeMismatchError("noisy volume and condition mask shapes must match")
    return np.concatenate([data[None], emb.embed(c)], axis=0)


class DenoiserInterface(Protocol):
    """Noise predictor: maps a conditioned input stack and a timestep to an
    estimate of the injected noise, shaped like the volume."""

    def predict(self, x_hat: np.ndarray, t: int) -> np.ndarray: ...


class ZeroDenoiser:
    """Predicts zero noise everywhere; the reverse chain then stays Gaussian."""

    def predict(self, x_hat: np.ndarray, t: int) -> np.ndarray:
        return np.zeros_like(x_hat[0])


class AnalyticGaussianDenoiser:
    """Posterior-mean noise predictor for elementwise Gaussian data.

    For x0 ~ N(mean, var) i.i.d. per element, the conditional expectation of
    the injected noise given the noisy observation is linear in x_t; this is
    the exact minimum-MSE denoiser and serves as a closed-form oracle.
    """

    def __init__(self, mean: float, var: float, sched: NoiseSchedule):
        self.mean = float(mean)
        self.var = float(var)
        self.sched = sched

    def predict(self, x_hat: np.ndarray, t: int) -> np.ndarray:
        ab = self.sched.alphabar[_check_t(t, self.sched) - 1]
        x_t = x_hat[0]
        return np.sqrt(1.0 - ab) * (x_t - np.sqrt(ab) * self.mean) / (ab * self.var + 1.0 - ab)


def sample_loop(
    denoiser: DenoiserInterface,
    c: LabelVolume,
    emb: ConditionEmbedder,
    sched: NoiseSchedule,
    rng: np.random.Generator,
) -> ScalarVolume:
    """Generate one volume conditioned on a mask by iterating the reverse chain
    from pure noise down to t = 1, re-embedding the condition at every step."""
    shape = c.shape.as_tuple()
    x = rng.standard_normal(shape)
    for t in range(sched.timesteps, 0, -1):
        x_hat = np.concatenate([x[None], emb.embed(c)], axis=0)
        eps_hat = denoiser.predict(x_hat, t)
        z = rng.standard_normal(shape) if t > 1 else np.zeros(shape)
        a = sched.alpha[t - 1]
        ab = sched.alphabar[t - 1]
        x = (x - ((1.0 - a) / np.sqrt(1.0 - ab)) * eps_hat) / np.sqrt(a) + sched.sigma[t - 1] * z
    return ScalarVolume(c.shape, c.spacing, x)


def mae_loss(eps, eps_hat) -> LossOut:
    """Mean absolute error between true and predicted noise.

    The gradient with respect to the prediction is the elementwise sign scaled
    by 1/n, zero at exact ties.
    """
    e = _vol_data(eps)
    p = _vol_data(eps_hat)
    if e.shape != p.shape:
        raise ShapeMismatchError(f"noise shape {e.shape} != prediction shape {p.shape}")
    diff = p - e
    value = float(np.abs(diff).mean())
    return LossOut(value, (np.sign(diff) / diff.size,))


@dataclass(frozen=True, eq=False)
class TrainPair:
    """One diffusion training example: image, conditioning mask, and whether the
    mask is a trusted source annotation or a target-domain pseudo-label."""

    image: ScalarVolume
    label: LabelVolume
    domain: str  # "source" | "target"

    def __post_init__(self):
        if self.domain not in ("source", "target"):
            raise ValueError(f"domain must be 'source' or 'target', got {self.domain!r}")
        if self.image.shape != self.label.shape:
            raise ShapeMismatchError("pair image/label shapes must match")


def train_pair_assemble(
    pair: TrainPair,
    ranges: DeformRanges | None,
    rng: np.random.Generator,
) -> tuple[ScalarVolume, LabelVolume]:
    """Prepare one training pair.

    Source pairs get one shared random deformation applied to image and mask
    together (pseudo-labeled target pairs pass through unchanged, since their
    masks are already noisy). Pass ranges=None to disable deformation.
    """
    if pair.domain != "source" or ranges is None:
        return pair.image, pair.label
    affine, elastic = ranges.draw(rng)
    img, lbl = deformable_transform(pair.image, pair.label, affine, elastic, rng)
    return img, lbl


def deform_condition(
    label: LabelVolume,
    ranges: DeformRanges,
    rng: np.random.Generator,
) -> LabelVolume:
    """Sampling-time mask deformation; applies to source masks and pseudo-masks alike."""
    zeros = ScalarVolume(label.shape, label.spacing, np.zeros(label.shape.as_tuple()))
    affine, elastic = ranges.draw(rng)
    _, moved = deformable_transform(zeros, label, affine, elastic, rng)
    return moved
