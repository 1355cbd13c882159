"""Minimal differentiable reference models and their training loops.

Two models, both trained by plain SGD with hand-derived gradients (verified
against finite differences in the tests):

* a per-voxel softmax segmenter over seven handcrafted features (intensity,
  two box means, gradient magnitude, three normalized coordinates);
* a two-layer 3x3x3 convolutional noise predictor whose input stacks the noisy
  volume, the embedded condition mask, and a broadcast t/T channel.

Full-scale backbones would use Adam (typical settings: lr 1e-4 for the
segmentation task, 1e-5 for the denoiser); the reference models are small
enough that constant-rate SGD is sufficient and keeps the math auditable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._ndops import axis_coords, box_filter3d, gradient_magnitude
from .deform import DeformRanges
from .diffusion import (
    ConditionEmbedder,
    NoiseSchedule,
    TrainPair,
    embed_condition,
    mae_loss,
    q_sample,
    train_pair_assemble,
)
from .errors import ShapeMismatchError
from .losses import TrainWeights, dice_loss, ema_update, l_asc, mse_consistency
from .params import ParamVector, load_params, save_params  # noqa: F401  (re-exported)
from .perturb import cutmix, sample_box
from .pseudolabel import ensemble_probs
from .spectral import adaptive_beta, amplitude_swap
from .volume import LabelVolume, ProbVolume, ScalarVolume

FEATURE_COUNT = 7
KERNEL_OFFSETS = [(dz, dy, dx) for dz in (-1, 0, 1) for dy in (-1, 0, 1) for dx in (-1, 0, 1)]


# ---------------------------------------------------------------------------
# per-voxel softmax segmenter
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SegModelConfig:
    """Segmenter training settings; feature set is fixed at seven channels."""

    num_classes: int = 5
    learning_rate: float = 0.5
    epochs: int = 40
    batch_source: int = 2
    batch_target: int = 2
    hist_bins: int = 64
    frac_range: tuple[float, float] = (0.1, 0.4)
    keep_epochs: int = 10
    use_transfer_supervision: bool = True
    use_consistency_t: bool = True
    use_consistency_tfs: bool = True
    use_structure_perturb: bool = True
    adaptive_swap: bool = True
    fixed_beta: float = 0.55


def seg_layout(num_classes: int):
    return (("weights", (num_classes, FEATURE_COUNT)), ("bias", (num_classes,)))


def seg_init(num_classes: int) -> ParamVector:
    return ParamVector.zeros(seg_layout(num_classes))


def seg_features(image: ScalarVolume) -> np.ndarray:
    """Per-voxel feature stack of shape (7, d, h, w)."""
    x = image.data
    d, h, w = x.shape
    zc = np.broadcast_to(axis_coords(d)[:, None, None], x.shape)
    yc = np.broadcast_to(axis_coords(h)[None, :, None], x.shape)
    xc = np.broadcast_to(axis_coords(w)[None, None, :], x.shape)
    return np.stack([
        x,
        box_filter3d(x, 3),
        box_filter3d(x, 5),
        gradient_magnitude(x),
        zc, yc, xc,
    ])


def _seg_num_classes(params: ParamVector) -> int:
    return params.block("bias").shape[0]


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=0, keepdims=True)


def seg_forward(params: ParamVector, image: ScalarVolume,
                feats: np.ndarray | None = None) -> ProbVolume:
    """Per-voxel softmax over a linear map of the feature stack."""
    if feats is None:
        feats = seg_features(image)
    if feats.shape[0] != FEATURE_COUNT:
        raise ShapeMismatchError(f"expected {FEATURE_COUNT} feature channels")
    c = _seg_num_classes(params)
    flat = feats.reshape(FEATURE_COUNT, -1)
    logits = params.block("weights") @ flat + params.block("bias")[:, None]
    probs = _softmax(logits).reshape((c,) + image.shape.as_tuple())
    return ProbVolume(image.shape, image.spacing, c, probs)


def seg_backward(
    params: ParamVector,
    image: ScalarVolume,
    grad_probs: np.ndarray,
    feats: np.ndarray | None = None,
    probs: ProbVolume | None = None,
) -> ParamVector:
    """Exact parameter gradient of any loss whose gradient on the class
    probabilities is supplied (chain rule through softmax and the linear map)."""
    if feats is None:
        feats = seg_features(image)
    if probs is None:
        probs = seg_forward(params, image, feats)
    c = _seg_num_classes(params)
    p = probs.data.reshape(c, -1)
    g = np.asarray(grad_probs, dtype=np.float64).reshape(c, -1)
    if g.shape != p.shape:
        raise ShapeMismatchError("probability gradient shape mismatch")
    dlogit = p * (g - (g * p).sum(axis=0, keepdims=True))
    grad_w = dlogit @ feats.reshape(FEATURE_COUNT, -1).T
    grad_b = dlogit.sum(axis=1)
    return ParamVector.from_blocks([("weights", grad_w), ("bias", grad_b)])


# ---------------------------------------------------------------------------
# two-layer convolutional noise predictor
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DenoiserConfig:
    """Shape-preserving two-layer 3x3x3 convolutional noise predictor.

    Input channels: 1 (noisy volume) + embed_channels + 1 (broadcast t/T).
    """

    embed_channels: int = 4
    hidden: int = 8
    learning_rate: float = 0.01
    steps: int = 600
    ema_decay: float = 0.995
    deform_training: bool = True

    @property
    def in_channels(self) -> int:
        return self.embed_channels + 2


def denoiser_layout(in_channels: int, hidden: int):
    return (
        ("conv1_weight", (hidden, in_channels, 27)),
        ("conv1_bias", (hidden,)),
        ("conv2_weight", (1, hidden, 27)),
        ("conv2_bias", (1,)),
    )


def denoiser_init(in_channels: int, hidden: int, rng: np.random.Generator) -> ParamVector:
    w1 = rng.normal(0.0, np.sqrt(2.0 / (in_channels * 27)), size=(hidden, in_channels, 27))
    w2 = rng.normal(0.0, np.sqrt(2.0 / (hidden * 27)), size=(1, hidden, 27))
    return ParamVector.from_blocks([
        ("conv1_weight", w1),
        ("conv1_bias", np.zeros(hidden)),
        ("conv2_weight", w2),
        ("conv2_bias", np.zeros(1)),
    ])


def _im2col(x: np.ndarray) -> np.ndarray:
    """(C, d, h, w) -> (C*27, d*h*w) with zero padding, offsets in KERNEL_OFFSETS order."""
    c, d, h, w = x.shape
    padded = np.zeros((c, d + 2, h + 2, w + 2), dtype=np.float64)
    padded[:, 1:d + 1, 1:h + 1, 1:w + 1] = x
    cols = np.empty((c, 27, d * h * w), dtype=np.float64)
    for k, (oz, oy, ox) in enumerate(KERNEL_OFFSETS):
        cols[:, k] = padded[:, 1 + oz:1 + oz + d, 1 + oy:1 + oy + h, 1 + ox:1 + ox + w] \
            .reshape(c, -1)
    return cols.reshape(c * 27, -1)


def _col2im(cols: np.ndarray, shape: tuple[int, int, int]) -> np.ndarray:
    """Adjoint of _im2col: scatter-add column gradients back onto channels."""
    d, h, w = shape
    c = cols.shape[0] // 27
    grid = cols.reshape(c, 27, d, h, w)
    padded = np.zeros((c, d + 2, h + 2, w + 2), dtype=np.float64)
    for k, (oz, oy, ox) in enumerate(KERNEL_OFFSETS):
        padded[:, 1 + oz:1 + oz + d, 1 + oy:1 + oy + h, 1 + ox:1 + ox + w] += grid[:, k]
    return padded[:, 1:d + 1, 1:h + 1, 1:w + 1]


def _stack_input(x_hat: np.ndarray, t_frac: float) -> np.ndarray:
    t_chan = np.full((1,) + x_hat.shape[1:], float(t_frac))
    return np.concatenate([x_hat, t_chan], axis=0)


def _denoiser_forward_cached(params: ParamVector, stacked: np.ndarray):
    shape = stacked.shape[1:]
    cols1 = _im2col(stacked)
    w1 = params.block("conv1_weight")
    hidden = w1.shape[0]
    pre = (w1.reshape(hidden, -1) @ cols1) + params.block("conv1_bias")[:, None]
    act = np.maximum(pre, 0.0)
    cols2 = _im2col(act.reshape((hidden,) + shape))
    w2 = params.block("conv2_weight")
    out = (w2.reshape(1, -1) @ cols2) + params.block("conv2_bias")[:, None]
    return out.reshape(shape), (cols1, pre, cols2, shape)


def denoiser_forward(params: ParamVector, x_hat: np.ndarray, t_frac: float) -> np.ndarray:
    """Noise estimate for a conditioned input stack; shape-preserving."""
    expected = params.block("conv1_weight").shape[1]
    if x_hat.shape[0] + 1 != expected:
        raise ShapeMismatchError(
            f"denoiser expects {expected - 1} input channels before the timestep "
            f"channel, got {x_hat.shape[0]}"
        )
    out, _ = _denoiser_forward_cached(params, _stack_input(x_hat, t_frac))
    return out


def denoiser_backward(
    params: ParamVector,
    x_hat: np.ndarray,
    t_frac: float,
    grad_out: np.ndarray,
) -> ParamVector:
    """Exact parameter gradient given the upstream gradient on the output."""
    _, cache = _denoiser_forward_cached(params, _stack_input(x_hat, t_frac))
    return _denoiser_param_grad(params, cache, grad_out)


def _denoiser_param_grad(params: ParamVector, cache, grad_out: np.ndarray) -> ParamVector:
    cols1, pre, cols2, shape = cache
    hidden = pre.shape[0]
    g2 = np.asarray(grad_out, dtype=np.float64).reshape(1, -1)
    grad_w2 = (g2 @ cols2.T).reshape(1, hidden, 27)
    grad_b2 = g2.sum(axis=1)
    gcols2 = params.block("conv2_weight").reshape(1, -1).T @ g2
    g_act = _col2im(gcols2, shape).reshape(hidden, -1)
    g_pre = g_act * (pre > 0.0)
    grad_w1 = (g_pre @ cols1.T).reshape(params.block("conv1_weight").shape)
    grad_b1 = g_pre.sum(axis=1)
    return ParamVector.from_blocks([
        ("conv1_weight", grad_w1),
        ("conv1_bias", grad_b1),
        ("conv2_weight", grad_w2),
        ("conv2_bias", grad_b2),
    ])


class ConvDenoiser:
    """DenoiserInterface adapter around a parameter vector and a schedule length."""

    def __init__(self, params: ParamVector, timesteps: int):
        self.params = params
        self.timesteps = int(timesteps)

    def predict(self, x_hat: np.ndarray, t: int) -> np.ndarray:
        return denoiser_forward(self.params, x_hat, t / self.timesteps)


# ---------------------------------------------------------------------------
# teacher-student adaptation training
# ---------------------------------------------------------------------------

@dataclass
class AscResult:
    student: ParamVector
    teacher: ParamVector
    epoch_losses: list[float]
    target_prob_history: list[list[ProbVolume]] = field(default_factory=list)

    def ensembled_target_probs(self) -> list[ProbVolume]:
        """Per-target mean over the retained epochs."""
        if not self.target_prob_history:
            return []
        n_targets = len(self.target_prob_history[0])
        return [
            ensemble_probs([epoch[j] for epoch in self.target_prob_history])
            for j in range(n_targets)
        ]


def train_asc(
    student: ParamVector,
    teacher: ParamVector,
    source_pairs: list[tuple[ScalarVolume, LabelVolume]],
    target_images: list[ScalarVolume],
    cfg: SegModelConfig,
    weights: TrainWeights,
    rng: np.random.Generator,
) -> AscResult:
    """Teacher-student adaptation over labeled source pairs and unlabeled targets.

    Each step supervises the student on source images and their appearance-
    transferred versions, enforces consistency between student predictions on
    (structure-perturbed) target views and teacher predictions on the opposite
    appearance views, then EMA-updates the teacher. Retains the student's
    target-domain probabilities for the last `keep_epochs` epochs.

    With no target images the loop degrades to plain supervised Dice training.
    """
    if not source_pairs:
        raise ValueError("train_asc requires at least one labeled source pair")
    n_src = len(source_pairs)
    n_tgt = len(target_images)
    use_consistency = (
        n_tgt > 0
        and weights.consistency_weight > 0
        and (cfg.use_consistency_t or cfg.use_consistency_tfs)
    )

    src_feats = [seg_features(img) for img, _ in source_pairs]
    tgt_feats = [seg_features(img) for img in target_images]

    epoch_losses: list[float] = []
    history: list[list[ProbVolume]] = []

    for _ in range(cfg.epochs):
        src_order = rng.permutation(n_src)
        tgt_order = rng.permutation(n_tgt) if n_tgt else np.array([], dtype=np.int64)

        # Appearance-transfer partners and jitter are redrawn once per epoch.
        if n_tgt:
            src_partner = rng.integers(n_tgt, size=n_src)
            src_alpha = rng.uniform(0.5, 1.5, size=n_src)
            tgt_partner = rng.integers(n_src, size=n_tgt)
            tgt_alpha = rng.uniform(0.5, 1.5, size=n_tgt)
            transferred_src = []
            for i, (img, _) in enumerate(source_pairs):
                style = target_images[int(src_partner[i])]
                beta = (
                    adaptive_beta(img, style, cfg.hist_bins, float(src_alpha[i]))
                    if cfg.adaptive_swap else cfg.fixed_beta
                )
                transferred_src.append(amplitude_swap(img, style, beta))
            transferred_tgt = []
            for j, img in enumerate(target_images):
                style = source_pairs[int(tgt_partner[j])][0]
                beta = (
                    adaptive_beta(img, style, cfg.hist_bins, float(tgt_alpha[j]))
                    if cfg.adaptive_swap else cfg.fixed_beta
                )
                transferred_tgt.append(amplitude_swap(img, style, beta))
        else:
            transferred_src = [None] * n_src
            transferred_tgt = []

        step_losses = []
        n_steps = max(1, int(np.ceil(n_src / cfg.batch_source)))
        for step in range(n_steps):
            batch_src = [int(src_order[(step * cfg.batch_source + i) % n_src])
                         for i in range(min(cfg.batch_source, n_src))]
            batch_tgt = []
            if use_consistency:
                batch_tgt = [int(tgt_order[(step * cfg.batch_target + j) % n_tgt])
                             for j in range(min(cfg.batch_target, n_tgt))]

            grad = np.zeros(len(student))
            loss_value = 0.0

            for i in batch_src:
                img, lbl = source_pairs[i]
                feats = src_feats[i]
                probs = seg_forward(student, img, feats)
                out = dice_loss(probs, lbl)
                loss_value += out.value / len(batch_src)
                grad += seg_backward(student, img, out.grads[0] / len(batch_src),
                                     feats, probs).data
                if cfg.use_transfer_supervision and transferred_src[i] is not None:
                    timg = transferred_src[i]
                    tprobs = seg_forward(student, timg)
                    tout = dice_loss(tprobs, lbl)
                    loss_value += tout.value / len(batch_src)
                    grad += seg_backward(student, timg, tout.grads[0] / len(batch_src),
                                         probs=tprobs).data

            if batch_tgt:
                scale = weights.consistency_weight / len(batch_tgt)
                for pos, j in enumerate(batch_tgt):
                    x_t = target_images[j]
                    x_tfs = transferred_tgt[j]
                    teacher_t = seg_forward(teacher, x_t, tgt_feats[j])
                    teacher_tfs = seg_forward(teacher, x_tfs)
                    if cfg.use_structure_perturb and len(batch_tgt) > 1:
                        donor = batch_tgt[(pos + 1) % len(batch_tgt)]
                        box = sample_box(x_t.shape, cfg.frac_range, rng)
                        stu_t_in = cutmix(x_t, target_images[donor], box)
                        stu_tfs_in = cutmix(x_tfs, transferred_tgt[donor], box)
                    else:
                        stu_t_in, stu_tfs_in = x_t, x_tfs
                    stu_t = seg_forward(student, stu_t_in)
                    stu_tfs = seg_forward(student, stu_tfs_in)
                    if cfg.use_consistency_t and cfg.use_consistency_tfs:
                        out = l_asc(stu_t, stu_tfs, teacher_t, teacher_tfs)
                        loss_value += weights.consistency_weight * out.value / len(batch_tgt)
                        grad += seg_backward(student, stu_t_in, scale * out.grads[0],
                                             probs=stu_t).data
                        grad += seg_backward(student, stu_tfs_in, scale * out.grads[1],
                                             probs=stu_tfs).data
                    elif cfg.use_consistency_t:
                        out = mse_consistency(stu_t, teacher_tfs)
                        loss_value += weights.consistency_weight * out.value / len(batch_tgt)
                        grad += seg_backward(student, stu_t_in, scale * out.grads[0],
                                             probs=stu_t).data
                    else:
                        out = mse_consistency(stu_tfs, teacher_t)
                        loss_value += weights.consistency_weight * out.value / len(batch_tgt)
                        grad += seg_backward(student, stu_tfs_in, scale * out.grads[0],
                                             probs=stu_tfs).data

            student = student.with_data(student.data - cfg.learning_rate * grad)
            teacher = ema_update(teacher, student, weights.ema_decay)
            step_losses.append(loss_value)

        epoch_losses.append(float(np.mean(step_losses)))
        if n_tgt:
            history.append([seg_forward(student, img, tgt_feats[j])
                            for j, img in enumerate(target_images)])
            if len(history) > cfg.keep_epochs:
                history.pop(0)

    return AscResult(student, teacher, epoch_losses, history)


# ---------------------------------------------------------------------------
# denoiser training
# ---------------------------------------------------------------------------

@dataclass
class DenoiserTrainResult:
    params: ParamVector
    ema_params: ParamVector
    step_losses: list[float]


def train_denoiser(
    params: ParamVector,
    pairs: list[TrainPair],
    emb: ConditionEmbedder,
    sched: NoiseSchedule,
    cfg: DenoiserConfig,
    deform_ranges: DeformRanges | None,
    rng: np.random.Generator,
) -> DenoiserTrainResult:
    """SGD on the noise-prediction L1 objective over uniformly drawn timesteps.

    Source pairs are deformation-augmented per step (image and mask together);
    pseudo-labeled target pairs are used as-is. An EMA copy of the parameters
    is maintained for sampling.
    """
    if not pairs:
        raise ValueError("train_denoiser requires at least one training pair")
    ema = params
    losses: list[float] = []
    ranges = deform_ranges if cfg.deform_training else None
    for _ in range(cfg.steps):
        pair = pairs[int(rng.integers(len(pairs)))]
        x0, c = train_pair_assemble(pair, ranges, rng)
        t = int(rng.integers(1, sched.timesteps + 1))
        eps = rng.standard_normal(x0.shape.as_tuple())
        x_t = q_sample(x0.data, t, eps, sched)
        stacked = _stack_input(embed_condition(x_t, c, emb), t / sched.timesteps)
        eps_hat, cache = _denoiser_forward_cached(params, stacked)
        out = mae_loss(eps, eps_hat)
        losses.append(out.value)
        grad = _denoiser_param_grad(params, cache, out.grads[0])
        params = params.with_data(params.data - cfg.learning_rate * grad.data)
        ema = ema_update(ema, params, cfg.ema_decay)
    return DenoiserTrainResult(params, ema, losses)


def denoiser_eval_loss(
    params: ParamVector,
    items: list[tuple[ScalarVolume, LabelVolume, int, np.ndarray]],
    emb: ConditionEmbedder,
    sched: NoiseSchedule,
) -> float:
    """Mean L1 noise-prediction loss over fixed (x0, mask, t, eps) items."""
    total = 0.0
    for x0, c, t, eps in items:
        x_t = q_sample(x0.data, t, eps, sched)
        eps_hat = denoiser_forward(params, embed_condition(x_t, c, emb), t / sched.timesteps)
        total += mae_loss(eps, eps_hat).value
    return total / len(items)
