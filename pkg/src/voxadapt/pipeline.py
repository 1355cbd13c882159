"""Three-stage adaptation pipeline and its command-line interface.

Stage 1 pseudo-labels the unlabeled target volumes with the teacher-student
model. Stage 2 trains the conditional diffusion generator on source pairs plus
accepted pseudo-labeled target pairs, then samples a synthetic labeled dataset
from (optionally deformed) conditioning masks with a scale-up factor. Stage 3
retrains the teacher-student model on source plus generated data against the
unlabeled targets and evaluates on the held-out target test split.

Every run is fully determined by (config, seed): all randomness flows through
named seed paths, so artifacts are byte-reproducible and stages can be deleted
and re-run in isolation.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import metrics as metrics_mod
from .deform import DeformRanges, ElasticParams
from .diffusion import (
    TrainPair,
    cosine_schedule,
    deform_condition,
    embed_condition,  # noqa: F401  (re-exported for API completeness)
    init_embedder,
    sample_loop,
)
from .errors import ConfigError, NoConditioningMasksError, VoxAdaptError
from .losses import TrainWeights
from .model import (
    ConvDenoiser,
    DenoiserConfig,
    SegModelConfig,
    denoiser_init,
    denoiser_layout,
    load_params,
    save_params,
    seg_forward,
    seg_init,
    train_asc,
    train_denoiser,
)
from .phantom import DOMAIN_A, DOMAIN_B, gen_dataset, read_manifest, write_manifest
from .pseudolabel import load_record, make_pseudo_label, save_record
from .volume import LabelVolume, ScalarVolume, Shape3, load_volume, save_volume

# Seed-path purpose codes; every generator derives from (seed, purpose, ...).
_SP_STAGE1 = 11
_SP_DENOISER_TRAIN = 21
_SP_SAMPLE = 22
_SP_EMBEDDER = 41
_SP_DENOISER_INIT = 42
_SP_STAGE3 = 31
_MODE_CODES = {"full": 0, "lower": 1, "upper": 2}
_ORIGIN_CODES = {"source": 0, "target_pseudo": 1}

# Projected denoiser evaluations (voxels * reverse steps) above which the
# config validator warns that a run may blow the interactive time budget.
_WORK_WARN_THRESHOLD = 2.0e9


@dataclass
class RunConfig:
    """Flat, validated configuration for a pipeline run."""

    seed: int = 0
    # phantom dataset
    phantom_size: int = 24
    num_classes: int = 5
    n_source: int = 12
    n_target_train: int = 10
    n_target_test: int = 10
    voxel_mm: float = 1.0
    # appearance transfer
    hist_bins: int = 64
    # teacher-student training
    asc_epochs: int = 40
    asc_lr: float = 0.5
    batch_source: int = 2
    batch_target: int = 2
    consistency_weight: float = 1.0
    ema_decay: float = 0.99
    ensemble_epochs: int = 10
    confidence_tau: float = 0.7
    cutmix_frac_lo: float = 0.1
    cutmix_frac_hi: float = 0.4
    asc_use_sft: bool = True
    asc_use_app_t: bool = True
    asc_use_app_tfs: bool = True
    asc_use_str: bool = True
    asc_adaptive_beta: bool = True
    asc_fixed_beta: float = 0.55
    # deformable augmentation
    deform_rot_deg: float = 10.0
    deform_scale_lo: float = 0.9
    deform_scale_hi: float = 1.1
    deform_shift: float = 0.05
    deform_alpha: float = 0.03
    deform_field_size: int = 8
    deform_smooth_window: int = 5
    deform_smooth_iters: int = 3
    # diffusion
    timesteps: int = 250
    schedule_offset: float = 0.008
    embed_channels: int = 4
    denoiser_hidden: int = 8
    denoiser_lr: float = 0.01
    denoiser_steps: int = 600
    denoiser_ema: float = 0.995
    train_deform: bool = True
    # stage 2 sampling
    use_source_masks: bool = True
    use_target_masks: bool = True
    sample_deform: bool = True
    scale_up: int = 2
    # stage 3
    stage3_epochs: int = 40
    run_baselines: bool = True
    # metrics
    nsd_tol_mm: float = 1.0
    # artifact location; not part of the scientific configuration or its hash
    out_dir: Path = field(default=Path("voxadapt_out"), compare=False)

    def validate(self) -> None:
        c = self
        checks = [
            (c.phantom_size >= 16, "phantom_size must be >= 16"),
            (c.num_classes >= 2, "num_classes must be >= 2"),
            (c.n_source >= 1, "n_source must be >= 1"),
            (c.n_target_train >= 0, "n_target_train must be >= 0"),
            (c.n_target_test >= 1, "n_target_test must be >= 1"),
            (c.voxel_mm > 0, "voxel_mm must be > 0"),
            (c.hist_bins >= 2, "hist_bins must be >= 2"),
            (c.asc_epochs >= 1, "asc_epochs must be >= 1"),
            (c.asc_lr > 0, "asc_lr must be > 0"),
            (c.batch_source >= 1, "batch_source must be >= 1"),
            (c.batch_target >= 1, "batch_target must be >= 1"),
            (c.consistency_weight >= 0, "consistency_weight must be >= 0"),
            (0 <= c.ema_decay <= 1, "ema_decay must lie in [0, 1]"),
            (c.ensemble_epochs >= 1, "ensemble_epochs must be >= 1"),
            (0 < c.confidence_tau < 1, "confidence_tau must lie in (0, 1)"),
            (0 < c.cutmix_frac_lo <= c.cutmix_frac_hi < 1,
             "cutmix fractions must satisfy 0 < lo <= hi < 1"),
            (0.1 <= c.asc_fixed_beta <= 1.0, "asc_fixed_beta must lie in [0.1, 1.0]"),
            (c.deform_rot_deg >= 0, "deform_rot_deg must be >= 0"),
            (0 < c.deform_scale_lo <= c.deform_scale_hi,
             "deform scale range must be positive and ordered"),
            (c.deform_shift >= 0, "deform_shift must be >= 0"),
            (c.deform_alpha >= 0, "deform_alpha must be >= 0"),
            (c.deform_field_size >= 2, "deform_field_size must be >= 2"),
            (c.deform_smooth_window >= 1 and c.deform_smooth_window % 2 == 1,
             "deform_smooth_window must be odd and >= 1"),
            (c.deform_smooth_iters >= 0, "deform_smooth_iters must be >= 0"),
            (c.timesteps >= 2, "timesteps must be >= 2"),
            (c.schedule_offset > 0, "schedule_offset must be > 0"),
            (c.embed_channels >= 1, "embed_channels must be >= 1"),
            (c.denoiser_hidden >= 1, "denoiser_hidden must be >= 1"),
            (c.denoiser_lr > 0, "denoiser_lr must be > 0"),
            (c.denoiser_steps >= 1, "denoiser_steps must be >= 1"),
            (0 <= c.denoiser_ema <= 1, "denoiser_ema must lie in [0, 1]"),
            (c.scale_up >= 0, "scale_up must be >= 0"),
            (c.stage3_epochs >= 1, "stage3_epochs must be >= 1"),
            (c.nsd_tol_mm > 0, "nsd_tol_mm must be > 0"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)
        projected = self.projected_work()
        if projected > _WORK_WARN_THRESHOLD:
            print(
                f"warning: projected sampling work {projected:.2e} voxel-steps may "
                "exceed the interactive time budget; consider a smaller "
                "phantom_size, scale_up, or timesteps",
                file=sys.stderr,
            )

    def projected_work(self) -> float:
        """Rough cost estimate: denoiser evaluations in voxel-steps."""
        masks = self.n_source * self.use_source_masks + self.n_target_train * self.use_target_masks
        samples = self.scale_up * masks
        voxels = self.phantom_size ** 3
        return float((samples * self.timesteps + self.denoiser_steps) * voxels)

    # -- serialization ------------------------------------------------------

    def to_text(self) -> str:
        lines = ["# voxadapt run configuration"]
        for f in fields(self):
            if f.name == "out_dir":
                continue
            value = getattr(self, f.name)
            if isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()[:12]

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        valid = {f.name: f.type for f in fields(cls) if f.name != "out_dir"}
        kwargs = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in valid:
                raise ConfigError(f"line {lineno}: unknown configuration key {key!r}")
            kwargs[key] = _parse_value(key, value, valid[key], lineno)
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        return cls.from_text(path.read_text(encoding="utf-8"))


def _parse_value(key: str, value: str, ftype, lineno: int):
    ftype = {"int": int, "float": float, "bool": bool}.get(ftype, ftype)
    try:
        if ftype is bool or ftype == "bool":
            low = value.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(f"not a boolean: {value!r}")
        if ftype is int:
            return int(value)
        if ftype is float:
            return float(value)
        return value
    except ValueError as exc:
        raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from exc


def _rng(cfg: RunConfig, *path: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(cfg.seed)] + [int(p) for p in path]))


def _deform_ranges(cfg: RunConfig) -> DeformRanges:
    return DeformRanges(
        rot_deg=cfg.deform_rot_deg,
        scale_lo=cfg.deform_scale_lo,
        scale_hi=cfg.deform_scale_hi,
        shift=cfg.deform_shift,
        elastic=ElasticParams(
            window=cfg.deform_smooth_window,
            field_size=cfg.deform_field_size,
            alpha=cfg.deform_alpha,
            smooth_iters=cfg.deform_smooth_iters,
        ),
    )


def _seg_config(cfg: RunConfig, epochs: int) -> SegModelConfig:
    return SegModelConfig(
        num_classes=cfg.num_classes,
        learning_rate=cfg.asc_lr,
        epochs=epochs,
        batch_source=cfg.batch_source,
        batch_target=cfg.batch_target,
        hist_bins=cfg.hist_bins,
        frac_range=(cfg.cutmix_frac_lo, cfg.cutmix_frac_hi),
        keep_epochs=cfg.ensemble_epochs,
        use_transfer_supervision=cfg.asc_use_sft,
        use_consistency_t=cfg.asc_use_app_t,
        use_consistency_tfs=cfg.asc_use_app_tfs,
        use_structure_perturb=cfg.asc_use_str,
        adaptive_swap=cfg.asc_adaptive_beta,
        fixed_beta=cfg.asc_fixed_beta,
    )


def _weights(cfg: RunConfig) -> TrainWeights:
    return TrainWeights(consistency_weight=cfg.consistency_weight, ema_decay=cfg.ema_decay)


# ---------------------------------------------------------------------------
# dataset generation
# ---------------------------------------------------------------------------

def make_phantom_dataset(cfg: RunConfig) -> list[dict]:
    """Generate the two-domain phantom dataset and write the manifest."""
    out = Path(cfg.out_dir)
    data_dir = out / "data"
    shape = Shape3(cfg.phantom_size, cfg.phantom_size, cfg.phantom_size)
    base = int(cfg.seed) * 1_000_000
    entries = []
    entries += gen_dataset(cfg.n_source, DOMAIN_A, base + 1000, data_dir, shape,
                           cfg.num_classes, split="source", prefix="src")
    entries += gen_dataset(cfg.n_target_train, DOMAIN_B, base + 2000, data_dir, shape,
                           cfg.num_classes, split="target_train", prefix="tt")
    entries += gen_dataset(cfg.n_target_test, DOMAIN_B, base + 3000, data_dir, shape,
                           cfg.num_classes, split="target_test", prefix="te")
    write_manifest(entries, out / "manifest.json")
    return entries


def _load_split(cfg: RunConfig, split: str, labeled: bool):
    out = Path(cfg.out_dir)
    entries = [e for e in read_manifest(out / "manifest.json") if e["split"] == split]
    loaded = []
    for e in entries:
        img = load_volume(out / "data" / e["image"])
        if labeled:
            lbl = load_volume(out / "data" / e["labels"])
            loaded.append((e["id"], img, lbl))
        else:
            loaded.append((e["id"], img, None))
    return loaded


# ---------------------------------------------------------------------------
# stage 1: pseudo-labeling
# ---------------------------------------------------------------------------

def stage1_pseudolabel(cfg: RunConfig) -> dict:
    """Train the adaptation model, ensemble recent target predictions, and
    write pseudo-label records plus checkpoints."""
    out = Path(cfg.out_dir)
    source = _load_split(cfg, "source", labeled=True)
    targets = _load_split(cfg, "target_train", labeled=False)
    if not source or not targets:
        raise VoxAdaptError("stage 1 requires source and target_train data")

    seg_cfg = _seg_config(cfg, cfg.asc_epochs)
    student = seg_init(cfg.num_classes)
    result = train_asc(
        student, student,
        [(img, lbl) for _, img, lbl in source],
        [img for _, img, _ in targets],
        seg_cfg, _weights(cfg), _rng(cfg, _SP_STAGE1),
    )

    pseudo_dir = out / "pseudo"
    pseudo_dir.mkdir(parents=True, exist_ok=True)
    kept = len(result.target_prob_history)
    epochs_used = tuple(range(cfg.asc_epochs - kept + 1, cfg.asc_epochs + 1))
    records = []
    for (sid, _, _), prob in zip(targets, result.ensembled_target_probs()):
        record = make_pseudo_label(prob, cfg.confidence_tau, epochs_used)
        save_record(record, pseudo_dir / f"{sid}_plbl.uvf", pseudo_dir / f"{sid}_meta.json")
        records.append((sid, record))

    ckpt = out / "checkpoints"
    ckpt.mkdir(parents=True, exist_ok=True)
    save_params(result.student, ckpt / "stage1_student.pv")
    save_params(result.teacher, ckpt / "stage1_teacher.pv")

    summary = {
        "n_targets": len(records),
        "n_accepted": sum(rec.accepted for _, rec in records),
        "confidence": {sid: rec.mean_confidence for sid, rec in records},
        "epoch_losses": result.epoch_losses,
    }
    (pseudo_dir / "summary.json").write_text(
        json.dumps(summary, sort_keys=True, indent=1), encoding="utf-8"
    )
    return summary


def _accepted_pseudo(cfg: RunConfig) -> list[tuple[str, LabelVolume]]:
    out = Path(cfg.out_dir)
    pseudo_dir = out / "pseudo"
    accepted = []
    for e in read_manifest(out / "manifest.json"):
        if e["split"] != "target_train":
            continue
        meta = pseudo_dir / f"{e['id']}_meta.json"
        if not meta.is_file():
            continue
        record = load_record(pseudo_dir / f"{e['id']}_plbl.uvf", meta)
        if record.accepted:
            accepted.append((e["id"], record.label))
    return accepted


# ---------------------------------------------------------------------------
# stage 2: conditional generation
# ---------------------------------------------------------------------------

def _denoiser_assets(cfg: RunConfig):
    """Train (or load cached) denoiser parameters; shared by all sampling configs."""
    out = Path(cfg.out_dir)
    ckpt = out / "checkpoints"
    ckpt.mkdir(parents=True, exist_ok=True)
    tag = cfg.config_hash()
    dn_path = ckpt / f"denoiser_{tag}.pv"
    ema_path = ckpt / f"denoiser_ema_{tag}.pv"
    sched = cosine_schedule(cfg.timesteps, cfg.schedule_offset)

    # The embedder is frozen; re-deriving it from the seed is exact.
    embedder = init_embedder(cfg.num_classes, cfg.embed_channels, _rng(cfg, _SP_EMBEDDER))

    if dn_path.is_file() and ema_path.is_file():
        return load_params(dn_path), load_params(ema_path), embedder, sched

    dcfg = DenoiserConfig(
        embed_channels=cfg.embed_channels,
        hidden=cfg.denoiser_hidden,
        learning_rate=cfg.denoiser_lr,
        steps=cfg.denoiser_steps,
        ema_decay=cfg.denoiser_ema,
        deform_training=cfg.train_deform,
    )
    pairs = [TrainPair(img, lbl, "source") for _, img, lbl in _load_split(cfg, "source", True)]
    pseudo = dict(_accepted_pseudo(cfg))
    for sid, img, _ in _load_split(cfg, "target_train", labeled=False):
        if sid in pseudo:
            pairs.append(TrainPair(img, pseudo[sid], "target"))

    params = denoiser_init(dcfg.in_channels, dcfg.hidden, _rng(cfg, _SP_DENOISER_INIT))
    result = train_denoiser(params, pairs, embedder, sched, dcfg,
                            _deform_ranges(cfg), _rng(cfg, _SP_DENOISER_TRAIN))
    save_params(result.params, dn_path)
    save_params(result.ema_params, ema_path)
    (ckpt / f"denoiser_loss_{tag}.json").write_text(
        json.dumps({"step_losses": result.step_losses}), encoding="utf-8"
    )
    return result.params, result.ema_params, embedder, sched


def _mask_pool(cfg: RunConfig, use_source: bool, use_target: bool):
    pool = []
    if use_source:
        for idx, (sid, _, lbl) in enumerate(_load_split(cfg, "source", labeled=True)):
            pool.append(("source", idx, sid, lbl))
    if use_target:
        for idx, (sid, lbl) in enumerate(_accepted_pseudo(cfg)):
            pool.append(("target_pseudo", idx, sid, lbl))
    if not pool:
        raise NoConditioningMasksError(
            "no conditioning masks: no accepted pseudo-labels and source masks disabled"
        )
    return pool


def _generate_one(cfg: RunConfig, denoiser: ConvDenoiser, embedder, sched,
                  origin: str, subject_idx: int, label: LabelVolume,
                  rep: int, deform: bool):
    rng = _rng(cfg, _SP_SAMPLE, _ORIGIN_CODES[origin], subject_idx, rep)
    if deform:
        mask = deform_condition(label, _deform_ranges(cfg), rng)
    else:
        mask = label
    image = sample_loop(denoiser, mask, embedder, sched, rng)
    return image, mask


def stage2_generate(
    cfg: RunConfig,
    tag: str = "full",
    use_source_masks: bool | None = None,
    use_target_masks: bool | None = None,
    sample_deform: bool | None = None,
    scale_up: int | None = None,
) -> list[dict]:
    """Train (or reuse) the denoiser, then sample the synthetic labeled dataset.

    Flag arguments default to the run configuration; ablation rows override
    them per call. Returns the generated-set index (also written to disk).
    """
    use_source_masks = cfg.use_source_masks if use_source_masks is None else use_source_masks
    use_target_masks = cfg.use_target_masks if use_target_masks is None else use_target_masks
    sample_deform = cfg.sample_deform if sample_deform is None else sample_deform
    scale_up = cfg.scale_up if scale_up is None else scale_up

    out = Path(cfg.out_dir)
    gen_dir = out / "generated" / tag
    gen_dir.mkdir(parents=True, exist_ok=True)

    params, ema_params, embedder, sched = _denoiser_assets(cfg)
    denoiser = ConvDenoiser(ema_params, sched.timesteps)
    pool = _mask_pool(cfg, use_source_masks, use_target_masks)

    index = []
    for rep in range(scale_up):
        for origin, subject_idx, sid, label in pool:
            image, mask = _generate_one(cfg, denoiser, embedder, sched,
                                        origin, subject_idx, label, rep, sample_deform)
            gid = f"g_{origin}_{sid}_r{rep}"
            save_volume(image, gen_dir / f"{gid}_img.uvf")
            save_volume(mask, gen_dir / f"{gid}_lbl.uvf")
            provenance = {
                "origin": origin,
                "subject": sid,
                "subject_index": subject_idx,
                "rep": rep,
                "sample_deform": sample_deform,
                "seed_path": [cfg.seed, _SP_SAMPLE, _ORIGIN_CODES[origin], subject_idx, rep],
            }
            (gen_dir / f"{gid}_prov.json").write_text(
                json.dumps(provenance, sort_keys=True, indent=1), encoding="utf-8"
            )
            index.append({
                "id": gid,
                "origin": origin,
                "subject": sid,
                "rep": rep,
                "image": f"{gid}_img.uvf",
                "labels": f"{gid}_lbl.uvf",
                "provenance": f"{gid}_prov.json",
            })
    (gen_dir / "index.json").write_text(
        json.dumps({"tag": tag, "samples": index,
                    "flags": {"use_source_masks": use_source_masks,
                              "use_target_masks": use_target_masks,
                              "sample_deform": sample_deform,
                              "scale_up": scale_up}},
                   sort_keys=True, indent=1),
        encoding="utf-8",
    )
    return index


def regenerate_sample(cfg: RunConfig, provenance: dict) -> tuple[ScalarVolume, LabelVolume]:
    """Re-run one generated sample from its recorded provenance."""
    params, ema_params, embedder, sched = _denoiser_assets(cfg)
    denoiser = ConvDenoiser(ema_params, sched.timesteps)
    origin = provenance["origin"]
    subject_idx = int(provenance["subject_index"])
    if origin == "source":
        label = _load_split(cfg, "source", labeled=True)[subject_idx][2]
    else:
        label = _accepted_pseudo(cfg)[subject_idx][1]
    return _generate_one(cfg, denoiser, embedder, sched, origin, subject_idx,
                         label, int(provenance["rep"]), bool(provenance["sample_deform"]))


def _load_generated(cfg: RunConfig, tag: str) -> list[tuple[ScalarVolume, LabelVolume]]:
    gen_dir = Path(cfg.out_dir) / "generated" / tag
    index_path = gen_dir / "index.json"
    if not index_path.is_file():
        return []
    index = json.loads(index_path.read_text(encoding="utf-8"))["samples"]
    pairs = []
    for rec in index:
        img = load_volume(gen_dir / rec["image"])
        lbl = load_volume(gen_dir / rec["labels"])
        clipped = img.with_data(np.clip(img.data, 0.0, 1.0))
        pairs.append((clipped, lbl))
    return pairs


# ---------------------------------------------------------------------------
# stage 3: retraining and evaluation
# ---------------------------------------------------------------------------

_CSV_FIXED = [
    "config_hash", "tag", "seed", "source_masks", "target_masks", "sample_deform",
    "scale_up", "n_generated", "n_test", "mean_dsc", "mean_nsd", "mean_asd_mm",
]


def _csv_columns(cfg: RunConfig) -> list[str]:
    return _CSV_FIXED + [f"dsc_c{c}" for c in range(1, cfg.num_classes)]


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def _append_row(cfg: RunConfig, row: dict) -> None:
    out = Path(cfg.out_dir)
    columns = _csv_columns(cfg)
    path = out / "results.csv"
    exists = path.is_file()
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if not exists:
            writer.writerow(columns)
        writer.writerow([_fmt(row.get(col)) for col in columns])
    _write_report(cfg)


def _write_report(cfg: RunConfig) -> None:
    out = Path(cfg.out_dir)
    path = out / "results.csv"
    if not path.is_file():
        return
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    buf = io.StringIO()
    buf.write("# Run report\n\n")
    buf.write(f"Configuration hash: `{cfg.config_hash()}`\n\n")
    if rows:
        header, body = rows[0], rows[1:]
        buf.write("| " + " | ".join(header) + " |\n")
        buf.write("|" + "---|" * len(header) + "\n")
        for row in body:
            buf.write("| " + " | ".join(row) + " |\n")
    (out / "report.md").write_text(buf.getvalue(), encoding="utf-8")


def _evaluate(cfg: RunConfig, student) -> dict:
    """Mean metrics of the student over the target test split."""
    test = _load_split(cfg, "target_test", labeled=True)
    per_subject = []
    for _, img, gt in test:
        pred_probs = seg_forward(student, img)
        pred = pred_probs.argmax_labels()
        per_subject.append(metrics_mod.compute_report(pred, gt, cfg.nsd_tol_mm))
    mean_dsc = float(np.mean([r.mean_dsc for r in per_subject]))
    nsds = [r.mean_nsd for r in per_subject if r.mean_nsd is not None]
    asds = [r.mean_asd for r in per_subject if r.mean_asd is not None]
    per_class: dict[int, float] = {}
    for cls in range(1, cfg.num_classes):
        vals = [r.per_class[cls].dsc for r in per_subject if cls in r.per_class]
        if vals:
            per_class[cls] = float(np.mean(vals))
    return {
        "mean_dsc": mean_dsc,
        "mean_nsd": float(np.mean(nsds)) if nsds else None,
        "mean_asd_mm": float(np.mean(asds)) if asds else None,
        "per_class_dsc": per_class,
        "n_test": len(per_subject),
    }


def stage3_retrain_eval(
    cfg: RunConfig,
    mode: str = "full",
    gen_tag: str | None = "full",
    row: dict | None = None,
) -> dict:
    """Retrain on the configured data mix, evaluate on target test, emit a row.

    Modes: "full" trains on source plus generated data against unlabeled
    targets; "lower" is source-only supervised; "upper" trains supervised on
    the target training split's true labels (phantoms have them).
    """
    if mode not in _MODE_CODES:
        raise ConfigError(f"unknown stage-3 mode {mode!r}")
    source = _load_split(cfg, "source", labeled=True)
    labeled = [(img, lbl) for _, img, lbl in source]
    targets: list[ScalarVolume] = []
    generated: list[tuple[ScalarVolume, LabelVolume]] = []

    if mode == "full":
        if gen_tag is not None:
            generated = _load_generated(cfg, gen_tag)
        labeled = labeled + generated
        targets = [img for _, img, _ in _load_split(cfg, "target_train", labeled=False)]
    elif mode == "upper":
        labeled = [(img, lbl) for _, img, lbl in _load_split(cfg, "target_train", labeled=True)]

    seg_cfg = _seg_config(cfg, cfg.stage3_epochs)
    student = seg_init(cfg.num_classes)
    result = train_asc(student, student, labeled, targets, seg_cfg, _weights(cfg),
                       _rng(cfg, _SP_STAGE3, _MODE_CODES[mode]))

    ckpt = Path(cfg.out_dir) / "checkpoints"
    ckpt.mkdir(parents=True, exist_ok=True)
    tag = (row or {}).get("tag", mode)
    save_params(result.student, ckpt / f"stage3_{tag}_student.pv")
    save_params(result.teacher, ckpt / f"stage3_{tag}_teacher.pv")

    scores = _evaluate(cfg, result.student)
    out_row = {
        "config_hash": cfg.config_hash(),
        "tag": tag,
        "seed": cfg.seed,
        "source_masks": cfg.use_source_masks,
        "target_masks": cfg.use_target_masks,
        "sample_deform": cfg.sample_deform,
        "scale_up": cfg.scale_up,
        "n_generated": len(generated),
        "n_test": scores["n_test"],
        "mean_dsc": scores["mean_dsc"],
        "mean_nsd": scores["mean_nsd"],
        "mean_asd_mm": scores["mean_asd_mm"],
    }
    for cls, value in scores["per_class_dsc"].items():
        out_row[f"dsc_c{cls}"] = value
    if row:
        out_row.update(row)
    _append_row(cfg, out_row)
    return out_row


# ---------------------------------------------------------------------------
# orchestration commands
# ---------------------------------------------------------------------------

def run_all(cfg: RunConfig) -> list[dict]:
    """Full pipeline: phantoms, pseudo-labels, generation, retrain, baselines."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    results_path = out / "results.csv"
    if results_path.is_file():
        results_path.unlink()
    make_phantom_dataset(cfg)
    stage1_pseudolabel(cfg)
    stage2_generate(cfg, tag="full")
    rows = [stage3_retrain_eval(cfg, mode="full", gen_tag="full", row={"tag": "full"})]
    if cfg.run_baselines:
        rows.append(stage3_retrain_eval(cfg, mode="lower", gen_tag=None,
                                        row={"tag": "lower", "n_generated": 0}))
        rows.append(stage3_retrain_eval(cfg, mode="upper", gen_tag=None,
                                        row={"tag": "upper", "n_generated": 0}))
    return rows


_LADDER = [
    # tag, use_source, use_target, deform, k
    ("M1", False, False, False, 0),
    ("M2", True, False, False, 1),
    ("M3", True, True, False, 1),
    ("M4", True, True, True, 1),
    ("M5", True, True, True, None),  # None = configured scale_up
]


def ablate(cfg: RunConfig, axis: str) -> list[dict]:
    """Ablation harness; emits one CSV row per setting along the chosen axis."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not (out / "manifest.json").is_file():
        make_phantom_dataset(cfg)
    if not (out / "pseudo" / "summary.json").is_file():
        stage1_pseudolabel(cfg)

    rows = []
    if axis == "ladder":
        for tag, src, tgt, deform, k in _LADDER:
            k = cfg.scale_up if k is None else k
            rows.append(_ablation_row(cfg, tag, src, tgt, deform, k))
    elif axis == "scaleup":
        for k in (0, 1, 2):
            rows.append(_ablation_row(cfg, f"x{k}", True, True, True, k))
    elif axis == "deform":
        for deform in (False, True):
            tag = "deform_on" if deform else "deform_off"
            rows.append(_ablation_row(cfg, tag, True, True, deform, cfg.scale_up))
    elif axis == "source-mask":
        for src in (False, True):
            tag = "srcmask_on" if src else "srcmask_off"
            rows.append(_ablation_row(cfg, tag, src, True, True, cfg.scale_up))
    elif axis == "target-mask":
        for tgt in (False, True):
            tag = "tgtmask_on" if tgt else "tgtmask_off"
            rows.append(_ablation_row(cfg, tag, True, tgt, True, cfg.scale_up))
    else:
        raise ConfigError(
            f"unknown ablation axis {axis!r}; expected ladder, scaleup, deform, "
            "source-mask, or target-mask"
        )
    return rows


def _ablation_row(cfg: RunConfig, tag: str, src: bool, tgt: bool,
                  deform: bool, k: int) -> dict:
    if k > 0:
        stage2_generate(cfg, tag=tag, use_source_masks=src, use_target_masks=tgt,
                        sample_deform=deform, scale_up=k)
        gen_tag = tag
    else:
        gen_tag = None
    return stage3_retrain_eval(
        cfg, mode="full", gen_tag=gen_tag,
        row={"tag": tag, "source_masks": src, "target_masks": tgt,
             "sample_deform": deform, "scale_up": k},
    )


def evaluate_checkpoint(cfg: RunConfig, checkpoint) -> dict:
    """Score a saved segmenter checkpoint on the target test split."""
    student = load_params(checkpoint)
    return _evaluate(cfg, student)


# ---------------------------------------------------------------------------
# command-line interface
# ---------------------------------------------------------------------------

_USAGE = """usage: voxadapt SUBCOMMAND [options]

subcommands:
  phantom    generate the two-domain phantom dataset and manifest
  stage1     pseudo-label target-domain volumes
  stage2     train the generator and sample the synthetic dataset
  stage3     retrain on source + generated data and evaluate
  run-all    phantom + stage1 + stage2 + stage3 (+ baselines)
  eval       score a saved checkpoint on the target test split
  ablate     emit one results row per setting along an ablation axis

options:
  --config PATH   configuration file ("default" for built-in defaults)
  --seed N        override the configured seed
  --out DIR       output directory (default: voxadapt_out)
  --mode MODE     stage3 mode: full | lower | upper (default: full)
  --axis AXIS     ablate axis: ladder | scaleup | deform | source-mask | target-mask
  --checkpoint P  parameter file for eval
"""

_SUBCOMMANDS = ("phantom", "stage1", "stage2", "stage3", "run-all", "eval", "ablate")


class _UsageError(Exception):
    pass


def _parse_args(argv: list[str]) -> dict:
    if not argv:
        raise _UsageError("missing subcommand")
    cmd = argv[0]
    if cmd in ("-h", "--help"):
        raise _UsageError("")
    if cmd not in _SUBCOMMANDS:
        raise _UsageError(f"unknown subcommand {cmd!r}")
    opts = {"cmd": cmd, "config": "default", "seed": None, "out": "voxadapt_out",
            "mode": "full", "axis": None, "checkpoint": None}
    i = 1
    while i < len(argv):
        flag = argv[i]
        if flag in ("-h", "--help"):
            raise _UsageError("")
        name = flag.lstrip("-").replace("-", "_")
        if name not in ("config", "seed", "out", "mode", "axis", "checkpoint"):
            raise _UsageError(f"unknown option {flag!r}")
        if i + 1 >= len(argv):
            raise _UsageError(f"option {flag!r} needs a value")
        opts[name] = argv[i + 1]
        i += 2
    return opts


def cli_dispatch(argv: list[str]) -> int:
    """Run one CLI invocation; returns 0 on success, 1 on usage errors,
    2 on runtime failures."""
    try:
        opts = _parse_args(argv)
    except _UsageError as exc:
        if str(exc):
            print(f"error: {exc}", file=sys.stderr)
        print(_USAGE, file=sys.stderr)
        return 1

    try:
        if opts["config"] == "default":
            cfg = RunConfig()
            cfg.validate()
        else:
            cfg = RunConfig.from_file(opts["config"])
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    if opts["seed"] is not None:
        try:
            cfg = replace(cfg, seed=int(opts["seed"]))
        except ValueError:
            print(f"error: --seed expects an integer, got {opts['seed']!r}", file=sys.stderr)
            return 1
    cfg.out_dir = Path(opts["out"])

    try:
        cmd = opts["cmd"]
        if cmd == "phantom":
            Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
            entries = make_phantom_dataset(cfg)
            print(f"wrote {len(entries)} subjects to {cfg.out_dir}")
        elif cmd == "stage1":
            summary = stage1_pseudolabel(cfg)
            print(json.dumps({k: summary[k] for k in ("n_targets", "n_accepted")}))
        elif cmd == "stage2":
            index = stage2_generate(cfg)
            print(f"generated {len(index)} samples")
        elif cmd == "stage3":
            row = stage3_retrain_eval(cfg, mode=opts["mode"],
                                      gen_tag="full" if opts["mode"] == "full" else None,
                                      row={"tag": opts["mode"]})
            print(json.dumps({"tag": row["tag"], "mean_dsc": row["mean_dsc"]}))
        elif cmd == "run-all":
            rows = run_all(cfg)
            for row in rows:
                print(f"{row['tag']}: mean_dsc={row['mean_dsc']:.4f}")
        elif cmd == "eval":
            if not opts["checkpoint"]:
                print("error: eval requires --checkpoint", file=sys.stderr)
                return 1
            print(json.dumps(evaluate_checkpoint(cfg, opts["checkpoint"]), sort_keys=True))
        elif cmd == "ablate":
            if not opts["axis"]:
                print("error: ablate requires --axis", file=sys.stderr)
                return 1
            rows = ablate(cfg, opts["axis"])
            for row in rows:
                print(f"{row['tag']}: mean_dsc={row['mean_dsc']:.4f}")
        return 0
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except VoxAdaptError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(cli_dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
