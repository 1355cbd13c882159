"""Pseudo-label generation for unlabeled target volumes.

Per-epoch probability predictions are ensembled by elementwise mean, turned
into hard labels by per-voxel argmax, and accepted or rejected by whole-volume
mean confidence against a threshold. Records serialize as a UVF1 label volume
plus a JSON sidecar.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ShapeMismatchError
from .volume import LabelVolume, ProbVolume, load_volume, save_volume

DEFAULT_CONFIDENCE_TAU = 0.7


@dataclass(frozen=True, eq=False)
class PseudoLabelRecord:
    """Hard pseudo-label plus the acceptance decision that produced it."""

    label: LabelVolume
    mean_confidence: float
    accepted: bool
    source_epochs: tuple[int, ...]


def ensemble_probs(preds: list[ProbVolume]) -> ProbVolume:
    """Elementwise mean of probability fields; channel sums stay normalized."""
    if not preds:
        raise ValueError("cannot ensemble an empty prediction list")
    first = preds[0]
    for p in preds[1:]:
        if p.shape != first.shape or p.num_classes != first.num_classes:
            raise ShapeMismatchError("ensemble members must share shape and class count")
    mean = np.mean([p.data for p in preds], axis=0)
    return ProbVolume(first.shape, first.spacing, first.num_classes, mean)


def make_pseudo_label(
    prob: ProbVolume,
    tau: float = DEFAULT_CONFIDENCE_TAU,
    source_epochs: tuple[int, ...] = (),
) -> PseudoLabelRecord:
    """Argmax labels (ties to the lowest class id) with volume-level acceptance.

    mean_confidence is the mean over voxels of the winning channel probability;
    the record is accepted iff it reaches tau.
    """
    if not (0.0 < tau < 1.0):
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    confidence = float(prob.data.max(axis=0).mean())
    return PseudoLabelRecord(
        label=prob.argmax_labels(),
        mean_confidence=confidence,
        accepted=confidence >= tau,
        source_epochs=tuple(int(e) for e in source_epochs),
    )


def save_record(record: PseudoLabelRecord, label_path, meta_path) -> None:
    save_volume(record.label, label_path)
    meta = {
        "mean_confidence": record.mean_confidence,
        "accepted": record.accepted,
        "source_epochs": list(record.source_epochs),
    }
    Path(meta_path).write_text(json.dumps(meta, sort_keys=True, indent=1), encoding="utf-8")


def load_record(label_path, meta_path) -> PseudoLabelRecord:
    label = load_volume(label_path)
    if not isinstance(label, LabelVolume):
        raise ShapeMismatchError(f"{label_path} does not hold a label volume")
    meta = json.loads(Path(meta_path).read_text(encoding="utf-8"))
    return PseudoLabelRecord(
        label=label,
        mean_confidence=float(meta["mean_confidence"]),
        accepted=bool(meta["accepted"]),
        source_epochs=tuple(int(e) for e in meta["source_epochs"]),
    )
