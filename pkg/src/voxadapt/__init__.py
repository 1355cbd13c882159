"""voxadapt: desk-scale unsupervised domain adaptation for 3D segmentation.

Frequency-domain appearance transfer, deformable augmentation, teacher-student
consistency training, a conditional denoising-diffusion generator,
pseudo-labeling, and surface/overlap metrics, orchestrated end-to-end on
synthetic two-domain phantom data.
"""

from .errors import VoxAdaptError
from .volume import (
    LabelVolume,
    ProbVolume,
    ScalarVolume,
    Shape3,
    Spacing3,
    histogram,
    load_volume,
    normalize_minmax,
    save_volume,
)

__version__ = "0.1.0"

__all__ = [
    "VoxAdaptError",
    "Shape3",
    "Spacing3",
    "ScalarVolume",
    "LabelVolume",
    "ProbVolume",
    "normalize_minmax",
    "histogram",
    "save_volume",
    "load_volume",
    "__version__",
]
