"""propaseg: interactive 3D segmentation refinement.

A single edited 2D slice of a volumetric prediction is propagated to
neighboring slices by gradient optimization of a cached feature map, and
to distant slices by a learned fusion of original and updated features,
without retraining or modifying the base segmentation model.
"""

from .backbone import (
    FeatureMap,
    SegModel,
    ShapeError,
    TrainingDivergenceError,
    build_backbone,
    decode_from,
    predict,
    train_backbone,
)
from .fusion import FusionModel, build_fusion, fuse, train_fusion
from .losses import LossConfig, ce_loss, dice_loss, seg_loss
from .metrics import MetricReport, compute_report, dsc, hd95, sensitivity, specificity, worst_slice
from .orchestrator import DuplicateEditError, Session, neighborhood
from .phantoms import PhantomConfig, PhantomConfigError, make_phantom
from .update import SliceEdit, UpdateConfig, UpdateTrace, slice_loss, update_features
from .volumes import (
    MaskVolume,
    PredictionVolume,
    Volume,
    VolumeFormatError,
    VolumeValidationError,
    load_mask,
    load_volume,
    save_mask,
    save_volume,
    slice_extract,
    slice_insert,
)

__version__ = "0.1.0"

__all__ = [
    "FeatureMap",
    "FusionModel",
    "LossConfig",
    "MaskVolume",
    "MetricReport",
    "PhantomConfig",
    "PhantomConfigError",
    "PredictionVolume",
    "SegModel",
    "Session",
    "ShapeError",
    "SliceEdit",
    "TrainingDivergenceError",
    "UpdateConfig",
    "UpdateTrace",
    "Volume",
    "VolumeFormatError",
    "VolumeValidationError",
    "build_backbone",
    "build_fusion",
    "ce_loss",
    "compute_report",
    "decode_from",
    "dice_loss",
    "dsc",
    "DuplicateEditError",
    "fuse",
    "hd95",
    "load_mask",
    "load_volume",
    "make_phantom",
    "neighborhood",
    "predict",
    "save_mask",
    "save_volume",
    "seg_loss",
    "sensitivity",
    "slice_extract",
    "slice_insert",
    "slice_loss",
    "specificity",
    "train_backbone",
    "train_fusion",
    "update_features",
    "worst_slice",
]
