"""Segmentation quality metrics: DSC, 95% Hausdorff distance, sensitivity,
specificity, and worst-slice selection.

Hausdorff distances are surface distances: directed point-to-set
distances between boundary voxels, Euclidean in mm, pooled over both
directions before taking the percentile. When exactly one of the two
sets is empty the distance is defined as the bounding-box diagonal of
the field in mm.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import binary_erosion, generate_binary_structure
from scipy.spatial import cKDTree

from .volumes import MaskVolume, PredictionVolume


def _as_binary(obj) -> np.ndarray:
    if isinstance(obj, PredictionVolume):
        return obj.binary
    if isinstance(obj, MaskVolume):
        return obj.data
    return np.asarray(obj).astype(bool)


def _check_same_dims(p: np.ndarray, y: np.ndarray) -> None:
    if p.shape != y.shape:
        raise ValueError(f"dim mismatch {p.shape} vs {y.shape}")


def dsc(pred, label) -> float:
    """Dice similarity coefficient; both-empty counts as perfect agreement."""
    p, y = _as_binary(pred), _as_binary(label)
    _check_same_dims(p, y)
    denom = int(p.sum()) + int(y.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & y).sum()) / denom


def sensitivity(pred, label) -> float:
    p, y = _as_binary(pred), _as_binary(label)
    _check_same_dims(p, y)
    ny = int(y.sum())
    if ny == 0:
        raise ValueError("sensitivity undefined for an empty label")
    return int((p & y).sum()) / ny


def specificity(pred, label) -> float:
    p, y = _as_binary(pred), _as_binary(label)
    _check_same_dims(p, y)
    nyc = int((~y).sum())
    if nyc == 0:
        raise ValueError("specificity undefined when the label covers everything")
    return int((~p & ~y).sum()) / nyc


def _surface_coords(mask: np.ndarray) -> np.ndarray:
    if not mask.any():
        return np.zeros((0, mask.ndim), dtype=np.int64)
    struct = generate_binary_structure(mask.ndim, 1)  # face connectivity
    eroded = binary_erosion(mask, structure=struct, border_value=0)
    return np.argwhere(mask & ~eroded)


def bounding_diagonal_mm(shape, spacing) -> float:
    return float(np.sqrt(sum((n * s) ** 2 for n, s in zip(shape, spacing))))


def _pooled_surface_distances(p: np.ndarray, y: np.ndarray, spacing) -> np.ndarray:
    sp = np.asarray(spacing, dtype=np.float64)
    cp = _surface_coords(p) * sp
    cy = _surface_coords(y) * sp
    d_py = cKDTree(cy).query(cp)[0]
    d_yp = cKDTree(cp).query(cy)[0]
    return np.concatenate([d_py, d_yp])


def hausdorff(pred, label, spacing, percentile: float = 95.0) -> float:
    """Percentile of pooled directed surface distances in mm (100 = classic HD)."""
    p, y = _as_binary(pred), _as_binary(label)
    _check_same_dims(p, y)
    if len(spacing) != p.ndim:
        raise ValueError(f"spacing has {len(spacing)} components for a {p.ndim}D field")
    if not p.any() and not y.any():
        return 0.0
    if not p.any() or not y.any():
        return bounding_diagonal_mm(p.shape, spacing)
    return float(np.percentile(_pooled_surface_distances(p, y, spacing), percentile))


def hd95(pred, label, spacing) -> float:
    return hausdorff(pred, label, spacing, percentile=95.0)


def worst_slice(pred, label, spacing, exclude=()) -> int:
    """Axial index with the largest per-slice 2D Hausdorff distance.

    Slices where prediction and label are both empty are skipped; slices
    where exactly one is empty score the in-plane diagonal. Ties resolve
    to the lowest index.
    """
    p, y = _as_binary(pred), _as_binary(label)
    _check_same_dims(p, y)
    if p.ndim != 3:
        raise ValueError("worst_slice expects 3D fields")
    plane_spacing = tuple(spacing)[1:]
    excluded = set(int(e) for e in exclude)
    best_idx, best_d = None, -1.0
    for z in range(p.shape[0]):
        if z in excluded:
            continue
        pz, yz = p[z], y[z]
        if not pz.any() and not yz.any():
            continue
        d = hausdorff(pz, yz, plane_spacing, percentile=100.0)
        if d > best_d:
            best_idx, best_d = z, d
    if best_idx is None:
        raise ValueError("no slice has any foreground in prediction or label")
    return best_idx


@dataclass(frozen=True)
class MetricReport:
    dsc: float
    hd95_mm: float
    sensitivity: float
    specificity: float
    per_slice_dsc: tuple[float, ...]
    per_slice_hd_mm: tuple[float, ...]

    def to_json(self) -> dict:
        return {
            "dsc": self.dsc,
            "hd95_mm": self.hd95_mm,
            "sensitivity": self.sensitivity,
            "specificity": self.specificity,
            "per_slice_dsc": list(self.per_slice_dsc),
            "per_slice_hd_mm": list(self.per_slice_hd_mm),
        }


def compute_report(pred, label, spacing) -> MetricReport:
    """Full metric suite for a prediction/label pair over the same grid."""
    p, y = _as_binary(pred), _as_binary(label)
    _check_same_dims(p, y)
    plane_spacing = tuple(spacing)[1:]
    per_dsc, per_hd = [], []
    for z in range(p.shape[0]):
        per_dsc.append(dsc(p[z], y[z]))
        per_hd.append(hausdorff(p[z], y[z], plane_spacing, percentile=100.0))
    return MetricReport(
        dsc=dsc(p, y),
        hd95_mm=hd95(p, y, spacing),
        sensitivity=sensitivity(p, y) if y.any() else 1.0,
        specificity=specificity(p, y) if not y.all() else 1.0,
        per_slice_dsc=tuple(per_dsc),
        per_slice_hd_mm=tuple(per_hd),
    )
