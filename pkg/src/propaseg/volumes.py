"""Volume data model and the PVOL1 on-disk container.

A volume is a (C, D, H, W) float32 scalar field with physical (z, y, x)
spacing in mm. Binary masks and probabilistic predictions over the same
(D, H, W) grid live here too. The PVOL1 format is a single JSON header
line followed by the raw little-endian payload, so any language can read
it without an imaging library.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

PVOL_MAGIC = "PVOL1"

AXES = ("axial", "coronal", "sagittal")
# axial = fixed depth (z) index, coronal = fixed height (y), sagittal = fixed width (x)
_AXIS_DIM = {"axial": 0, "coronal": 1, "sagittal": 2}


class VolumeValidationError(ValueError):
    """An array or header violates a volume invariant."""


class VolumeFormatError(RuntimeError):
    """A PVOL1 file is malformed (bad magic, header, or payload size)."""


def _check_spacing(spacing) -> tuple[float, float, float]:
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3 or any(s <= 0 or not np.isfinite(s) for s in spacing):
        raise VolumeValidationError(f"spacing must be 3 positive mm values, got {spacing}")
    return spacing


@dataclass(frozen=True)
class Volume:
    """Multi-channel 3D image: data (C, D, H, W) float32, spacing (z, y, x) mm."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (2.5, 1.0, 1.0)
    modality_tags: tuple[str, ...] = ("CT",)

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.ndim != 4:
            raise VolumeValidationError(f"volume data must be (C, D, H, W), got shape {arr.shape}")
        c, d, h, w = arr.shape
        if c not in (1, 2):
            raise VolumeValidationError(f"channel count must be 1 or 2, got {c}")
        if min(d, h, w) < 1:
            raise VolumeValidationError(f"spatial dims must be >= 1, got {(d, h, w)}")
        if not np.isfinite(arr).all():
            raise VolumeValidationError("volume contains NaN or Inf")
        arr = np.ascontiguousarray(arr)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))
        object.__setattr__(self, "modality_tags", tuple(str(t) for t in self.modality_tags))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape[1:]

    @property
    def channels(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True)
class MaskVolume:
    """Binary label over (D, H, W)."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (2.5, 1.0, 1.0)

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3:
            raise VolumeValidationError(f"mask data must be (D, H, W), got shape {arr.shape}")
        if arr.dtype != np.bool_:
            uniq = np.unique(arr)
            if not np.isin(uniq, (0, 1)).all():
                raise VolumeValidationError("mask values must be 0/1")
            arr = arr.astype(np.bool_)
        arr = np.ascontiguousarray(arr)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass(frozen=True)
class PredictionVolume:
    """Foreground probabilities over (D, H, W) with a binarization threshold."""

    prob: np.ndarray
    threshold: float = 0.5
    spacing: tuple[float, float, float] = (2.5, 1.0, 1.0)

    def __post_init__(self):
        arr = np.asarray(self.prob, dtype=np.float32)
        if arr.ndim != 3:
            raise VolumeValidationError(f"prediction must be (D, H, W), got shape {arr.shape}")
        if not np.isfinite(arr).all() or arr.min() < 0.0 or arr.max() > 1.0:
            raise VolumeValidationError("probabilities must be finite and within [0, 1]")
        arr = np.ascontiguousarray(arr)
        arr.setflags(write=False)
        object.__setattr__(self, "prob", arr)
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def binary(self) -> np.ndarray:
        return self.prob >= self.threshold

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.prob.shape

    def as_mask(self) -> MaskVolume:
        return MaskVolume(self.binary, self.spacing)


# ---------------------------------------------------------------------------
# PVOL1 container
# ---------------------------------------------------------------------------

_DTYPES = {"f32le": np.dtype("<f4"), "u8": np.dtype("u1")}


def _write_container(path, dims, dtype_name: str, spacing, modalities, payload: np.ndarray):
    header = {
        "magic": PVOL_MAGIC,
        "dims": [int(x) for x in dims],
        "dtype": dtype_name,
        "spacing_mm": [float(s) for s in spacing],
        "modalities": list(modalities),
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8"))
        fh.write(b"\n")
        fh.write(np.ascontiguousarray(payload, dtype=_DTYPES[dtype_name]).tobytes())


def _read_container(path):
    with open(path, "rb") as fh:
        line = fh.readline()
        payload = fh.read()
    try:
        header = json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise VolumeFormatError(f"{path}: unreadable header: {exc}") from exc
    if not isinstance(header, dict) or header.get("magic") != PVOL_MAGIC:
        raise VolumeFormatError(f"{path}: bad magic, expected {PVOL_MAGIC!r}")
    dims = header.get("dims")
    dtype_name = header.get("dtype")
    if dtype_name not in _DTYPES:
        raise VolumeFormatError(f"{path}: unsupported dtype {dtype_name!r}")
    if not isinstance(dims, list) or len(dims) != 4 or any(not isinstance(x, int) for x in dims):
        raise VolumeFormatError(f"{path}: dims must be 4 integers, got {dims!r}")
    dtype = _DTYPES[dtype_name]
    expected = int(np.prod(dims)) * dtype.itemsize
    if len(payload) != expected:
        raise VolumeFormatError(
            f"{path}: payload is {len(payload)} bytes, header dims {dims} require {expected}"
        )
    arr = np.frombuffer(payload, dtype=dtype).reshape(dims).copy()
    return header, arr


def save_volume(volume: Volume, path) -> None:
    _write_container(
        path, volume.data.shape, "f32le", volume.spacing, volume.modality_tags, volume.data
    )


def load_volume(path) -> Volume:
    header, arr = _read_container(path)
    if header["dtype"] != "f32le":
        raise VolumeFormatError(f"{path}: expected f32le volume, found {header['dtype']}")
    return Volume(arr, tuple(header["spacing_mm"]), tuple(header.get("modalities", ())))


def save_mask(mask: MaskVolume, path) -> None:
    _write_container(
        path, (1, *mask.data.shape), "u8", mask.spacing, ("mask",), mask.data.astype(np.uint8)
    )


def load_mask(path) -> MaskVolume:
    header, arr = _read_container(path)
    if header["dtype"] != "u8":
        raise VolumeFormatError(f"{path}: expected u8 mask, found {header['dtype']}")
    if arr.shape[0] != 1:
        raise VolumeFormatError(f"{path}: mask container must have a single channel")
    if not np.isin(arr, (0, 1)).all():
        raise VolumeFormatError(f"{path}: mask payload contains values other than 0/1")
    return MaskVolume(arr[0].astype(np.bool_), tuple(header["spacing_mm"]))


# ---------------------------------------------------------------------------
# Orthogonal plane access
# ---------------------------------------------------------------------------


def _plane_source(obj) -> np.ndarray:
    if isinstance(obj, PredictionVolume):
        return obj.prob
    if isinstance(obj, MaskVolume):
        return obj.data
    arr = np.asarray(obj)
    if arr.ndim != 3:
        raise VolumeValidationError(f"expected a 3D field, got shape {arr.shape}")
    return arr


def slice_extract(obj, axis: str, index: int) -> np.ndarray:
    """Extract the 2D plane at `index` along the named anatomical axis."""
    arr = _plane_source(obj)
    if axis not in _AXIS_DIM:
        raise ValueError(f"axis must be one of {AXES}, got {axis!r}")
    dim = _AXIS_DIM[axis]
    if not 0 <= index < arr.shape[dim]:
        raise IndexError(f"{axis} index {index} out of range [0, {arr.shape[dim]})")
    return np.take(arr, index, axis=dim).copy()


def slice_insert(arr3d: np.ndarray, axis: str, index: int, plane: np.ndarray) -> np.ndarray:
    """Return a copy of `arr3d` with `plane` written at the given axis/index."""
    arr = np.array(arr3d)
    if axis not in _AXIS_DIM:
        raise ValueError(f"axis must be one of {AXES}, got {axis!r}")
    dim = _AXIS_DIM[axis]
    if not 0 <= index < arr.shape[dim]:
        raise IndexError(f"{axis} index {index} out of range [0, {arr.shape[dim]})")
    sel = [slice(None)] * 3
    sel[dim] = index
    expected = slice_extract(arr, axis, index).shape
    plane = np.asarray(plane)
    if plane.shape != expected:
        raise VolumeValidationError(f"plane shape {plane.shape} does not match {expected}")
    arr[tuple(sel)] = plane
    return arr
