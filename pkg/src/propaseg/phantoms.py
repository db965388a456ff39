"""Synthetic lesion phantoms used in place of clinical CT / CT-PET data.

Two families: a compact stack of drifting ellipses (nasopharyngeal-like)
and a long curved tube (esophageal-like, stresses the receptive field
along z). Cross-sections change gradually slice to slice so that a
single-slice edit carries information about its neighbors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .volumes import MaskVolume, Volume

KINDS = ("ellipsoid-stack", "curved-tube")

MIN_LESION_SLICES = 8
FG_FRACTION_RANGE = (0.001, 0.10)


class PhantomConfigError(ValueError):
    """Configuration cannot produce a valid phantom."""


@dataclass(frozen=True)
class PhantomConfig:
    dims: tuple[int, int, int] = (32, 64, 64)
    kind: str = "ellipsoid-stack"
    drift_rate: float = 0.35  # in-plane contour drift per slice, voxels
    noise_std: float = 0.08
    second_channel: bool = False  # add a pseudo-PET channel
    seed: int = 0
    spacing: tuple[float, float, float] = (2.5, 1.0, 1.0)

    def __post_init__(self):
        d, h, w = self.dims
        if self.kind not in KINDS:
            raise PhantomConfigError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if d < MIN_LESION_SLICES:
            raise PhantomConfigError(
                f"depth {d} cannot host a lesion spanning {MIN_LESION_SLICES} slices"
            )
        if h < 16 or w < 16:
            raise PhantomConfigError(f"plane {h}x{w} too small to host a lesion (need >= 16x16)")
        if not 0.0 <= self.drift_rate <= 1.0:
            raise PhantomConfigError(f"drift_rate must be in [0, 1], got {self.drift_rate}")
        if self.noise_std < 0:
            raise PhantomConfigError("noise_std must be >= 0")


def _ellipse_mask(h, w, cy, cx, ry, rx, angle) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    dy, dx = yy - cy, xx - cx
    ca, sa = np.cos(angle), np.sin(angle)
    u = (dy * ca + dx * sa) / ry
    v = (-dy * sa + dx * ca) / rx
    return u * u + v * v <= 1.0


def _ellipsoid_stack(cfg: PhantomConfig, rng: np.random.Generator) -> np.ndarray:
    d, h, w = cfg.dims
    span_hi = max(MIN_LESION_SLICES, min(d - 2, int(round(d * 0.6))))
    span = int(rng.integers(MIN_LESION_SLICES, span_hi + 1))
    lo = int(rng.integers(0, d - span + 1)) if span < d else 0

    ry = h / 7.0 + rng.uniform(-0.5, 0.5)
    rx = w / 7.0 + rng.uniform(-0.5, 0.5)
    angle = rng.uniform(0, np.pi)
    margin_y, margin_x = ry + 2.0, rx + 2.0
    cy = h / 2.0 + rng.uniform(-h / 10.0, h / 10.0)
    cx = w / 2.0 + rng.uniform(-w / 10.0, w / 10.0)
    heading = rng.uniform(0, 2 * np.pi)

    mask = np.zeros(cfg.dims, dtype=bool)
    for k in range(span):
        mask[lo + k] = _ellipse_mask(h, w, cy, cx, ry, rx, angle)
        heading += rng.normal(0.0, 0.4)
        cy = float(np.clip(cy + cfg.drift_rate * np.sin(heading), margin_y, h - margin_y))
        cx = float(np.clip(cx + cfg.drift_rate * np.cos(heading), margin_x, w - margin_x))
    return mask


def _curved_tube(cfg: PhantomConfig, rng: np.random.Generator) -> np.ndarray:
    d, h, w = cfg.dims
    # the tube runs through the whole scan extent, like a long esophageal GTV
    span, lo = d, 0
    radius = max(2.2, min(h, w) / 10.0) + rng.uniform(-0.3, 0.3)

    # amplitude derived from drift_rate so |dc/dz| stays below the drift budget
    def curve_params():
        freq = rng.uniform(0.8, 1.4)
        phase = rng.uniform(0, 2 * np.pi)
        amp = cfg.drift_rate * rng.uniform(0.6, 1.0) * d / (2 * np.pi * freq)
        return freq, phase, amp

    fy, py, ay = curve_params()
    fx, px, ax = curve_params()
    ay = min(ay, h / 2.0 - radius - 2.0)
    ax = min(ax, w / 2.0 - radius - 2.0)
    cy0 = h / 2.0 + rng.uniform(-h / 12.0, h / 12.0)
    cx0 = w / 2.0 + rng.uniform(-w / 12.0, w / 12.0)

    mask = np.zeros(cfg.dims, dtype=bool)
    for k in range(span):
        z = lo + k
        cy = cy0 + ay * np.sin(2 * np.pi * fy * z / d + py)
        cx = cx0 + ax * np.sin(2 * np.pi * fx * z / d + px)
        mask[z] = _ellipse_mask(h, w, cy, cx, radius, radius, 0.0)
    return mask


def make_phantom(cfg: PhantomConfig) -> tuple[Volume, MaskVolume]:
    """Generate a (Volume, MaskVolume) pair, deterministic in cfg.seed."""
    rng = np.random.default_rng(cfg.seed)
    if cfg.kind == "ellipsoid-stack":
        mask = _ellipsoid_stack(cfg, rng)
    else:
        mask = _curved_tube(cfg, rng)

    frac = mask.mean()
    if not FG_FRACTION_RANGE[0] <= frac <= FG_FRACTION_RANGE[1]:
        raise PhantomConfigError(
            f"foreground fraction {frac:.4%} outside {FG_FRACTION_RANGE} for dims {cfg.dims}"
        )

    bg = rng.standard_normal(cfg.dims)
    bg = gaussian_filter(bg, sigma=(2.0, 4.0, 4.0))
    bg = bg / max(bg.std(), 1e-8)
    lesion = gaussian_filter(mask.astype(np.float64), sigma=(0.8, 1.2, 1.2))
    ct = 0.2 + 0.08 * bg + 0.55 * lesion + cfg.noise_std * rng.standard_normal(cfg.dims)

    channels = [ct]
    tags = ["CT"]
    if cfg.second_channel:
        uptake = gaussian_filter(mask.astype(np.float64), sigma=(1.0, 2.0, 2.0))
        pet = 0.05 + 0.9 * uptake + 0.5 * cfg.noise_std * rng.standard_normal(cfg.dims)
        channels.append(pet)
        tags.append("PET")

    volume = Volume(np.stack(channels).astype(np.float32), cfg.spacing, tuple(tags))
    return volume, MaskVolume(mask, cfg.spacing)


def lesion_slices(mask: MaskVolume) -> np.ndarray:
    """Indices of axial slices with any foreground."""
    return np.flatnonzero(mask.data.any(axis=(1, 2)))
