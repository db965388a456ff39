"""Segmentation losses: soft dice, softmax cross-entropy, and their sum.

The dice term is computed on softmax foreground probabilities and lies in
[-1, 0]; cross-entropy is averaged per voxel. Either loss can be
restricted to a set of axial slices, which is how far-slice training and
single-slice edit losses are expressed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import torch
import torch.nn.functional as F

LOSS_KINDS = ("dice", "hybrid")


@dataclass(frozen=True)
class LossConfig:
    kind: str = "hybrid"  # "dice" or "hybrid" (= cross-entropy + dice)

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"loss kind must be one of {LOSS_KINDS}, got {self.kind!r}")


def _as_tensor(x, ref: Optional[torch.Tensor] = None) -> torch.Tensor:
    t = torch.as_tensor(x)
    if t.dtype == torch.bool:
        t = t.to(ref.dtype if ref is not None else torch.float32)
    return t


def _restrict(t: torch.Tensor, region: Optional[Sequence[int]], slice_dim: int) -> torch.Tensor:
    if region is None:
        return t
    idx = sorted(int(s) for s in set(region))
    if not idx:
        raise ValueError("loss region is empty")
    if idx[0] < 0 or idx[-1] >= t.shape[slice_dim]:
        raise ValueError(f"region {idx} outside [0, {t.shape[slice_dim]})")
    return t.index_select(slice_dim, torch.as_tensor(idx, device=t.device))


def dice_loss(probs, target, region: Optional[Iterable[int]] = None) -> torch.Tensor:
    """Soft dice loss -2*sum(p*y) / (sum(p) + sum(y)), in [-1, 0]."""
    p = _as_tensor(probs)
    y = _as_tensor(target, p).to(p.dtype)
    if p.shape != y.shape:
        raise ValueError(f"shape mismatch {tuple(p.shape)} vs {tuple(y.shape)}")
    if region is not None:
        p = _restrict(p, list(region), 0)
        y = _restrict(y, list(region), 0)
    denom = p.sum() + y.sum()
    if float(denom.detach()) == 0.0:
        return p.sum() * 0.0  # both empty: defined as 0, keeps graph intact
    return -2.0 * (p * y).sum() / denom


def ce_loss(logits, target, region: Optional[Iterable[int]] = None) -> torch.Tensor:
    """Per-voxel mean softmax cross-entropy over 2-class logits (2, *spatial)."""
    z = _as_tensor(logits)
    y = _as_tensor(target, z)
    if z.shape[0] != 2 or z.shape[1:] != y.shape:
        raise ValueError(f"logits {tuple(z.shape)} incompatible with target {tuple(y.shape)}")
    if region is not None:
        z = _restrict(z, list(region), 1)
        y = _restrict(y, list(region), 0)
    logp = F.log_softmax(z, dim=0)
    yl = y.long()
    picked = torch.gather(logp, 0, yl.unsqueeze(0)).squeeze(0)
    return -picked.mean()


def seg_loss(logits, target, cfg: LossConfig, region: Optional[Iterable[int]] = None) -> torch.Tensor:
    """Configured segmentation loss on 2-class logits, optionally slice-restricted."""
    region = None if region is None else list(region)
    z = _as_tensor(logits)
    probs = torch.softmax(z, dim=0)[1]
    loss = dice_loss(probs, target, region)
    if cfg.kind == "hybrid":
        loss = loss + ce_loss(z, target, region)
    return loss
