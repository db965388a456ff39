"""Gradient-based feature map update driven by a single edited slice.

The cached tap activation is treated as the optimization variable: the
loss between the decoded slice and the user's mask is backpropagated
through the frozen decode head and the feature map is stepped with Adam
or LBFGS until the slice loss drops below tolerance or the iteration
budget runs out. Model weights are never touched.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import torch

from .backbone import FeatureMap, SegModel, ShapeError, frozen_params
from .losses import LossConfig, ce_loss, dice_loss

OPTIMIZERS = ("adam", "lbfgs")


@dataclass(frozen=True)
class SliceEdit:
    """A user-corrected axial slice: index s plus its binary (H, W) mask."""

    slice_index: int
    mask: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.mask)
        if arr.ndim != 2:
            raise ShapeError(f"edit mask must be 2D, got shape {arr.shape}")
        arr = arr.astype(np.bool_)
        arr.setflags(write=False)
        object.__setattr__(self, "mask", arr)
        object.__setattr__(self, "slice_index", int(self.slice_index))
        if self.slice_index < 0:
            raise ShapeError(f"slice index must be >= 0, got {self.slice_index}")


@dataclass(frozen=True)
class UpdateConfig:
    optimizer: str = "adam"  # "adam" | "lbfgs"
    lr: float = 1e-2
    max_iters: int = 50
    loss_tolerance: float = 1e-3
    loss: LossConfig = field(default_factory=LossConfig)
    lbfgs_history: int = 10

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.lr <= 0:
            raise ValueError("learning rate must be > 0")

    def to_json(self) -> dict:
        return {
            "optimizer": self.optimizer,
            "lr": self.lr,
            "max_iters": self.max_iters,
            "loss_tolerance": self.loss_tolerance,
            "loss_kind": self.loss.kind,
            "lbfgs_history": self.lbfgs_history,
        }

    @classmethod
    def from_json(cls, payload: dict) -> "UpdateConfig":
        payload = dict(payload)
        kind = payload.pop("loss_kind", None)
        if kind is not None:
            payload["loss"] = LossConfig(kind)
        return cls(**payload)


# The dice term is bounded below by -1, so raw losses of both kinds reach
# -1 at a perfect confident fit. Convergence compares the excess above
# that floor against the tolerance.
LOSS_FLOOR = -1.0


@dataclass
class UpdateTrace:
    """Per-iteration slice losses plus termination flags."""

    losses: list[float]
    iterations: int = 0
    converged: bool = False
    diverged: bool = False
    grad_support: Optional[np.ndarray] = None  # bool (C', D', H', W'), union over iterations

    @property
    def initial_loss(self) -> float:
        return self.losses[0]

    @property
    def final_loss(self) -> float:
        return min(self.losses) if self.losses else float("nan")


def _validate_edit(model: SegModel, fmap: FeatureMap, edit: SliceEdit) -> None:
    model._check_feature(fmap)
    scale = 2 ** (model.tap_level - 1)
    depth = fmap.shape[1] * scale
    plane = (fmap.shape[2] * scale, fmap.shape[3] * scale)
    if not 0 <= edit.slice_index < depth:
        raise ShapeError(f"edit slice {edit.slice_index} out of range [0, {depth})")
    if edit.mask.shape != plane:
        raise ShapeError(f"edit mask {edit.mask.shape} does not match plane {plane}")


def slice_loss_tensor(
    model: SegModel, f: torch.Tensor, edit: SliceEdit, cfg: LossConfig
) -> torch.Tensor:
    """Differentiable loss between decode(f) at the edited slice and the edit mask."""
    logits = model.decode_logits(f)[:, edit.slice_index]
    target = torch.from_numpy(edit.mask.astype(np.float32)).to(logits.dtype)
    probs = torch.softmax(logits, dim=0)[1]
    loss = dice_loss(probs, target)
    if cfg.kind == "hybrid":
        loss = loss + ce_loss(logits, target)
    return loss


def slice_loss(model: SegModel, fmap: FeatureMap, edit: SliceEdit, cfg: LossConfig) -> float:
    """Loss of the decoded edited slice against the edit, weights untouched."""
    _validate_edit(model, fmap, edit)
    dtype = next(model.net.parameters()).dtype
    with torch.no_grad():
        f = torch.from_numpy(np.array(fmap.data)).to(dtype)
        return float(slice_loss_tensor(model, f, edit, cfg))


def update_features(
    model: SegModel, fmap: FeatureMap, edit: SliceEdit, cfg: UpdateConfig = UpdateConfig()
) -> tuple[FeatureMap, UpdateTrace]:
    """Optimize the feature map toward the edit; returns the best iterate found.

    Stops when the slice loss comes within cfg.loss_tolerance of its -1
    floor or after cfg.max_iters optimizer steps. A non-finite loss or
    gradient aborts the run and the best finite iterate is returned with
    diverged=True.
    """
    _validate_edit(model, fmap, edit)
    dtype = next(model.net.parameters()).dtype
    f = torch.from_numpy(np.array(fmap.data)).to(dtype).requires_grad_(True)
    trace = UpdateTrace(losses=[], grad_support=np.zeros(fmap.shape, dtype=bool))

    with frozen_params(model.net):
        best_loss = float("inf")
        best_f = f.detach().clone()

        def evaluate() -> tuple[torch.Tensor, float]:
            loss = slice_loss_tensor(model, f, edit, cfg.loss)
            return loss, float(loss.detach())

        def note(lv: float) -> bool:
            """Record a finite iterate; returns True when converged."""
            nonlocal best_loss, best_f
            trace.losses.append(lv)
            if lv < best_loss:
                best_loss = lv
                best_f = f.detach().clone()
            return lv - LOSS_FLOOR < cfg.loss_tolerance

        loss, lv = evaluate()
        if not np.isfinite(lv):
            trace.diverged = True
            trace.losses.append(lv)
        elif note(lv):
            trace.converged = True
        elif cfg.optimizer == "adam":
            opt = torch.optim.Adam([f], lr=cfg.lr)
            for _ in range(cfg.max_iters):
                opt.zero_grad()
                loss.backward()
                if not torch.isfinite(f.grad).all():
                    trace.diverged = True
                    break
                trace.grad_support |= (f.grad != 0).numpy()
                opt.step()
                trace.iterations += 1
                loss, lv = evaluate()
                if not np.isfinite(lv):
                    trace.diverged = True
                    break
                if note(lv):
                    trace.converged = True
                    break
        else:
            opt = torch.optim.LBFGS(
                [f],
                lr=cfg.lr,
                max_iter=cfg.max_iters,
                history_size=cfg.lbfgs_history,
                line_search_fn="strong_wolfe",
            )

            class _Abort(Exception):
                pass

            def closure():
                nonlocal best_loss, best_f
                opt.zero_grad()
                loss = slice_loss_tensor(model, f, edit, cfg.loss)
                lv = float(loss.detach())
                if not np.isfinite(lv):
                    raise _Abort
                trace.losses.append(lv)
                trace.iterations += 1
                if lv < best_loss:
                    best_loss = lv
                    best_f = f.detach().clone()
                loss.backward()
                if not torch.isfinite(f.grad).all():
                    raise _Abort
                trace.grad_support |= (f.grad != 0).numpy()
                return loss

            try:
                opt.step(closure)
                _, lv = evaluate()
                if np.isfinite(lv):
                    trace.converged = note(lv) or best_loss - LOSS_FLOOR < cfg.loss_tolerance
                else:
                    trace.diverged = True
            except _Abort:
                trace.diverged = True

    updated = FeatureMap(
        best_f.detach().numpy().astype(np.float32), fmap.tap_level, "updated"
    )
    return updated, trace


def fallback_to_original(fmap: FeatureMap) -> FeatureMap:
    """Relabel the original features as the update result (divergence fallback)."""
    return replace(fmap, provenance="updated")
