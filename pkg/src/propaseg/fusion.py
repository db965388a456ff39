"""Two-stream fusion network repairing far slices after a feature update.

Original and updated feature maps each pass through an input block whose
first conv has stride 2x2x2 and expands channels 8x, widening the
effective receptive field along z. The streams are upsampled back,
concatenated, and reduced by a join block and an output block down to
the original channel count, so the fused map drops into the same decode
head. Every block is three Conv3d-InstanceNorm3d-ReLU sub-blocks.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .backbone import (
    FeatureMap,
    SegModel,
    ShapeError,
    TrainingDivergenceError,
    frozen_params,
    state_checksum,
)
from .losses import seg_loss
from .metrics import worst_slice
from .update import SliceEdit, UpdateConfig, update_features
from .volumes import MaskVolume, Volume

FUSION_CHECKPOINT_FORMAT = "propaseg-fusion-v1"


def _block(cin: int, cout: int, first_stride: int = 1) -> nn.Sequential:
    def sub(a, b, stride):
        return nn.Sequential(
            nn.Conv3d(a, b, 3, stride=stride, padding=1),
            nn.InstanceNorm3d(b, affine=True),
            nn.ReLU(inplace=True),
        )

    return nn.Sequential(sub(cin, cout, first_stride), sub(cout, cout, 1), sub(cout, cout, 1))


class _FusionNet(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        wide = 8 * channels
        self.stream_original = _block(channels, wide, first_stride=2)
        self.stream_updated = _block(channels, wide, first_stride=2)
        self.join = _block(2 * wide, wide)
        self.out = _block(wide, channels)

    def forward(self, f_orig: torch.Tensor, f_upd: torch.Tensor) -> torch.Tensor:
        a = self.stream_original(f_orig)
        b = self.stream_updated(f_upd)
        a = F.interpolate(a, scale_factor=2, mode="trilinear", align_corners=False)
        b = F.interpolate(b, scale_factor=2, mode="trilinear", align_corners=False)
        return self.out(self.join(torch.cat([a, b], dim=1)))


class FusionModel:
    """Fusion net bound to one tap shape and (optionally) one base model."""

    def __init__(self, net: _FusionNet, tap_shape, tap_level: int, base_checksum: Optional[str] = None):
        self.net = net
        self.tap_shape = tuple(int(x) for x in tap_shape)
        self.tap_level = int(tap_level)
        self.base_checksum = base_checksum

    def fuse(self, f_orig: FeatureMap, f_upd: FeatureMap) -> FeatureMap:
        for fm in (f_orig, f_upd):
            if fm.shape != self.tap_shape:
                raise ShapeError(f"feature shape {fm.shape} != fusion tap shape {self.tap_shape}")
        dtype = next(self.net.parameters()).dtype
        with torch.no_grad():
            fused = self.net(
                torch.from_numpy(np.array(f_orig.data)).to(dtype).unsqueeze(0),
                torch.from_numpy(np.array(f_upd.data)).to(dtype).unsqueeze(0),
            ).squeeze(0)
        return FeatureMap(fused.numpy().astype(np.float32), self.tap_level, "fused")

    def weight_checksum(self) -> str:
        return state_checksum(self.net)

    def save(self, path) -> None:
        manifest = {
            "format": FUSION_CHECKPOINT_FORMAT,
            "tap_shape": list(self.tap_shape),
            "tap_level": self.tap_level,
            "base_checksum": self.base_checksum,
        }
        torch.save({"manifest": manifest, "state": self.net.state_dict()}, path)

    @classmethod
    def load(cls, path, base: Optional[SegModel] = None) -> "FusionModel":
        from .backbone import CheckpointError

        blob = torch.load(path, map_location="cpu", weights_only=True)
        manifest = blob.get("manifest", {})
        if manifest.get("format") != FUSION_CHECKPOINT_FORMAT:
            raise CheckpointError(f"{path}: not a {FUSION_CHECKPOINT_FORMAT} checkpoint")
        net = _FusionNet(int(manifest["tap_shape"][0]))
        model = cls(net, manifest["tap_shape"], manifest["tap_level"], manifest.get("base_checksum"))
        try:
            net.load_state_dict(blob["state"])
        except RuntimeError as exc:
            raise CheckpointError(f"{path}: state does not fit manifest: {exc}")
        if base is not None:
            model.verify_base(base)
        return model

    def verify_base(self, base: SegModel) -> None:
        from .backbone import CheckpointError

        if self.base_checksum is not None and self.base_checksum != base.weight_checksum():
            raise CheckpointError("fusion checkpoint was trained against a different base model")
        if self.tap_level != base.tap_level:
            raise ShapeError(
                f"fusion tap level {self.tap_level} != base tap level {base.tap_level}"
            )


def build_fusion(tap_shape: Sequence[int], tap_level: int = 2, seed: int = 0) -> FusionModel:
    """Construct an untrained fusion model for the given tap shape."""
    tap_shape = tuple(int(x) for x in tap_shape)
    if len(tap_shape) != 4:
        raise ShapeError(f"tap shape must be (C', D', H', W'), got {tap_shape}")
    if any(d % 2 != 0 or d < 2 for d in tap_shape[1:]):
        raise ShapeError(f"tap spatial dims {tap_shape[1:]} must be even (stride-2 input block)")
    torch.manual_seed(seed)
    return FusionModel(_FusionNet(tap_shape[0]), tap_shape, tap_level)


def fuse(model: FusionModel, f_orig: FeatureMap, f_upd: FeatureMap) -> FeatureMap:
    return model.fuse(f_orig, f_upd)


def simulate_edit(
    seg: SegModel, volume: Volume, label: MaskVolume, update_cfg: UpdateConfig
) -> tuple[FeatureMap, FeatureMap, int]:
    """Worst-slice oracle edit: returns (f, f_updated, edited slice index)."""
    pred, fmap = seg.predict(volume)
    s = worst_slice(pred, label, volume.spacing)
    edit = SliceEdit(s, label.data[s])
    f_upd, trace = update_features(seg, fmap, edit, update_cfg)
    return fmap, f_upd, s


def train_fusion(
    seg: SegModel,
    dataset: Sequence[tuple[Volume, MaskVolume]],
    epochs: int,
    lr: float = 1e-3,
    update_cfg: UpdateConfig = UpdateConfig(),
    neighbor_radius: int = 2,
    seed: int = 0,
    clone_decode_head: bool = False,
    fusion: Optional[FusionModel] = None,
) -> tuple[FusionModel, list[float]]:
    """Train a fusion model against a frozen base; loss on non-neighbor slices only.

    Each case contributes one simulated worst-slice edit. The features
    before/after that edit are precomputed once (the base is frozen, so
    they cannot change across epochs).
    """
    if len(dataset) < 2:
        raise ValueError(f"need at least 2 training cases, got {len(dataset)}")
    dims = dataset[0][0].dims
    tap_shape = seg.tap_shape(dims)
    if fusion is None:
        fusion = build_fusion(tap_shape, seg.tap_level, seed=seed)
    fusion.base_checksum = seg.weight_checksum()

    decode_head = seg
    if clone_decode_head:
        import copy

        decode_head = copy.deepcopy(seg)

    cases = []
    for volume, label in dataset:
        if volume.dims != dims:
            raise ShapeError("all fusion training cases must share the same dims")
        f, f_upd, s = simulate_edit(seg, volume, label, update_cfg)
        region = [z for z in range(dims[0]) if abs(z - s) > neighbor_radius]
        cases.append(
            (
                torch.from_numpy(np.array(f.data)).unsqueeze(0),
                torch.from_numpy(np.array(f_upd.data)).unsqueeze(0),
                torch.from_numpy(label.data.astype(np.int64)),
                region,
            )
        )

    rng = np.random.default_rng(seed)
    opt = torch.optim.Adam(fusion.net.parameters(), lr=lr)
    history: list[float] = []
    fusion.net.train()
    with frozen_params(decode_head.net):
        for epoch in range(epochs):
            order = rng.permutation(len(cases))
            total = 0.0
            for i in order:
                fa, fb, target, region = cases[i]
                fused = fusion.net(fa, fb).squeeze(0)
                logits = decode_head.decode_logits(fused)
                loss = seg_loss(logits, target, seg.loss, region)
                lv = float(loss.detach())
                if not np.isfinite(lv):
                    raise TrainingDivergenceError(
                        f"non-finite fusion loss at epoch {epoch}, case {i}"
                    )
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += lv
            history.append(total / len(cases))
    fusion.net.eval()
    return fusion, history
