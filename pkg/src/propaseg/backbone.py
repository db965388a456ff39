"""Compact 3D encoder-decoder segmentation model with an exposed feature tap.

The network splits at a configurable decoder level: everything up to the
tap produces the cached feature map, everything after it (the decode
head) turns a feature map back into per-voxel probabilities. Decoder
stages are counted from the output: level 1 is the 1x1x1 logit head,
level k adds k-1 upsample+conv stages below it.

The decode path is deliberately free of normalization and skip
connections, so a feature map decodes as a pure function of itself and
perturbing it at one depth can only change output slices inside the
decoder's receptive field.
"""

from __future__ import annotations

import hashlib
import json
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .losses import LossConfig, seg_loss
from .volumes import MaskVolume, PredictionVolume, Volume

PROVENANCES = ("original", "updated", "fused")

CHECKPOINT_FORMAT = "propaseg-backbone-v1"


class ShapeError(ValueError):
    """Input dims are incompatible with the model."""


class TrainingDivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


class CheckpointError(RuntimeError):
    """A checkpoint's manifest does not match its payload or expectations."""


@dataclass(frozen=True)
class FeatureMap:
    """Cached tap activation: data (C', D', H', W') float32."""

    data: np.ndarray
    tap_level: int
    provenance: str = "original"

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.ndim != 4:
            raise ShapeError(f"feature map must be (C', D', H', W'), got {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValueError("feature map contains NaN or Inf")
        if self.provenance not in PROVENANCES:
            raise ValueError(f"provenance must be one of {PROVENANCES}")
        arr = np.ascontiguousarray(arr)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape


def _conv_in_relu(cin, cout, stride=1):
    return nn.Sequential(
        nn.Conv3d(cin, cout, 3, stride=stride, padding=1),
        nn.InstanceNorm3d(cout, affine=True),
        nn.ReLU(inplace=True),
    )


class _SegNet(nn.Module):
    """Encoder with InstanceNorm; norm-free local decoder (see module docstring)."""

    def __init__(self, in_channels: int, base_channels: int, levels: int):
        super().__init__()
        self.in_channels = in_channels
        self.base_channels = base_channels
        self.levels = levels
        ch = [base_channels * 2 ** l for l in range(levels)]

        enc = [nn.Sequential(_conv_in_relu(in_channels, ch[0]), _conv_in_relu(ch[0], ch[0]))]
        for l in range(1, levels):
            enc.append(
                nn.Sequential(
                    _conv_in_relu(ch[l - 1], ch[l], stride=2), _conv_in_relu(ch[l], ch[l])
                )
            )
        self.encoder = nn.ModuleList(enc)

        # decoder stage k (k = levels..2): upsample x2 then conv ch[k-1] -> ch[k-2] + ReLU
        self.dec_convs = nn.ModuleDict(
            {
                str(k): nn.Sequential(nn.Conv3d(ch[k - 1], ch[k - 2], 3, padding=1), nn.ReLU())
                for k in range(2, levels + 1)
            }
        )
        self.head = nn.Conv3d(ch[0], 2, 1)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        for stage in self.encoder:
            x = stage(x)
        return x

    def _dec_stage(self, x: torch.Tensor, k: int) -> torch.Tensor:
        x = F.interpolate(x, scale_factor=2, mode="trilinear", align_corners=False)
        return self.dec_convs[str(k)](x)

    def forward_to_tap(self, x: torch.Tensor, tap_level: int) -> torch.Tensor:
        x = self.encode(x)  # tap at level == levels
        for k in range(self.levels, tap_level, -1):
            x = self._dec_stage(x, k)
        return x

    def decode_from_tap(self, f: torch.Tensor, tap_level: int) -> torch.Tensor:
        for k in range(tap_level, 1, -1):
            f = self._dec_stage(f, k)
        return self.head(f)


class SegModel:
    """A _SegNet plus its split point and training loss configuration."""

    def __init__(self, net: _SegNet, tap_level: int, loss: LossConfig = LossConfig()):
        if not 1 <= tap_level <= net.levels:
            raise ShapeError(f"tap_level {tap_level} must be within [1, {net.levels}]")
        self.net = net
        self.tap_level = tap_level
        self.loss = loss

    # -- shapes ------------------------------------------------------------
    @property
    def levels(self) -> int:
        return self.net.levels

    @property
    def in_channels(self) -> int:
        return self.net.in_channels

    @property
    def base_channels(self) -> int:
        return self.net.base_channels

    def validate_dims(self, channels: int, dims: Sequence[int]) -> None:
        if channels != self.in_channels:
            raise ShapeError(f"model expects {self.in_channels} channels, got {channels}")
        div = 2 ** (self.levels - 1)
        if any(int(d) % div != 0 or d < div for d in dims):
            raise ShapeError(f"dims {tuple(dims)} must be divisible by {div}")

    def tap_shape(self, dims: Sequence[int]) -> tuple[int, int, int, int]:
        """Tap tensor shape for an input of spatial dims (D, H, W), no forward pass."""
        self.validate_dims(self.in_channels, dims)
        scale = 2 ** (self.tap_level - 1)
        c = self.base_channels * scale
        return (c, *(int(d) // scale for d in dims))

    def output_depth(self, fmap: FeatureMap) -> int:
        return fmap.shape[1] * 2 ** (self.tap_level - 1)

    def with_tap(self, tap_level: int) -> "SegModel":
        """A view over the same weights split at a different decoder level."""
        return SegModel(self.net, tap_level, self.loss)

    # -- inference ---------------------------------------------------------
    def _input_tensor(self, volume: Volume) -> torch.Tensor:
        self.validate_dims(volume.channels, volume.dims)
        dtype = next(self.net.parameters()).dtype
        return torch.from_numpy(np.array(volume.data)).to(dtype).unsqueeze(0)

    def decode_logits(self, f: torch.Tensor) -> torch.Tensor:
        """Differentiable decode of a (C', D', H', W') feature tensor to (2, D, H, W) logits."""
        return self.net.decode_from_tap(f.unsqueeze(0), self.tap_level).squeeze(0)

    def _check_feature(self, fmap: FeatureMap) -> None:
        if fmap.tap_level != self.tap_level:
            raise ShapeError(
                f"feature tap level {fmap.tap_level} != model tap level {self.tap_level}"
            )
        c_expect = self.base_channels * 2 ** (self.tap_level - 1)
        if fmap.shape[0] != c_expect:
            raise ShapeError(f"feature has {fmap.shape[0]} channels, expected {c_expect}")

    def decode_from(self, fmap: FeatureMap, spacing=(2.5, 1.0, 1.0)) -> PredictionVolume:
        """Decode a cached feature map; never mutates weights."""
        self._check_feature(fmap)
        dtype = next(self.net.parameters()).dtype
        with torch.no_grad():
            logits = self.decode_logits(torch.from_numpy(np.array(fmap.data)).to(dtype))
            prob = torch.softmax(logits, dim=0)[1]
        return PredictionVolume(prob.numpy().astype(np.float32), spacing=spacing)

    def predict(self, volume: Volume) -> tuple[PredictionVolume, FeatureMap]:
        """Full forward pass returning the prediction and the cached tap activation."""
        x = self._input_tensor(volume)
        with torch.no_grad():
            f = self.net.forward_to_tap(x, self.tap_level).squeeze(0)
        fmap = FeatureMap(f.numpy().astype(np.float32), self.tap_level, "original")
        return self.decode_from(fmap, spacing=volume.spacing), fmap

    # -- receptive field ---------------------------------------------------
    def influence_interval(self, d_lo: int, d_hi: int, depth: int) -> tuple[int, int]:
        """Output slice range that tap depths [d_lo, d_hi] can influence."""
        a, b = d_lo, d_hi
        for _ in range(self.tap_level - 1):
            a, b = 2 * a - 1, 2 * b + 2  # trilinear x2
            a, b = a - 1, b + 1  # 3x3x3 conv
        return max(a, 0), min(b, depth - 1)

    def support_interval(self, s_lo: int, s_hi: int, tap_depth: int) -> tuple[int, int]:
        """Tap depth range whose gradient can be nonzero for output slices [s_lo, s_hi]."""
        a, b = s_lo, s_hi
        for _ in range(self.tap_level - 1):
            a, b = a - 1, b + 1
            a, b = (a - 1) // 2, (b - 1) // 2 + 1
        return max(a, 0), min(b, tap_depth - 1)

    # -- identity / persistence ---------------------------------------------
    def arch_fingerprint(self) -> str:
        desc = {
            "in_channels": self.in_channels,
            "levels": self.levels,
            "base_channels": self.base_channels,
            "params": [[k, list(v.shape)] for k, v in sorted(self.net.state_dict().items())],
        }
        return hashlib.sha256(json.dumps(desc, sort_keys=True).encode()).hexdigest()

    def weight_checksum(self) -> str:
        return state_checksum(self.net)

    def save(self, path) -> None:
        manifest = {
            "format": CHECKPOINT_FORMAT,
            "in_channels": self.in_channels,
            "levels": self.levels,
            "base_channels": self.base_channels,
            "tap_level": self.tap_level,
            "loss_kind": self.loss.kind,
            "arch_sha256": self.arch_fingerprint(),
        }
        torch.save({"manifest": manifest, "state": self.net.state_dict()}, path)

    @classmethod
    def load(cls, path) -> "SegModel":
        blob = torch.load(path, map_location="cpu", weights_only=True)
        manifest = blob.get("manifest", {})
        if manifest.get("format") != CHECKPOINT_FORMAT:
            raise CheckpointError(f"{path}: not a {CHECKPOINT_FORMAT} checkpoint")
        net = _SegNet(manifest["in_channels"], manifest["base_channels"], manifest["levels"])
        model = cls(net, manifest["tap_level"], LossConfig(manifest["loss_kind"]))
        try:
            net.load_state_dict(blob["state"])
        except RuntimeError as exc:
            raise CheckpointError(f"{path}: state does not fit manifest architecture: {exc}")
        if model.arch_fingerprint() != manifest["arch_sha256"]:
            raise CheckpointError(f"{path}: architecture hash mismatch")
        return model


def state_checksum(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().numpy().tobytes())
    return h.hexdigest()


@contextmanager
def frozen_params(module: nn.Module):
    """Temporarily disable gradients on all parameters of `module`."""
    flags = [p.requires_grad for p in module.parameters()]
    for p in module.parameters():
        p.requires_grad_(False)
    try:
        yield
    finally:
        for p, flag in zip(module.parameters(), flags):
            p.requires_grad_(flag)


def build_backbone(
    in_channels: int = 1,
    levels: int = 3,
    base_channels: int = 8,
    tap_level: int = 2,
    loss: LossConfig = LossConfig(),
    seed: int = 0,
) -> SegModel:
    """Construct a randomly initialized model, deterministic in `seed`."""
    if levels < 2:
        raise ShapeError("need at least 2 levels")
    if not 1 <= tap_level <= levels:
        raise ShapeError(f"tap_level {tap_level} must be within [1, {levels}]")
    torch.manual_seed(seed)
    net = _SegNet(in_channels, base_channels, levels)
    return SegModel(net, tap_level, loss)


def predict(model: SegModel, volume: Volume):
    return model.predict(volume)


def decode_from(model: SegModel, fmap: FeatureMap, spacing=(2.5, 1.0, 1.0)) -> PredictionVolume:
    return model.decode_from(fmap, spacing)


def train_backbone(
    model: SegModel,
    dataset: Sequence[tuple[Volume, MaskVolume]],
    epochs: int,
    lr: float = 1e-3,
    cfg: Optional[LossConfig] = None,
    seed: int = 0,
) -> list[float]:
    """Train in place; returns per-epoch mean loss. Raises on divergence."""
    if len(dataset) < 2:
        raise ValueError(f"need at least 2 training cases, got {len(dataset)}")
    cfg = cfg or model.loss
    rng = np.random.default_rng(seed)
    opt = torch.optim.Adam(model.net.parameters(), lr=lr)
    history: list[float] = []
    model.net.train()
    for epoch in range(epochs):
        order = rng.permutation(len(dataset))
        total = 0.0
        for i in order:
            volume, mask = dataset[i]
            x = model._input_tensor(volume)
            target = torch.from_numpy(mask.data.astype(np.int64))
            logits = model.net.decode_from_tap(
                model.net.forward_to_tap(x, model.tap_level), model.tap_level
            ).squeeze(0)
            loss = seg_loss(logits, target, cfg)
            lv = float(loss.detach())
            if not np.isfinite(lv):
                raise TrainingDivergenceError(f"non-finite loss {lv} at epoch {epoch}, case {i}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += lv
        history.append(total / len(dataset))
    model.net.eval()
    return history
