"""Composes refined predictions from the near/far branches and runs
multi-slice edit sessions.

For each edit, slices in the edit's neighborhood take the directly
updated decode; all farther slices take the fused decode, averaged in
probability space with the fused outputs of preceding edits. A slice
claimed as a neighbor stays frozen to that edit's output afterwards.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .backbone import FeatureMap, SegModel
from .fusion import FusionModel
from .metrics import worst_slice
from .update import SliceEdit, UpdateConfig, UpdateTrace, fallback_to_original, update_features
from .volumes import MaskVolume, PredictionVolume, Volume


class DuplicateEditError(ValueError):
    """An edit targets a slice index that was already edited."""


def neighborhood(s: int, radius: int = 2, depth: int = None, claimed: Iterable[int] = ()) -> set[int]:
    """Slice indices served by the direct-update branch for an edit at `s`.

    The window s +/- radius is clamped to [0, depth) and loses indices
    already claimed by earlier edits' neighborhoods, except the edited
    slice itself, which always belongs to its own edit.
    """
    if depth is None:
        raise ValueError("depth is required")
    if not 0 <= s < depth:
        raise ValueError(f"slice {s} out of range [0, {depth})")
    taken = set(int(c) for c in claimed)
    window = set(range(max(0, s - radius), min(depth, s + radius + 1)))
    return (window - taken) | {s}


@dataclass
class EditRecord:
    """One edit's full outcome inside a session."""

    edit: SliceEdit
    features_updated: FeatureMap
    features_fused: FeatureMap
    near_prob: np.ndarray  # decode(f') foreground probabilities, full volume
    fused_prob: np.ndarray  # decode(fuse(f, f')) foreground probabilities
    neighborhood: tuple[int, ...]
    prediction: PredictionVolume
    provenance: tuple[str, ...]
    trace: UpdateTrace
    diverged: bool
    elapsed_s: float


class Session:
    """Single-volume editing session over a frozen base and fusion model."""

    def __init__(
        self,
        volume: Volume,
        model: SegModel,
        fusion: FusionModel,
        update_cfg: UpdateConfig = UpdateConfig(),
        neighbor_radius: int = 2,
        label: Optional[MaskVolume] = None,
    ):
        fusion.verify_base(model)
        self.volume = volume
        self.model = model
        self.fusion = fusion
        self.update_cfg = update_cfg
        self.neighbor_radius = neighbor_radius
        self.label = label

        pred, fmap = model.predict(volume)
        self.baseline_prediction = pred
        self.baseline_features = fmap
        self.history: list[EditRecord] = []
        self._claimed: dict[int, int] = {}  # slice index -> edit index
        self._fused_prob_sum = np.zeros(volume.dims, dtype=np.float64)

    # -- read access ---------------------------------------------------------
    @property
    def depth(self) -> int:
        return self.volume.dims[0]

    def edited_slices(self) -> set[int]:
        return {rec.edit.slice_index for rec in self.history}

    def current_prediction(self) -> PredictionVolume:
        if not self.history:
            return self.baseline_prediction
        return self.history[-1].prediction

    def provenance(self) -> tuple[str, ...]:
        if not self.history:
            return tuple("farther" for _ in range(self.depth))
        return self.history[-1].provenance

    def suggested_slice(self) -> Optional[int]:
        if self.label is None:
            return None
        return worst_slice(
            self.current_prediction(), self.label, self.volume.spacing, exclude=self.edited_slices()
        )

    # -- editing ---------------------------------------------------------------
    def propagate_edit(self, edit: SliceEdit) -> PredictionVolume:
        """Run one edit through update + fusion and compose the refined volume."""
        t0 = time.monotonic()
        f0 = self.baseline_features
        f_upd, trace = update_features(self.model, f0, edit, self.update_cfg)
        diverged = trace.diverged
        if diverged:
            f_upd = fallback_to_original(f0)

        near = self.model.decode_from(f_upd, spacing=self.volume.spacing)
        fused_map = self.fusion.fuse(f0, f_upd)
        far = self.model.decode_from(fused_map, spacing=self.volume.spacing)

        edit_idx = len(self.history)
        nb = neighborhood(
            edit.slice_index, self.neighbor_radius, self.depth, claimed=self._claimed.keys()
        )
        self._fused_prob_sum += far.prob.astype(np.float64)
        for z in nb:
            self._claimed[z] = edit_idx

        record = EditRecord(
            edit=edit,
            features_updated=f_upd,
            features_fused=fused_map,
            near_prob=near.prob,
            fused_prob=far.prob,
            neighborhood=tuple(sorted(nb)),
            prediction=None,
            provenance=None,
            trace=trace,
            diverged=diverged,
            elapsed_s=0.0,
        )
        self.history.append(record)
        record.prediction, record.provenance = self._compose()
        record.elapsed_s = time.monotonic() - t0
        return record.prediction

    def apply_edit_sequence(self, edits: Sequence[SliceEdit]) -> PredictionVolume:
        """Apply ordered edits with distinct slice indices; returns the final volume."""
        seen = self.edited_slices()
        for edit in edits:
            if edit.slice_index in seen:
                raise DuplicateEditError(f"slice {edit.slice_index} already edited")
            seen.add(edit.slice_index)
        result = self.current_prediction()
        for edit in edits:
            result = self.propagate_edit(edit)
        return result

    def _compose(self) -> tuple[PredictionVolume, tuple[str, ...]]:
        n = len(self.history)
        prob = (self._fused_prob_sum / n).astype(np.float32)
        tags = ["farther"] * self.depth
        for z, k in self._claimed.items():
            prob[z] = self.history[k].near_prob[z]
            tags[z] = f"neighbor:{k}"
        prob = np.clip(prob, 0.0, 1.0)
        return (
            PredictionVolume(prob, spacing=self.volume.spacing),
            tuple(tags),
        )


def propagate_edit(session: Session, edit: SliceEdit) -> PredictionVolume:
    return session.propagate_edit(edit)


def apply_edit_sequence(session: Session, edits: Sequence[SliceEdit]) -> PredictionVolume:
    return session.apply_edit_sequence(edits)
