"""Session-oriented HTTP JSON API over the editing pipeline.

Sessions are persisted as one directory each (PVOL1 artifacts plus a
JSON state file) and are rebuilt deterministically after a restart by
replaying their edit history. Edit handling is serialized per session;
models are shared read-only.
"""

from __future__ import annotations

import base64
import json
import os
import threading
import time
import uuid
from concurrent.futures import Future, ThreadPoolExecutor
from concurrent.futures import TimeoutError as FutureTimeout
from dataclasses import dataclass

import numpy as np
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .backbone import SegModel
from .fusion import FusionModel
from .metrics import compute_report, dsc
from .orchestrator import DuplicateEditError, Session
from .rle import RleError, rle_decode, rle_encode
from .update import SliceEdit, UpdateConfig
from .volumes import (
    AXES,
    MaskVolume,
    Volume,
    VolumeFormatError,
    VolumeValidationError,
    load_mask,
    load_volume,
    save_mask,
    save_volume,
    slice_extract,
)


@dataclass(frozen=True)
class ServiceConfig:
    port: int = 8000
    model_dir: str = "models"
    store_dir: str = "sessions"
    timeout_s: float = 120.0
    ui_dir: str | None = None  # built frontend to serve at /ui


def load_service_config(path: str | None = None) -> ServiceConfig:
    """Defaults <- optional JSON file <- PROPASEG_* environment overrides."""
    values = {}
    if path:
        with open(path) as fh:
            values.update(json.load(fh))
    env_map = {
        "PROPASEG_PORT": ("port", int),
        "PROPASEG_MODEL_DIR": ("model_dir", str),
        "PROPASEG_STORE_DIR": ("store_dir", str),
        "PROPASEG_TIMEOUT_S": ("timeout_s", float),
        "PROPASEG_UI_DIR": ("ui_dir", str),
    }
    for env, (key, cast) in env_map.items():
        if env in os.environ:
            values[key] = cast(os.environ[env])
    return ServiceConfig(**values)


class ApiError(Exception):
    def __init__(self, status: int, code: str, message: str):
        super().__init__(message)
        self.status = status
        self.code = code
        self.message = message


class ModelRegistry:
    """Read-only registry of (backbone, fusion) checkpoint pairs."""

    def __init__(self, model_dir: str):
        self.model_dir = model_dir
        self._models: dict[str, tuple[SegModel, FusionModel]] = {}
        self._lock = threading.Lock()

    def ids(self) -> list[str]:
        if not os.path.isdir(self.model_dir):
            return []
        return sorted(
            name[: -len(".backbone.pt")]
            for name in os.listdir(self.model_dir)
            if name.endswith(".backbone.pt")
        )

    def get(self, model_id: str) -> tuple[SegModel, FusionModel]:
        with self._lock:
            if model_id in self._models:
                return self._models[model_id]
            seg_path = os.path.join(self.model_dir, f"{model_id}.backbone.pt")
            fus_path = os.path.join(self.model_dir, f"{model_id}.fusion.pt")
            if not (os.path.exists(seg_path) and os.path.exists(fus_path)):
                raise ApiError(404, "model_not_found", f"unknown model id {model_id!r}")
            seg = SegModel.load(seg_path)
            fusion = FusionModel.load(fus_path, base=seg)
            self._models[model_id] = (seg, fusion)
            return self._models[model_id]


class ServerSession:
    """A Session plus its lock, metadata, and on-disk layout."""

    def __init__(self, session_id: str, model_id: str, session: Session, store_dir: str):
        self.session_id = session_id
        self.model_id = model_id
        self.session = session
        self.store_dir = store_dir
        self.lock = threading.Lock()
        self.created = time.time()
        self.updated = self.created
        self.edit_log: list[dict] = []  # replayable wire-level edits

    # -- persistence -------------------------------------------------------
    def root(self) -> str:
        return os.path.join(self.store_dir, self.session_id)

    def persist(self) -> None:
        os.makedirs(self.root(), exist_ok=True)
        vol_path = os.path.join(self.root(), "volume.pvol")
        if not os.path.exists(vol_path):
            save_volume(self.session.volume, vol_path)
        if self.session.label is not None:
            label_path = os.path.join(self.root(), "label.pvol")
            if not os.path.exists(label_path):
                save_mask(self.session.label, label_path)
        state = {
            "session_id": self.session_id,
            "model_id": self.model_id,
            "created": self.created,
            "updated": self.updated,
            "update_cfg": self.session.update_cfg.to_json(),
            "neighbor_radius": self.session.neighbor_radius,
            "edits": self.edit_log,
        }
        tmp = os.path.join(self.root(), "state.json.tmp")
        with open(tmp, "w") as fh:
            json.dump(state, fh, indent=2, sort_keys=True)
        os.replace(tmp, os.path.join(self.root(), "state.json"))


def _b64_volume(payload: str) -> bytes:
    try:
        return base64.b64decode(payload, validate=True)
    except (TypeError, ValueError) as exc:
        raise ApiError(400, "bad_volume", f"volume_b64 is not valid base64: {exc}")


def create_app(config: ServiceConfig | None = None) -> FastAPI:
    config = config or load_service_config()
    app = FastAPI(title="propaseg", version="0.1.0")
    if config.ui_dir and os.path.isdir(config.ui_dir):
        from fastapi.staticfiles import StaticFiles

        app.mount("/ui", StaticFiles(directory=config.ui_dir, html=True), name="ui")
    registry = ModelRegistry(config.model_dir)
    sessions: dict[str, ServerSession] = {}
    sessions_lock = threading.Lock()
    executor = ThreadPoolExecutor(max_workers=2)
    jobs: dict[str, Future] = {}

    app.state.config = config
    app.state.registry = registry

    @app.exception_handler(ApiError)
    async def _api_error(_req: Request, exc: ApiError):
        return JSONResponse(status_code=exc.status, content={"code": exc.code, "message": exc.message})

    def _load_session_from_disk(session_id: str) -> ServerSession:
        root = os.path.join(config.store_dir, session_id)
        state_path = os.path.join(root, "state.json")
        if not os.path.exists(state_path):
            raise ApiError(404, "session_not_found", f"unknown session {session_id!r}")
        with open(state_path) as fh:
            state = json.load(fh)
        volume = load_volume(os.path.join(root, "volume.pvol"))
        label_path = os.path.join(root, "label.pvol")
        label = load_mask(label_path) if os.path.exists(label_path) else None
        seg, fusion = registry.get(state["model_id"])
        session = Session(
            volume,
            seg,
            fusion,
            update_cfg=UpdateConfig.from_json(state["update_cfg"]),
            neighbor_radius=state["neighbor_radius"],
            label=label,
        )
        record = ServerSession(session_id, state["model_id"], session, config.store_dir)
        record.created = state["created"]
        record.updated = state["updated"]
        for entry in state["edits"]:
            mask = rle_decode(entry["mask"])
            session.propagate_edit(SliceEdit(entry["slice_index"], mask))
            record.edit_log.append(entry)
        return record

    def _get_session(session_id: str) -> ServerSession:
        with sessions_lock:
            if session_id in sessions:
                return sessions[session_id]
        record = _load_session_from_disk(session_id)
        with sessions_lock:
            return sessions.setdefault(session_id, record)

    def _session_summary(record: ServerSession) -> dict:
        session = record.session
        d, h, w = session.volume.dims
        out = {
            "session_id": record.session_id,
            "model_id": record.model_id,
            "dims": [d, h, w],
            "channels": session.volume.channels,
            "spacing_mm": list(session.volume.spacing),
            "created": record.created,
            "updated": record.updated,
            "edit_count": len(session.history),
            "edited_slices": sorted(session.edited_slices()),
            "has_label": session.label is not None,
        }
        if session.label is not None:
            out["suggested_slice"] = session.suggested_slice()
            out["baseline_dsc"] = dsc(session.baseline_prediction, session.label)
            out["current_dsc"] = dsc(session.current_prediction(), session.label)
        return out

    # -- endpoints -----------------------------------------------------------

    @app.get("/health")
    def health():
        return {"status": "ok", "models": registry.ids()}

    @app.get("/models")
    def models():
        return {"models": registry.ids()}

    @app.get("/models/{model_id}/checksum")
    def model_checksum(model_id: str):
        seg, fusion = registry.get(model_id)
        return {
            "model_id": model_id,
            "backbone_sha256": seg.weight_checksum(),
            "fusion_sha256": fusion.weight_checksum(),
        }

    @app.post("/sessions", status_code=201)
    async def create_session(request: Request):
        body = await request.json()
        model_id = body.get("model_id")
        if not model_id:
            raise ApiError(400, "bad_request", "model_id is required")
        seg, fusion = registry.get(model_id)

        session_id = body.get("session_id") or uuid.uuid4().hex[:12]
        root = os.path.join(config.store_dir, session_id)
        if os.path.exists(root):
            raise ApiError(409, "session_exists", f"session {session_id!r} already exists")

        try:
            if "volume_path" in body:
                volume = load_volume(body["volume_path"])
            elif "volume_b64" in body:
                os.makedirs(root, exist_ok=True)
                path = os.path.join(root, "volume.pvol")
                with open(path, "wb") as fh:
                    fh.write(_b64_volume(body["volume_b64"]))
                volume = load_volume(path)
            else:
                raise ApiError(400, "bad_request", "volume_path or volume_b64 is required")
            label = None
            if "label_path" in body:
                label = load_mask(body["label_path"])
        except (VolumeFormatError, VolumeValidationError, FileNotFoundError) as exc:
            raise ApiError(400, "bad_volume", str(exc))
        if label is not None and label.dims != volume.dims:
            raise ApiError(400, "bad_volume", "label dims do not match volume dims")

        update_cfg = UpdateConfig.from_json(body.get("update_cfg", {})) if body.get("update_cfg") else UpdateConfig()
        try:
            session = Session(volume, seg, fusion, update_cfg=update_cfg, label=label)
        except Exception as exc:
            raise ApiError(400, "bad_volume", str(exc))
        record = ServerSession(session_id, model_id, session, config.store_dir)
        with sessions_lock:
            sessions[session_id] = record
        record.persist()
        return _session_summary(record)

    @app.get("/sessions/{session_id}")
    def get_session(session_id: str):
        return _session_summary(_get_session(session_id))

    @app.get("/sessions/{session_id}/slices")
    def get_slice(session_id: str, variant: str, axis: str = "axial", index: int = 0, channel: int = 0):
        record = _get_session(session_id)
        session = record.session
        if axis not in AXES:
            raise ApiError(400, "bad_axis", f"axis must be one of {AXES}")
        if variant == "image":
            if not 0 <= channel < session.volume.channels:
                raise ApiError(400, "bad_channel", f"channel {channel} out of range")
            source = session.volume.data[channel]
        elif variant == "baseline":
            source = session.baseline_prediction.prob
        elif variant == "refined":
            source = session.current_prediction().prob
        elif variant == "label":
            if session.label is None:
                raise ApiError(404, "no_label", "session has no label attached")
            source = session.label.data.astype(np.float32)
        else:
            raise ApiError(400, "bad_variant", "variant must be image|baseline|refined|label")
        try:
            plane = slice_extract(source, axis, index)
        except IndexError as exc:
            raise ApiError(400, "index_out_of_range", str(exc))
        return {
            "variant": variant,
            "axis": axis,
            "index": index,
            "height": plane.shape[0],
            "width": plane.shape[1],
            "values": [[float(v) for v in row] for row in plane],
        }

    def _run_edit(record: ServerSession, edit: SliceEdit, wire_entry: dict) -> dict:
        session = record.session
        t0 = time.monotonic()
        has_label = session.label is not None
        before = dsc(session.current_prediction(), session.label) if has_label else None
        with record.lock:
            if edit.slice_index in session.edited_slices():
                raise ApiError(409, "duplicate_slice", f"slice {edit.slice_index} was already edited")
            prediction = session.propagate_edit(edit)
            record.edit_log.append(wire_entry)
            record.updated = time.time()
            record.persist()
        rec = session.history[-1]
        out = {
            "edit_index": len(session.history) - 1,
            "slice_index": edit.slice_index,
            "elapsed_ms": (time.monotonic() - t0) * 1000.0,
            "diverged": rec.diverged,
            "iterations": rec.trace.iterations,
            "neighborhood": list(rec.neighborhood),
            "provenance": list(rec.provenance),
        }
        if session.label is not None:
            label = session.label
            out["dsc_whole_before"] = before
            out["dsc_whole_after"] = dsc(prediction, label)
            out["per_slice_dsc"] = [
                dsc(prediction.binary[z], label.data[z]) for z in range(session.depth)
            ]
            out["suggested_slice"] = session.suggested_slice()
        return out

    @app.post("/sessions/{session_id}/edits")
    async def submit_edit(session_id: str, request: Request):
        body = await request.json()
        record = _get_session(session_id)
        session = record.session
        if "slice_index" not in body:
            raise ApiError(400, "bad_request", "slice_index is required")
        s = int(body["slice_index"])
        if not 0 <= s < session.depth:
            raise ApiError(400, "index_out_of_range", f"slice {s} out of [0, {session.depth})")
        if s in session.edited_slices():
            raise ApiError(409, "duplicate_slice", f"slice {s} was already edited")
        if body.get("simulate"):
            if session.label is None:
                raise ApiError(404, "no_label", "simulation requires a label")
            mask = session.label.data[s]
        else:
            if "mask" not in body:
                raise ApiError(400, "bad_request", "mask (RLE) or simulate=true is required")
            try:
                mask = rle_decode(body["mask"])
            except RleError as exc:
                raise ApiError(400, "malformed_rle", str(exc))
            if mask.shape != session.volume.dims[1:]:
                raise ApiError(
                    400, "malformed_rle", f"mask {mask.shape} != plane {session.volume.dims[1:]}"
                )
        edit = SliceEdit(s, mask)
        wire_entry = {"slice_index": s, "mask": rle_encode(mask), "simulated": bool(body.get("simulate"))}

        job_id = uuid.uuid4().hex[:12]
        future = executor.submit(_run_edit, record, edit, wire_entry)
        jobs[job_id] = future
        try:
            result = future.result(timeout=config.timeout_s)
        except FutureTimeout:
            return JSONResponse(status_code=202, content={"job_id": job_id, "status": "pending"})
        del jobs[job_id]
        return result

    @app.get("/sessions/{session_id}/jobs/{job_id}")
    def job_status(session_id: str, job_id: str):
        _get_session(session_id)
        future = jobs.get(job_id)
        if future is None:
            raise ApiError(404, "job_not_found", f"unknown job {job_id!r}")
        if not future.done():
            return {"job_id": job_id, "status": "pending"}
        del jobs[job_id]
        exc = future.exception()
        if exc is not None:
            raise ApiError(500, "edit_failed", str(exc))
        return {"job_id": job_id, "status": "done", "result": future.result()}

    @app.get("/sessions/{session_id}/metrics")
    def get_metrics(session_id: str):
        record = _get_session(session_id)
        session = record.session
        if session.label is None:
            raise ApiError(404, "no_label", "session has no label attached")
        report = compute_report(
            session.current_prediction(), session.label, session.volume.spacing
        )
        return report.to_json()

    @app.get("/sessions/{session_id}/history")
    def get_history(session_id: str):
        record = _get_session(session_id)
        session = record.session
        entries = []
        for i, rec in enumerate(session.history):
            entry = {
                "edit_index": i,
                "slice_index": rec.edit.slice_index,
                "diverged": rec.diverged,
                "iterations": rec.trace.iterations,
                "neighborhood": list(rec.neighborhood),
                "initial_loss": rec.trace.initial_loss,
                "final_loss": rec.trace.final_loss,
            }
            if session.label is not None:
                entry["dsc_whole"] = dsc(rec.prediction, session.label)
            entries.append(entry)
        return {"session_id": session_id, "edits": entries}

    return app
