"""Run-length codec for binary masks on the wire.

Row-major runs, starting with a (possibly zero-length) background run,
encoded as little-endian uint32 counts and base64-wrapped. The (H, W)
shape is echoed explicitly so decoders can validate the payload.
"""

from __future__ import annotations

import base64

import numpy as np


class RleError(ValueError):
    """Payload cannot be decoded into a mask of the declared shape."""


def rle_encode(mask: np.ndarray) -> dict:
    mask = np.asarray(mask).astype(bool)
    if mask.ndim != 2:
        raise RleError(f"mask must be 2D, got shape {mask.shape}")
    flat = mask.ravel()
    changes = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], changes, [flat.size]])
    runs = np.diff(bounds).tolist()
    counts = ([0] if flat[0] else []) + runs
    payload = np.asarray(counts, dtype="<u4").tobytes()
    return {
        "h": int(mask.shape[0]),
        "w": int(mask.shape[1]),
        "counts_b64": base64.b64encode(payload).decode("ascii"),
    }


def rle_decode(payload: dict) -> np.ndarray:
    try:
        h, w = int(payload["h"]), int(payload["w"])
        raw = base64.b64decode(payload["counts_b64"], validate=True)
    except (KeyError, TypeError, ValueError) as exc:
        raise RleError(f"malformed RLE payload: {exc}") from exc
    if h < 1 or w < 1:
        raise RleError(f"invalid shape ({h}, {w})")
    if len(raw) % 4 != 0:
        raise RleError("counts payload is not a uint32 array")
    counts = np.frombuffer(raw, dtype="<u4")
    if int(counts.sum()) != h * w:
        raise RleError(f"run lengths sum to {int(counts.sum())}, expected {h * w}")
    flat = np.zeros(h * w, dtype=bool)
    pos = 0
    value = False
    for run in counts:
        if value:
            flat[pos : pos + int(run)] = True
        pos += int(run)
        value = not value
    return flat.reshape(h, w)
