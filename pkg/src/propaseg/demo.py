"""Build a small trained model pair plus a demo phantom for the service and UI."""

from __future__ import annotations

import json
import os

import numpy as np

from .backbone import build_backbone, train_backbone
from .fusion import train_fusion
from .harness import inject_anomaly
from .losses import LossConfig
from .phantoms import PhantomConfig, make_phantom
from .update import UpdateConfig
from .volumes import save_mask, save_volume


def prepare_demo(
    out_dir: str,
    seed: int = 7,
    dims: tuple[int, int, int] = (24, 32, 32),
    kind: str = "curved-tube",
    n_train: int = 10,
    backbone_epochs: int = 20,
    fusion_epochs: int = 30,
) -> dict:
    """Train demo checkpoints and emit a held-out anomalous phantom volume + label.

    Writes a demo.json manifest with the artifact paths and the update
    configuration the demo models were calibrated for.
    """
    model_dir = os.path.join(out_dir, "models")
    data_dir = os.path.join(out_dir, "data")
    os.makedirs(model_dir, exist_ok=True)
    os.makedirs(data_dir, exist_ok=True)

    cases = []
    for i in range(n_train + 1):
        cases.append(make_phantom(PhantomConfig(dims=dims, kind=kind, seed=seed * 1000 + i)))
    train_clean = cases[:n_train]

    loss = LossConfig("dice" if kind == "curved-tube" else "hybrid")
    model = build_backbone(base_channels=4, tap_level=2, loss=loss, seed=seed)
    train_backbone(model, train_clean, backbone_epochs, seed=seed)

    update_cfg = UpdateConfig(optimizer="adam", lr=0.1, max_iters=100, loss=loss)
    anomalous = []
    for i, (vol, mask) in enumerate(train_clean):
        rng = np.random.default_rng(seed * 1000 + i + 500)
        vol_a, _ = inject_anomaly(vol, mask, rng)
        anomalous.append((vol_a, mask))
    fusion, _ = train_fusion(
        model, anomalous, fusion_epochs, update_cfg=update_cfg, seed=seed
    )

    model_id = "demo"
    backbone_path = os.path.join(model_dir, f"{model_id}.backbone.pt")
    fusion_path = os.path.join(model_dir, f"{model_id}.fusion.pt")
    model.save(backbone_path)
    fusion.save(fusion_path)

    demo_vol, demo_mask = cases[-1]
    rng = np.random.default_rng(seed * 1000 + 999)
    demo_vol, bands = inject_anomaly(demo_vol, demo_mask, rng)
    volume_path = os.path.join(data_dir, "demo_volume.pvol")
    label_path = os.path.join(data_dir, "demo_label.pvol")
    save_volume(demo_vol, volume_path)
    save_mask(demo_mask, label_path)

    manifest = {
        "model_dir": model_dir,
        "model_id": model_id,
        "backbone": backbone_path,
        "fusion": fusion_path,
        "volume": volume_path,
        "label": label_path,
        "anomaly_bands": [list(b) for b in bands],
        "update_cfg": update_cfg.to_json(),
    }
    with open(os.path.join(out_dir, "demo.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest
