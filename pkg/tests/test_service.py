import base64
import json
import time

import numpy as np
import pytest
from fastapi.testclient import TestClient

from propaseg.rle import rle_encode
from propaseg.service import ServiceConfig, create_app, load_service_config
from propaseg.volumes import load_mask, load_volume


@pytest.fixture(scope="module")
def service(demo_dir, tmp_path_factory):
    store = tmp_path_factory.mktemp("store")
    cfg = ServiceConfig(model_dir=demo_dir["model_dir"], store_dir=str(store), timeout_s=300.0)
    app = create_app(cfg)
    with TestClient(app) as client:
        yield client, cfg, demo_dir


def make_session(client, demo, **overrides):
    body = {
        "model_id": demo["model_id"],
        "volume_path": demo["volume"],
        "label_path": demo["label"],
        "update_cfg": demo["update_cfg"],
    }
    body.update(overrides)
    resp = client.post("/sessions", json=body)
    assert resp.status_code == 201, resp.text
    return resp.json()


class TestBasics:
    def test_health(self, service):
        client, _, demo = service
        resp = client.get("/health")
        assert resp.status_code == 200
        assert demo["model_id"] in resp.json()["models"]

    def test_checksum_endpoint_stable(self, service):
        client, _, demo = service
        a = client.get(f"/models/{demo['model_id']}/checksum").json()
        b = client.get(f"/models/{demo['model_id']}/checksum").json()
        assert a == b
        assert len(a["backbone_sha256"]) == 64

    def test_unknown_model(self, service):
        client, _, demo = service
        resp = client.post("/sessions", json={"model_id": "nope", "volume_path": demo["volume"]})
        assert resp.status_code == 404
        assert resp.json()["code"] == "model_not_found"


class TestCreateSession:
    def test_create_and_summary(self, service):
        client, _, demo = service
        out = make_session(client, demo)
        assert out["dims"] == [24, 32, 32]
        assert out["has_label"] is True
        assert isinstance(out["suggested_slice"], int)
        assert 0.0 < out["baseline_dsc"] <= 1.0

    def test_create_by_upload(self, service):
        client, _, demo = service
        payload = base64.b64encode(open(demo["volume"], "rb").read()).decode()
        resp = client.post(
            "/sessions", json={"model_id": demo["model_id"], "volume_b64": payload}
        )
        assert resp.status_code == 201
        assert resp.json()["has_label"] is False

    def test_bad_volume(self, service, tmp_path):
        client, _, demo = service
        bad = tmp_path / "bad.pvol"
        bad.write_bytes(b"not a header\n123")
        resp = client.post(
            "/sessions", json={"model_id": demo["model_id"], "volume_path": str(bad)}
        )
        assert resp.status_code == 400
        assert resp.json()["code"] == "bad_volume"

    def test_missing_volume_field(self, service):
        client, _, demo = service
        resp = client.post("/sessions", json={"model_id": demo["model_id"]})
        assert resp.status_code == 400


class TestSlices:
    def test_prediction_slice_shape(self, service):
        client, _, demo = service
        sid = make_session(client, demo)["session_id"]
        resp = client.get(
            f"/sessions/{sid}/slices", params={"variant": "baseline", "axis": "axial", "index": 0}
        )
        assert resp.status_code == 200
        body = resp.json()
        assert body["height"] == 32 and body["width"] == 32
        assert len(body["values"]) == 32 and len(body["values"][0]) == 32

    def test_refined_falls_back_to_baseline(self, service):
        client, _, demo = service
        sid = make_session(client, demo)["session_id"]
        a = client.get(f"/sessions/{sid}/slices", params={"variant": "baseline", "index": 5}).json()
        b = client.get(f"/sessions/{sid}/slices", params={"variant": "refined", "index": 5}).json()
        assert a["values"] == b["values"]

    def test_label_without_label(self, service):
        client, _, demo = service
        payload = base64.b64encode(open(demo["volume"], "rb").read()).decode()
        sid = client.post(
            "/sessions", json={"model_id": demo["model_id"], "volume_b64": payload}
        ).json()["session_id"]
        resp = client.get(f"/sessions/{sid}/slices", params={"variant": "label", "index": 0})
        assert resp.status_code == 404
        assert resp.json()["code"] == "no_label"

    def test_sagittal_range_error(self, service):
        client, _, demo = service
        sid = make_session(client, demo)["session_id"]
        resp = client.get(
            f"/sessions/{sid}/slices", params={"variant": "image", "axis": "sagittal", "index": 32}
        )
        assert resp.status_code == 400
        assert resp.json()["code"] == "index_out_of_range"

    def test_orthogonal_shapes(self, service):
        client, _, demo = service
        sid = make_session(client, demo)["session_id"]
        cor = client.get(
            f"/sessions/{sid}/slices", params={"variant": "image", "axis": "coronal", "index": 0}
        ).json()
        assert (cor["height"], cor["width"]) == (24, 32)


class TestEdits:
    def test_simulated_edit_improves_dsc(self, service):
        client, _, demo = service
        created = make_session(client, demo)
        sid = created["session_id"]
        s = created["suggested_slice"]
        resp = client.post(f"/sessions/{sid}/edits", json={"slice_index": s, "simulate": True})
        assert resp.status_code == 200, resp.text
        body = resp.json()
        assert body["dsc_whole_after"] > body["dsc_whole_before"]
        assert len(body["provenance"]) == 24
        near = [i for i, tag in enumerate(body["provenance"]) if tag.startswith("neighbor")]
        far = [i for i, tag in enumerate(body["provenance"]) if tag == "farther"]
        assert sorted(near + far) == list(range(24))
        assert body["elapsed_ms"] > 0
        assert len(body["per_slice_dsc"]) == 24

    def test_rle_edit_roundtrip(self, service):
        client, _, demo = service
        created = make_session(client, demo)
        sid = created["session_id"]
        label = load_mask(demo["label"])
        s = created["suggested_slice"]
        resp = client.post(
            f"/sessions/{sid}/edits",
            json={"slice_index": s, "mask": rle_encode(label.data[s])},
        )
        assert resp.status_code == 200
        assert resp.json()["slice_index"] == s

    def test_duplicate_slice_rejected(self, service):
        client, _, demo = service
        created = make_session(client, demo)
        sid = created["session_id"]
        s = created["suggested_slice"]
        first = client.post(f"/sessions/{sid}/edits", json={"slice_index": s, "simulate": True})
        assert first.status_code == 200
        second = client.post(f"/sessions/{sid}/edits", json={"slice_index": s, "simulate": True})
        assert second.status_code == 409
        assert second.json()["code"] == "duplicate_slice"
        history = client.get(f"/sessions/{sid}/history").json()
        assert len(history["edits"]) == 1  # rejected edit left no trace

    def test_malformed_rle(self, service):
        client, _, demo = service
        sid = make_session(client, demo)["session_id"]
        resp = client.post(
            f"/sessions/{sid}/edits",
            json={"slice_index": 3, "mask": {"h": 32, "w": 32, "counts_b64": "zzz"}},
        )
        assert resp.status_code == 400
        assert resp.json()["code"] == "malformed_rle"

    def test_out_of_range_slice(self, service):
        client, _, demo = service
        sid = make_session(client, demo)["session_id"]
        resp = client.post(f"/sessions/{sid}/edits", json={"slice_index": 99, "simulate": True})
        assert resp.status_code == 400

    def test_timeout_returns_pending_job(self, demo_dir, tmp_path_factory):
        store = tmp_path_factory.mktemp("store-timeout")
        cfg = ServiceConfig(
            model_dir=demo_dir["model_dir"], store_dir=str(store), timeout_s=1e-4
        )
        with TestClient(create_app(cfg)) as client:
            created = make_session(client, demo_dir)
            sid = created["session_id"]
            resp = client.post(
                f"/sessions/{sid}/edits",
                json={"slice_index": created["suggested_slice"], "simulate": True},
            )
            assert resp.status_code == 202
            job = resp.json()
            assert job["status"] == "pending"
            for _ in range(600):
                status = client.get(f"/sessions/{sid}/jobs/{job['job_id']}")
                if status.json().get("status") == "done":
                    assert status.json()["result"]["slice_index"] == created["suggested_slice"]
                    break
                time.sleep(0.2)
            else:
                pytest.fail("job never completed")


class TestMetricsAndHistory:
    def test_metrics_keys(self, service):
        client, _, demo = service
        sid = make_session(client, demo)["session_id"]
        body = client.get(f"/sessions/{sid}/metrics").json()
        assert set(body) == {
            "dsc", "hd95_mm", "sensitivity", "specificity", "per_slice_dsc", "per_slice_hd_mm",
        }

    def test_history_after_edit(self, service):
        client, _, demo = service
        created = make_session(client, demo)
        sid = created["session_id"]
        client.post(
            f"/sessions/{sid}/edits",
            json={"slice_index": created["suggested_slice"], "simulate": True},
        )
        hist = client.get(f"/sessions/{sid}/history").json()
        assert len(hist["edits"]) == 1
        entry = hist["edits"][0]
        assert entry["slice_index"] == created["suggested_slice"]
        assert "dsc_whole" in entry


class TestPersistence:
    def test_session_survives_restart(self, demo_dir, tmp_path_factory):
        store = tmp_path_factory.mktemp("store-persist")
        cfg = ServiceConfig(model_dir=demo_dir["model_dir"], store_dir=str(store), timeout_s=300.0)
        with TestClient(create_app(cfg)) as client:
            created = make_session(client, demo_dir)
            sid = created["session_id"]
            edit = client.post(
                f"/sessions/{sid}/edits",
                json={"slice_index": created["suggested_slice"], "simulate": True},
            ).json()
            refined = client.get(
                f"/sessions/{sid}/slices", params={"variant": "refined", "index": 0}
            ).json()
        # fresh app instance over the same store: replay must reproduce state
        with TestClient(create_app(cfg)) as client2:
            summary = client2.get(f"/sessions/{sid}").json()
            assert summary["edit_count"] == 1
            refined2 = client2.get(
                f"/sessions/{sid}/slices", params={"variant": "refined", "index": 0}
            ).json()
            assert refined2["values"] == refined["values"]
            dup = client2.post(
                f"/sessions/{sid}/edits",
                json={"slice_index": edit["slice_index"], "simulate": True},
            )
            assert dup.status_code == 409

    def test_unknown_session(self, service):
        client, _, _ = service
        resp = client.get("/sessions/doesnotexist")
        assert resp.status_code == 404


class TestWeightImmutability:
    def test_checksums_unchanged_by_api_traffic(self, service):
        client, _, demo = service
        before = client.get(f"/models/{demo['model_id']}/checksum").json()
        created = make_session(client, demo)
        sid = created["session_id"]
        client.post(
            f"/sessions/{sid}/edits",
            json={"slice_index": created["suggested_slice"], "simulate": True},
        )
        client.get(f"/sessions/{sid}/metrics")
        after = client.get(f"/models/{demo['model_id']}/checksum").json()
        assert after == before


class TestConfigLoading:
    def test_env_overrides(self, tmp_path, monkeypatch):
        cfg_file = tmp_path / "svc.json"
        cfg_file.write_text(json.dumps({"port": 9001, "model_dir": "m", "store_dir": "s"}))
        monkeypatch.setenv("PROPASEG_PORT", "9002")
        monkeypatch.setenv("PROPASEG_TIMEOUT_S", "7.5")
        cfg = load_service_config(str(cfg_file))
        assert cfg.port == 9002
        assert cfg.model_dir == "m"
        assert cfg.timeout_s == 7.5
