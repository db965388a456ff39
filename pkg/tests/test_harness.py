import json
import os

import numpy as np
import pytest

from propaseg.cli import main as cli_main
from propaseg.harness import (
    AnomalyConfig,
    ExperimentConfig,
    fold_split,
    inject_anomaly,
    make_suite,
    run_decoder_ablation,
    run_experiment,
)
from propaseg.phantoms import PhantomConfig, lesion_slices, make_phantom

TINY = dict(
    family="curved-tube",
    count=8,
    dims=(16, 16, 16),
    folds=2,
    steps=2,
    seed=5,
    backbone_epochs=6,
    fusion_epochs=2,
    update_iters=10,
    anomaly=AnomalyConfig(count=1, halfwidth=2),
)


class TestConfig:
    def test_json_roundtrip(self):
        cfg = ExperimentConfig(**TINY)
        again = ExperimentConfig.from_json(json.loads(json.dumps(cfg.to_json())))
        assert again == cfg

    def test_validation(self):
        with pytest.raises(ValueError):
            ExperimentConfig(folds=1)
        with pytest.raises(ValueError):
            ExperimentConfig(steps=0)
        with pytest.raises(ValueError):
            ExperimentConfig(count=4, folds=4)

    def test_family_pairing(self):
        tube = ExperimentConfig(family="curved-tube")
        assert tube.resolved_loss().kind == "dice"
        assert tube.resolved_update().optimizer == "adam"
        naso = ExperimentConfig(family="ellipsoid-stack")
        assert naso.resolved_loss().kind == "hybrid"
        assert naso.resolved_update().optimizer == "lbfgs"


class TestAnomaly:
    def test_bands_inside_lesion_and_deterministic(self):
        volume, label = make_phantom(PhantomConfig(dims=(24, 32, 32), kind="curved-tube", seed=2))
        rng1 = np.random.default_rng(9)
        rng2 = np.random.default_rng(9)
        v1, bands1 = inject_anomaly(volume, label, rng1, count=2, halfwidth=3)
        v2, bands2 = inject_anomaly(volume, label, rng2, count=2, halfwidth=3)
        assert bands1 == bands2
        assert np.array_equal(v1.data, v2.data)
        zs = lesion_slices(label)
        for lo, hi in bands1:
            assert zs[0] <= lo <= hi <= zs[-1]

    def test_contrast_suppressed(self):
        volume, label = make_phantom(PhantomConfig(dims=(24, 32, 32), kind="curved-tube", seed=3))
        rng = np.random.default_rng(1)
        degraded, bands = inject_anomaly(volume, label, rng, count=1, halfwidth=3)
        (lo, hi), = bands
        for z in range(lo, hi + 1):
            inside = degraded.data[0, z][label.data[z]]
            outside = degraded.data[0, z][~label.data[z]]
            assert abs(inside.mean() - outside.mean()) < 0.2  # lesion contrast gone
        clean_inside = volume.data[0, lo][label.data[lo]]
        assert clean_inside.mean() > 0.5  # original had contrast

    def test_suite_carries_both_views(self):
        cfg = ExperimentConfig(**TINY)
        cases = make_suite(cfg)
        assert len(cases) == cfg.count
        changed = [not np.array_equal(c.clean.data, c.volume.data) for c in cases]
        assert all(changed)


class TestFoldSplit:
    def test_isolation_and_coverage(self):
        n, k = 10, 4
        seen = []
        for fold in range(k):
            train, ev = fold_split(n, k, fold)
            assert set(train) & set(ev) == set()
            assert sorted(train + ev) == list(range(n))
            seen.extend(ev)
        assert sorted(seen) == list(range(n))


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = ExperimentConfig(**TINY)
    summary = run_experiment(cfg, str(out))
    return cfg, str(out), summary


class TestRunExperiment:
    def test_outputs_exist(self, tiny_run):
        cfg, out, summary = tiny_run
        assert os.path.exists(os.path.join(out, "aggregate.csv"))
        assert os.path.exists(os.path.join(out, "table.txt"))
        assert os.path.exists(os.path.join(out, "summary.json"))
        for fold in summary["folds_completed"]:
            assert os.path.exists(os.path.join(out, f"fold_{fold}.json"))
        assert summary["folds_failed"] == []

    def test_table_shape(self, tiny_run):
        cfg, out, summary = tiny_run
        rows = summary["rows"]
        assert len(rows) == cfg.steps * 3 * 2 * 4  # steps x variants x scopes x metrics
        variants = {r["variant"] for r in rows}
        assert variants == {"baseline", "update_only", "fused"}
        scopes = {r["scope"] for r in rows}
        assert scopes == {"worst_slice_voi", "whole_volume"}

    def test_steps_curve_emitted(self, tiny_run):
        cfg, out, summary = tiny_run
        steps = sorted({r["step"] for r in summary["rows"]})
        assert steps == list(range(1, cfg.steps + 1))

    def test_determinism_byte_identical(self, tiny_run, tmp_path):
        cfg, out, _ = tiny_run
        run_experiment(cfg, str(tmp_path))
        a = open(os.path.join(out, "aggregate.csv"), "rb").read()
        b = open(os.path.join(tmp_path, "aggregate.csv"), "rb").read()
        assert a == b
        fa = open(os.path.join(out, "fold_0.json"), "rb").read()
        fb = open(os.path.join(tmp_path, "fold_0.json"), "rb").read()
        assert fa == fb


class TestAblation:
    def test_levels_swept(self, tmp_path):
        cfg = ExperimentConfig(**{**TINY, "count": 6, "backbone_epochs": 4, "fusion_epochs": 1,
                                  "steps": 1, "tap_levels": (1, 2, 3)})
        summary = run_decoder_ablation(cfg, str(tmp_path))
        assert sorted(summary["levels"]) == [1, 2, 3]
        lines = open(os.path.join(tmp_path, "decoder_ablation.csv")).read().strip().splitlines()
        assert lines[0] == "tap_level,dsc_mean,dsc_std,folds"
        assert len(lines) == 4

    def test_single_level(self, tmp_path):
        cfg = ExperimentConfig(**{**TINY, "count": 6, "backbone_epochs": 4, "fusion_epochs": 1,
                                  "steps": 1, "tap_levels": (2,)})
        summary = run_decoder_ablation(cfg, str(tmp_path))
        assert list(summary["levels"]) == [2]

    def test_invalid_levels(self, tmp_path):
        cfg = ExperimentConfig(**{**TINY, "tap_levels": (4,)})
        with pytest.raises(ValueError):
            run_decoder_ablation(cfg, str(tmp_path))


class TestCli:
    def test_simulate_command(self, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        cfg = ExperimentConfig(**{**TINY, "count": 4, "folds": 2, "steps": 1,
                                  "backbone_epochs": 3, "fusion_epochs": 1, "update_iters": 5})
        cfg_path.write_text(json.dumps(cfg.to_json()))
        out = tmp_path / "out"
        code = cli_main(["simulate", "--config", str(cfg_path), "--out", str(out)])
        assert code == 0
        assert (out / "aggregate.csv").exists()

    def test_ablate_command(self, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        cfg = ExperimentConfig(**{**TINY, "count": 4, "folds": 2, "steps": 1,
                                  "backbone_epochs": 3, "fusion_epochs": 1, "update_iters": 5})
        cfg_path.write_text(json.dumps(cfg.to_json()))
        out = tmp_path / "out"
        code = cli_main(["ablate-decoder", "--levels", "2", "--config", str(cfg_path), "--out", str(out)])
        assert code == 0
        assert (out / "decoder_ablation.csv").exists()
