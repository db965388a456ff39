import numpy as np
import pytest
import torch

from oracles import finite_difference_gradient
from propaseg.backbone import FeatureMap, build_backbone, train_backbone
from propaseg.losses import LossConfig
from propaseg.metrics import dsc, worst_slice
from propaseg.phantoms import PhantomConfig, make_phantom
from propaseg.update import (
    SliceEdit,
    UpdateConfig,
    slice_loss,
    slice_loss_tensor,
    update_features,
)
from propaseg.volumes import Volume


@pytest.fixture(scope="module")
def trained_tiny():
    cases = [
        make_phantom(PhantomConfig(dims=(16, 16, 16), kind="curved-tube", seed=200 + i))
        for i in range(4)
    ]
    model = build_backbone(base_channels=4, tap_level=2, loss=LossConfig("dice"), seed=4)
    train_backbone(model, cases, epochs=30, seed=4)
    return model, cases


def rand_volume(seed, dims=(16, 16, 16)):
    rng = np.random.default_rng(seed)
    return Volume(rng.standard_normal((1, *dims)).astype(np.float32))


class TestConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            UpdateConfig(optimizer="sgd")
        with pytest.raises(ValueError):
            UpdateConfig(max_iters=0)
        with pytest.raises(ValueError):
            UpdateConfig(lr=0.0)

    def test_json_roundtrip(self):
        cfg = UpdateConfig(optimizer="lbfgs", lr=0.5, max_iters=20, loss=LossConfig("dice"))
        again = UpdateConfig.from_json(cfg.to_json())
        assert again == cfg


class TestEditValidation:
    def test_out_of_range_slice(self):
        m = build_backbone(base_channels=4, seed=0)
        _, f = m.predict(rand_volume(1))
        with pytest.raises(Exception):
            update_features(m, f, SliceEdit(16, np.zeros((16, 16), dtype=bool)))

    def test_wrong_mask_shape(self):
        m = build_backbone(base_channels=4, seed=0)
        _, f = m.predict(rand_volume(1))
        with pytest.raises(Exception):
            update_features(m, f, SliceEdit(3, np.zeros((8, 8), dtype=bool)))


class TestZeroIterationConvergence:
    def test_already_converged_returns_input(self, trained_tiny):
        model, cases = trained_tiny
        volume, label = cases[0]
        pred, f = model.predict(volume)
        # pick the best-predicted lesion slice and edit it with the model's own output
        per = [dsc(pred.binary[z], label.data[z]) for z in range(volume.dims[0])]
        s = int(np.argmax(per))
        edit = SliceEdit(s, pred.binary[s])
        cfg = UpdateConfig(loss=LossConfig("dice"), loss_tolerance=0.05)
        assert slice_loss(model, f, edit, cfg.loss) - (-1.0) < cfg.loss_tolerance
        f2, trace = update_features(model, f, edit, cfg)
        assert trace.converged
        assert trace.iterations == 0
        assert np.array_equal(f2.data, f.data)
        assert f2.provenance == "updated"


class TestWeightImmutability:
    def test_checksum_unchanged(self, trained_tiny):
        model, cases = trained_tiny
        volume, label = cases[1]
        _, f = model.predict(volume)
        before = model.weight_checksum()
        for optimizer, lr, iters in (("adam", 0.1, 8), ("lbfgs", 1.0, 5)):
            cfg = UpdateConfig(optimizer=optimizer, lr=lr, max_iters=iters, loss=LossConfig("dice"))
            update_features(model, f, SliceEdit(8, label.data[8]), cfg)
            assert model.weight_checksum() == before

    def test_params_still_trainable_after(self, trained_tiny):
        model, cases = trained_tiny
        volume, label = cases[1]
        _, f = model.predict(volume)
        update_features(model, f, SliceEdit(8, label.data[8]), UpdateConfig(max_iters=2))
        assert all(p.requires_grad for p in model.net.parameters())


class TestTrace:
    def test_monotone_final_not_worse(self, trained_tiny):
        model, cases = trained_tiny
        volume, label = cases[2]
        _, f = model.predict(volume)
        s = worst_slice(model.predict(volume)[0], label, volume.spacing)
        cfg = UpdateConfig(optimizer="adam", lr=1e-2, max_iters=50, loss=LossConfig("dice"))
        f2, trace = update_features(model, f, SliceEdit(s, label.data[s]), cfg)
        final = slice_loss(model, f2, SliceEdit(s, label.data[s]), cfg.loss)
        assert final <= trace.initial_loss + 1e-12

    def test_deterministic(self, trained_tiny):
        model, cases = trained_tiny
        volume, label = cases[2]
        _, f = model.predict(volume)
        cfg = UpdateConfig(optimizer="adam", lr=0.05, max_iters=10, loss=LossConfig("dice"))
        a, _ = update_features(model, f, SliceEdit(7, label.data[7]), cfg)
        b, _ = update_features(model, f, SliceEdit(7, label.data[7]), cfg)
        assert np.array_equal(a.data, b.data)

    def test_divergence_flagged_and_finite(self, trained_tiny):
        model, cases = trained_tiny
        volume, label = cases[3]
        _, f = model.predict(volume)
        # features at the float32 limit overflow the decode convs into NaN logits
        blown = FeatureMap(np.full(f.shape, 3e38, dtype=np.float32), f.tap_level)
        cfg = UpdateConfig(optimizer="adam", lr=1e-2, max_iters=10, loss=LossConfig("hybrid"))
        f2, trace = update_features(model, blown, SliceEdit(8, label.data[8]), cfg)
        assert trace.diverged
        assert np.isfinite(f2.data).all()


class TestLocality:
    def test_update_confined_to_gradient_support(self):
        model = build_backbone(base_channels=4, tap_level=2, seed=6)
        volume = rand_volume(11)
        _, f = model.predict(volume)
        s = 8
        edit = SliceEdit(s, np.ones(volume.dims[1:], dtype=bool))
        cfg = UpdateConfig(optimizer="adam", lr=0.05, max_iters=12, loss=LossConfig("hybrid"))
        f2, trace = update_features(model, f, edit, cfg)
        delta = f2.data - f.data
        assert (delta[~trace.grad_support] == 0).all()
        lo, hi = model.support_interval(s, s, f.shape[1])
        touched_depths = sorted(set(np.argwhere(trace.grad_support)[:, 1]))
        assert all(lo <= d <= hi for d in touched_depths)
        assert (delta != 0).any()


class TestSliceLoss:
    def test_matches_manual_decode(self, trained_tiny):
        model, cases = trained_tiny
        volume, label = cases[0]
        _, f = model.predict(volume)
        edit = SliceEdit(5, label.data[5])
        got = slice_loss(model, f, edit, LossConfig("hybrid"))
        with torch.no_grad():
            logits = model.decode_logits(torch.from_numpy(np.array(f.data)))[:, 5]
        from propaseg.losses import ce_loss, dice_loss

        target = torch.from_numpy(label.data[5].astype(np.float32))
        probs = torch.softmax(logits, dim=0)[1]
        manual = float(dice_loss(probs, target)) + float(ce_loss(logits, target))
        assert got == pytest.approx(manual, rel=1e-6)

    def test_all_background_edit_on_background_slice(self, trained_tiny):
        model, cases = trained_tiny
        volume, label = cases[0]
        pred, f = model.predict(volume)
        empty = np.zeros(volume.dims[1:], dtype=bool)
        # find a slice predicted as clean background; CE should be near zero there
        per = [pred.prob[z].max() for z in range(volume.dims[0])]
        s = int(np.argmin(per))
        if pred.prob[s].max() < 0.01:
            from propaseg.losses import ce_loss

            with torch.no_grad():
                logits = model.decode_logits(torch.from_numpy(np.array(f.data)))[:, s]
            ce = float(ce_loss(logits, torch.from_numpy(empty.astype(np.float32))))
            assert ce < 1e-2


class TestGradientCorrectness:
    def test_matches_finite_differences_float64(self):
        model = build_backbone(base_channels=2, tap_level=2, seed=12)
        model.net.double()
        rng = np.random.default_rng(0)
        volume = Volume(rng.standard_normal((1, 4, 8, 8)).astype(np.float32))
        _, fmap = model.predict(volume)
        edit = SliceEdit(2, rng.random((8, 8)) > 0.6)
        cfg = LossConfig("hybrid")

        f64 = np.array(fmap.data, dtype=np.float64)
        f_t = torch.from_numpy(f64.copy()).requires_grad_(True)
        loss = slice_loss_tensor(model, f_t, edit, cfg)
        loss.backward()
        analytic = f_t.grad.numpy().reshape(-1)

        def fn(x):
            with torch.no_grad():
                return float(slice_loss_tensor(model, torch.from_numpy(x), edit, cfg))

        live = np.flatnonzero(np.abs(analytic) > 1e-12)
        probe = rng.choice(live, size=8, replace=False)
        fd = finite_difference_gradient(fn, f64.copy(), probe, eps=1e-6)
        for idx, g in zip(probe, fd):
            assert abs(analytic[idx] - g) / max(abs(g), abs(analytic[idx])) < 1e-4


class TestLbfgs:
    def test_lbfgs_reduces_loss(self, trained_tiny):
        model, cases = trained_tiny
        volume, label = cases[1]
        pred, f = model.predict(volume)
        s = worst_slice(pred, label, volume.spacing)
        cfg = UpdateConfig(optimizer="lbfgs", lr=1.0, max_iters=15, loss=LossConfig("dice"))
        f2, trace = update_features(model, f, SliceEdit(s, label.data[s]), cfg)
        assert trace.iterations > 0
        final = slice_loss(model, f2, SliceEdit(s, label.data[s]), cfg.loss)
        assert final < trace.initial_loss


class TestNeighborEffect:
    def test_neighbors_improve_on_bad_cases(self, tube_cfg, tube_cases, tube_models):
        """On >= 80% of cases whose worst-slice DSC < 0.6, the +-2 band improves."""
        model, _ = tube_models
        ucfg = tube_cfg.resolved_update()
        improved, eligible = 0, 0
        for case in tube_cases:
            pred, f = model.predict(case.volume)
            s = worst_slice(pred, case.label, case.volume.spacing)
            if dsc(pred.binary[s], case.label.data[s]) >= 0.6:
                continue
            eligible += 1
            f2, _ = update_features(model, f, SliceEdit(s, case.label.data[s]), ucfg)
            upd = model.decode_from(f2)
            nb = [z for z in (s - 2, s - 1, s + 1, s + 2) if 0 <= z < case.volume.dims[0]]
            before = np.mean([dsc(pred.binary[z], case.label.data[z]) for z in nb])
            after = np.mean([dsc(upd.binary[z], case.label.data[z]) for z in nb])
            if after > before:
                improved += 1
        assert eligible >= 5
        assert improved / eligible >= 0.8
