import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import finite_difference_gradient
from propaseg.losses import LossConfig, ce_loss, dice_loss, seg_loss


def test_loss_config_kinds():
    assert LossConfig("dice").kind == "dice"
    with pytest.raises(ValueError):
        LossConfig("focal")


class TestDice:
    def test_perfect_overlap(self):
        y = torch.zeros(2, 3, 3)
        y[0, 1, 1] = 1.0
        assert float(dice_loss(y, y)) == -1.0

    def test_disjoint_nonempty(self):
        p = torch.zeros(1, 2, 2)
        y = torch.zeros(1, 2, 2)
        p[0, 0, 0] = 1.0
        y[0, 1, 1] = 1.0
        assert float(dice_loss(p, y)) == 0.0

    def test_range(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            p = torch.from_numpy(rng.random((2, 4, 4)))
            y = torch.from_numpy((rng.random((2, 4, 4)) > 0.5).astype(np.float64))
            v = float(dice_loss(p, y))
            assert -1.0 <= v <= 0.0

    def test_both_empty(self):
        z = torch.zeros(2, 2, 2)
        assert float(dice_loss(z, z)) == 0.0


class TestCrossEntropy:
    def test_uniform_logits_ln2(self):
        logits = torch.zeros(2, 1, 1, 1)
        for target_value in (0.0, 1.0):
            y = torch.full((1, 1, 1), target_value)
            assert float(ce_loss(logits, y)) == pytest.approx(math.log(2.0), rel=1e-6)

    def test_confident_correct_near_zero(self):
        logits = torch.zeros(2, 1, 2, 2)
        logits[1] = 20.0
        y = torch.ones(1, 2, 2)
        assert float(ce_loss(logits, y)) < 1e-6

    def test_manual_2x2_arithmetic(self):
        logits = torch.tensor(
            [[[1.0, -2.0], [0.5, 3.0]], [[2.0, 1.0], [0.5, -1.0]]]
        )  # (2, 2, 2) = (class, H, W)
        y = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
        expected = 0.0
        for i in range(2):
            for j in range(2):
                z = [float(logits[0, i, j]), float(logits[1, i, j])]
                c = int(y[i, j])
                denom = math.exp(z[0]) + math.exp(z[1])
                expected += -math.log(math.exp(z[c]) / denom)
        expected /= 4.0
        assert float(ce_loss(logits, y)) == pytest.approx(expected, rel=1e-6)


class TestHybridAndRegion:
    def test_hybrid_is_sum(self):
        rng = np.random.default_rng(1)
        logits = torch.from_numpy(rng.standard_normal((2, 3, 4, 4)))
        y = torch.from_numpy((rng.random((3, 4, 4)) > 0.7).astype(np.float64))
        probs = torch.softmax(logits, dim=0)[1]
        total = seg_loss(logits, y, LossConfig("hybrid"))
        assert float(total) == pytest.approx(
            float(dice_loss(probs, y)) + float(ce_loss(logits, y)), rel=1e-9
        )

    def test_full_region_equals_unrestricted(self):
        rng = np.random.default_rng(2)
        logits = torch.from_numpy(rng.standard_normal((2, 4, 3, 3)))
        y = torch.from_numpy((rng.random((4, 3, 3)) > 0.6).astype(np.float64))
        for kind in ("dice", "hybrid"):
            cfg = LossConfig(kind)
            assert float(seg_loss(logits, y, cfg, region=range(4))) == pytest.approx(
                float(seg_loss(logits, y, cfg)), rel=1e-12
            )

    def test_region_restriction_sums_only_listed_slices(self):
        logits = torch.zeros(2, 3, 2, 2)
        logits[1, 0] = 40.0  # slice 0 predicted fg, saturated
        y = torch.zeros(3, 2, 2)
        y[0] = 1.0
        # restricted to slice 0: perfect -> dice -1
        assert float(seg_loss(logits, y, LossConfig("dice"), region=[0])) == pytest.approx(
            -1.0, abs=1e-6
        )
        # restricted to slice 1: both empty there -> dice 0
        assert float(seg_loss(logits, y, LossConfig("dice"), region=[1])) == 0.0

    def test_empty_region_error(self):
        logits = torch.zeros(2, 2, 2, 2)
        y = torch.zeros(2, 2, 2)
        with pytest.raises(ValueError):
            seg_loss(logits, y, LossConfig("dice"), region=[])

    def test_region_out_of_range(self):
        logits = torch.zeros(2, 2, 2, 2)
        y = torch.zeros(2, 2, 2)
        with pytest.raises(ValueError):
            seg_loss(logits, y, LossConfig("dice"), region=[5])


class TestGradients:
    @settings(max_examples=8, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_loss_gradients_match_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        logits_np = rng.standard_normal((2, 2, 3, 3))
        y = torch.from_numpy((rng.random((2, 3, 3)) > 0.5).astype(np.float64))
        for kind in ("dice", "hybrid"):
            cfg = LossConfig(kind)
            logits = torch.from_numpy(logits_np.copy()).requires_grad_(True)
            loss = seg_loss(logits, y, cfg)
            loss.backward()
            analytic = logits.grad.reshape(-1).numpy()
            probe = rng.choice(analytic.size, size=6, replace=False)

            def fn(x):
                return float(seg_loss(torch.from_numpy(x), y, cfg).detach())

            fd = finite_difference_gradient(fn, logits_np.copy(), probe, eps=1e-6)
            for idx, g in zip(probe, fd):
                denom = max(abs(g), abs(analytic[idx]), 1e-8)
                assert abs(analytic[idx] - g) / denom < 1e-4
