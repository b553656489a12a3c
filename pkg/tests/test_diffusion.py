import numpy as np
import pytest
from hypothesis import given, strategies as st

from emoe.core import RngStream
from emoe.diffusion import (LatentState, TrainingConfig, TrainingDiverged, build_schedule, ddim_step,
                            forward_marginal, forward_step, ldm_loss, schedule_from_betas, train_expert)
from emoe.synthetic import make_slice
from emoe.unet import Geometry, UNetWeights


class TestSchedule:
    def test_two_step_hand_values(self):
        s = build_schedule(2, 0.1, 0.2)
        assert np.allclose(s.alpha_bars, [0.9, 0.72], atol=1e-15)

    def test_default_range_monotone(self):
        s = build_schedule(25, 1e-4, 0.02)
        assert s.T == 25
        assert np.all(np.diff(s.betas) > 0) and np.all(np.diff(s.alpha_bars) < 0)
        assert np.all((s.alpha_bars > 0) & (s.alpha_bars < 1))

    @pytest.mark.parametrize("args", [(1, 0.1, 0.2), (5, 0.0, 0.2), (5, 0.3, 0.2), (5, 0.1, 1.0)])
    def test_invalid(self, args):
        with pytest.raises(ValueError):
            build_schedule(*args)

    @given(st.integers(2, 200), st.floats(1e-6, 0.5), st.floats(0.01, 0.49))
    def test_invariants(self, T, lo, gap):
        s = build_schedule(T, lo, min(lo + gap, 0.999))
        assert np.all(np.diff(s.betas) > 0)
        assert np.all(np.diff(s.alpha_bars) < 0)
        assert s.alpha_bar(0) == 1.0

    def test_explicit_betas(self):
        with pytest.raises(ValueError):
            schedule_from_betas([0.2, 0.1])


class TestForward:
    def test_tiny_beta_is_identity(self):
        s = schedule_from_betas([1e-12, 2e-12])
        z = RngStream(0).normal((2, 8, 8))
        out = forward_step(LatentState(z, 0), s, RngStream(1))
        assert out.t == 1 and np.max(np.abs(out.z - z)) < 1e-5

    def test_variance_from_zero(self):
        s = build_schedule(3, 0.05, 0.2)
        out = forward_step(LatentState(np.zeros(100_000), 1), s, RngStream(2))
        beta = s.betas[1]
        # sample variance of 1e5 normals: sd about beta * sqrt(2 / 1e5)
        assert abs(out.z.var() - beta) < 4 * beta * np.sqrt(2 / 1e5)

    def test_chain_exhausted(self):
        s = build_schedule(2, 0.1, 0.2)
        with pytest.raises(ValueError, match="chain exhausted"):
            forward_step(LatentState(np.zeros(3), 2), s, RngStream(0))

    def test_reproducible(self):
        s = build_schedule(4, 0.1, 0.2)
        a = forward_step(LatentState(np.ones(5), 0), s, RngStream(9)).z
        b = forward_step(LatentState(np.ones(5), 0), s, RngStream(9)).z
        assert np.array_equal(a, b)

    def test_marginal_reconstruction(self):
        s = build_schedule(25, 1e-4, 0.4)
        z0 = RngStream(0).normal((2, 8, 8))
        zt, eps = forward_marginal(LatentState(z0, 0), 13, s, RngStream(3))
        ab = s.alpha_bar(13)
        assert np.max(np.abs(zt.z - (np.sqrt(ab) * z0 + np.sqrt(1 - ab) * eps))) < 1e-12

    def test_marginal_range(self):
        s = build_schedule(4, 0.1, 0.2)
        for t in (0, 5):
            with pytest.raises(ValueError):
                forward_marginal(LatentState(np.zeros(2), 0), t, s, RngStream(0))

    def test_marginal_matches_iterated_steps(self):
        s = build_schedule(6, 0.05, 0.3)
        n, t = 10_000, 5
        z0 = np.linspace(-2, 2, 4)
        batch = np.tile(z0, (n, 1))
        zm, _ = forward_marginal(LatentState(batch, 0), t, s, RngStream(1))
        state = LatentState(batch, 0)
        stream = RngStream(2)
        for _ in range(t):
            state = forward_step(state, s, stream)
        for a, b in ((zm.z, state.z),):
            se_mean = np.sqrt(a.var(0) / n + b.var(0) / n)
            assert np.all(np.abs(a.mean(0) - b.mean(0)) < 3 * se_mean)
            var_a, var_b = a.var(0), b.var(0)
            se_var = np.sqrt(2 * var_a**2 / (n - 1) + 2 * var_b**2 / (n - 1))
            assert np.all(np.abs(var_a - var_b) < 3 * se_var)


class TestDDIM:
    def test_inverts_t1(self):
        s = build_schedule(25, 1e-4, 0.4)
        z0 = RngStream(4).normal((2, 8, 8))
        zt, eps = forward_marginal(LatentState(z0, 0), 1, s, RngStream(5))
        out = ddim_step(zt, eps, s)
        assert out.t == 0 and np.max(np.abs(out.z - z0)) < 1e-10

    def test_t1_returns_x0_hat(self):
        s = build_schedule(25, 1e-4, 0.4)
        z = RngStream(1).normal((3,))
        e = RngStream(2).normal((3,))
        ab = s.alpha_bar(1)
        assert np.allclose(ddim_step(LatentState(z, 1), e, s).z, (z - np.sqrt(1 - ab) * e) / np.sqrt(ab), atol=1e-15)

    def test_deterministic(self):
        s = build_schedule(25, 1e-4, 0.4)
        z, e = np.ones(4), np.full(4, 0.5)
        assert np.array_equal(ddim_step(LatentState(z, 9), e, s).z, ddim_step(LatentState(z, 9), e, s).z)

    def test_errors(self):
        s = build_schedule(4, 0.1, 0.2)
        with pytest.raises(ValueError):
            ddim_step(LatentState(np.ones(3), 0), np.ones(3), s)
        with pytest.raises(ValueError):
            ddim_step(LatentState(np.ones(3), 2), np.ones(4), s)


class TestLoss:
    def test_examples(self):
        assert ldm_loss(np.ones(5), np.ones(5)) == 0.0
        assert ldm_loss(np.zeros((2, 3)), np.ones((2, 3))) == 1.0
        a, b = RngStream(0).normal((4,)), RngStream(1).normal((4,))
        assert ldm_loss(a, b) == ldm_loss(b, a)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            ldm_loss(np.ones(3), np.ones(4))


class TestTraining:
    sched = build_schedule(25, 1e-4, 0.4)

    def test_zero_learning_rate(self):
        w = UNetWeights.random(Geometry(), 1, 0)
        before = w.copy()
        log = train_expert(TrainingConfig(epochs=3, learning_rate=0.0, optimizer="sgd"), make_slice(0, 0, 40),
                           w, self.sched)
        for k in w.backbone:
            assert np.array_equal(w.backbone[k], before.backbone[k])
        assert log.initial_eval == log.final_eval

    def test_single_sample_overfits(self):
        w = UNetWeights.random(Geometry(), 1, 0)
        log = train_expert(TrainingConfig(epochs=500, batch_size=1), make_slice(0, 0, 1), w, self.sched)
        assert log.steps == 500
        assert log.final_eval <= 0.5 * log.initial_eval

    def test_deterministic(self):
        logs = []
        for _ in range(2):
            w = UNetWeights.random(Geometry(), 1, 0)
            logs.append(train_expert(TrainingConfig(epochs=2), make_slice(0, 0, 64), w, self.sched).epoch_losses)
        assert logs[0] == logs[1]

    def test_loss_decreases_on_slice(self):
        w = UNetWeights.random(Geometry(), 1, 1)
        log = train_expert(TrainingConfig(epochs=5), make_slice(1, 0, 200), w, self.sched)
        assert log.final_eval < log.initial_eval

    def test_frozen_backbone(self):
        w = UNetWeights.random(Geometry(), 1, 0)
        before = {k: v.copy() for k, v in w.backbone.items()}
        train_expert(TrainingConfig(epochs=1), make_slice(0, 0, 32), w, self.sched, trainable="experts")
        assert all(np.array_equal(before[k], w.backbone[k]) for k in before)

    def test_divergence_reports_epoch(self):
        w = UNetWeights.random(Geometry(), 1, 0)
        cfg = TrainingConfig(epochs=3, batch_size=8, learning_rate=1e6, optimizer="sgd")
        with pytest.raises(TrainingDiverged, match="epoch") as exc:
            train_expert(cfg, make_slice(0, 0, 64), w, self.sched)
        assert exc.value.epoch == 0

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainingConfig(epochs=0)
        with pytest.raises(ValueError):
            TrainingConfig(optimizer="rmsprop")
