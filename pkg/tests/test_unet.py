import numpy as np
import pytest
from hypothesis import given, strategies as st

from emoe.core import RngStream, attention
from emoe.text import ExpertDescriptor, Prompt, encode
from emoe.unet import (GateWeights, Geometry, UNetWeights, compute_gate_weights, forward, gates_from_logits,
                       merge_tokens, moe_cross_attention, moe_feed_forward, patchify, split_tokens, unpatchify)

GEOM = Geometry()


def _identical(m, seed=0):
    w = UNetWeights.random(GEOM, 1, seed)
    return UNetWeights(GEOM, w.backbone, [w.experts[0]] * m)


def _inputs(seed=0, b=None):
    s = RngStream(seed, 11)
    z = s.normal(GEOM.latent_shape if b is None else (b,) + GEOM.latent_shape)
    ctx = encode(Prompt("a red circle big")).tokens
    return z, ctx


class TestGating:
    def test_uniform_when_equal(self):
        d = [ExpertDescriptor("red", "blue")] * 4
        g = compute_gate_weights(Prompt("a green star"), d, 4, 32)
        assert g.selected == (0, 1, 2, 3)
        assert np.allclose(g.weights, 0.25, atol=1e-15)

    def test_single(self):
        g = gates_from_logits(np.array([0.1, 2.0, -1.0]), 1)
        assert g.selected == (1,) and g.weights[0] == 1.0

    def test_ties_lower_index(self):
        g = gates_from_logits(np.array([1.0, 3.0, 3.0, 3.0]), 2)
        assert g.selected == (1, 2)

    def test_n_too_large(self):
        with pytest.raises(ValueError):
            gates_from_logits(np.zeros(3), 4)

    @given(st.lists(st.floats(-20, 20), min_size=1, max_size=8), st.floats(-100, 100), st.data())
    def test_shift_invariance_and_simplex(self, alpha, c, data):
        alpha = np.array(alpha)
        n = data.draw(st.integers(1, len(alpha)))
        g1, g2 = gates_from_logits(alpha, n), gates_from_logits(alpha + c, n)
        assert len(g1.selected) == n
        assert np.all(g1.weights >= 0) and abs(g1.weights.sum() - 1) < 1e-12
        # top-n is the n largest logits
        assert min(alpha[list(g1.selected)]) >= max(np.delete(alpha, list(g1.selected)), default=-np.inf)
        if g1.selected == g2.selected:
            assert np.allclose(g1.weights, g2.weights, atol=1e-12)

    def test_dot_product_definition(self):
        from emoe.text import gate_vector, prompt_gate_vector

        d = [ExpertDescriptor("red", "blue"), ExpertDescriptor("green", "yellow"), ExpertDescriptor("star", "ring")]
        p = Prompt("a red circle")
        alpha = np.array([gate_vector(x) @ prompt_gate_vector(p) for x in d])
        g = compute_gate_weights(p, d, 2, 32)
        top = sorted(np.argsort(-alpha, kind="stable")[:2])
        e = np.exp(alpha[top] - alpha[top].max())
        assert g.selected == tuple(top) and np.allclose(g.weights, e / e.sum(), atol=1e-15)

    def test_gate_weights_validation(self):
        with pytest.raises(ValueError):
            GateWeights((0, 1), np.array([0.5, 0.6]))


class TestLayout:
    def test_patchify_round_trip(self):
        z = RngStream(0).normal((3, 2, 8, 8))
        assert np.array_equal(unpatchify(patchify(z), 2, 8), z)

    def test_merge_split_round_trip(self):
        x = RngStream(0).normal((2, 16, 8))
        assert np.array_equal(split_tokens(merge_tokens(x)), x)


class TestCrossAttention:
    def setup_method(self):
        s = RngStream(5)
        self.w = UNetWeights.random(GEOM, 3, 1)
        self.x = s.normal((1, 16, 8))
        self.ctx = s.normal((1, 4, 32))
        self.mask = np.ones((1, 4), dtype=bool)

    def test_single_expert_modes_agree(self):
        ex = self.w.experts[:1]
        agg = moe_cross_attention(self.x, self.ctx, self.mask, ex, GateWeights.single(0), "down_ca")
        sep = moe_cross_attention(self.x, self.ctx, self.mask, ex, GateWeights.single(0), "down_ca", "separate")
        assert np.array_equal(agg, sep[0])

    def test_identical_experts(self):
        ex = [self.w.experts[0]] * 3
        g = GateWeights((0, 2), np.array([0.4, 0.6]))
        agg = moe_cross_attention(self.x, self.ctx, self.mask, ex, g, "down_ca")
        sep = moe_cross_attention(self.x, self.ctx, self.mask, ex, g, "down_ca", "separate")
        assert sep.shape[0] == 3
        for s in sep:
            assert np.max(np.abs(s - agg)) < 1e-12

    def test_one_hot_is_solo(self):
        g = GateWeights((0, 1), np.array([1.0, 0.0]))
        agg = moe_cross_attention(self.x, self.ctx, self.mask, self.w.experts, g, "down_ca")
        e = self.w.experts[0]
        solo = self.x + attention(self.x @ e["down_ca.Wq"], self.ctx @ e["down_ca.Wk"], self.ctx @ e["down_ca.Wv"])
        assert np.allclose(agg, solo, atol=1e-14)

    def test_separate_ignores_selection(self):
        sep = moe_cross_attention(self.x, self.ctx, self.mask, self.w.experts, GateWeights.single(1), "down_ca",
                                  "separate")
        assert sep.shape[0] == 3

    def test_separate_only_at_first_layer(self):
        m = np.ones((1, 4, 8))
        with pytest.raises(ValueError, match="separate mode"):
            moe_cross_attention(m, self.ctx, self.mask, self.w.experts, GateWeights.single(0), "mid_ca", "separate")

    def test_dimension_error(self):
        with pytest.raises(ValueError, match="feature axis"):
            moe_cross_attention(np.ones((1, 16, 5)), self.ctx, self.mask, self.w.experts, GateWeights.single(0),
                                "down_ca")

    @given(st.integers(0, 2**31), st.floats(0.01, 0.99))
    def test_aggregate_projection_in_hull(self, seed, w0):
        # Q (and K, V) with mixed projections is a convex combination of the per-expert projections
        s = RngStream(seed)
        x = s.normal((5, 8))
        ex = self.w.experts
        g = GateWeights((0, 2), np.array([w0, 1 - w0]))
        qs = [x @ ex[i]["down_ca.Wq"] for i in (0, 2)]
        q_mix = x @ (w0 * ex[0]["down_ca.Wq"] + (1 - w0) * ex[2]["down_ca.Wq"])
        assert np.allclose(q_mix, g.weights[0] * qs[0] + g.weights[1] * qs[1], atol=1e-12)
        lo, hi = np.minimum(*qs), np.maximum(*qs)
        assert np.all(q_mix >= lo - 1e-12) and np.all(q_mix <= hi + 1e-12)


class TestFeedForward:
    def setup_method(self):
        self.w = UNetWeights.random(GEOM, 2, 3)
        self.x = RngStream(1).normal((1, 16, 8))

    def _mlp(self, e, x):
        h = np.tanh(x @ e["down_ff.W1"] + e["down_ff.b1"])
        return h @ e["down_ff.W2"] + e["down_ff.b2"]

    def test_one_hot(self):
        out = moe_feed_forward(self.x, self.w.experts, GateWeights.single(1), "down_ff")
        assert np.allclose(out, self.x + self._mlp(self.w.experts[1], self.x), atol=1e-14)

    def test_identical_experts_weight_free(self):
        ex = [self.w.experts[0]] * 2
        a = moe_feed_forward(self.x, ex, GateWeights((0, 1), np.array([0.2, 0.8])), "down_ff")
        b = moe_feed_forward(self.x, ex, GateWeights((0, 1), np.array([0.7, 0.3])), "down_ff")
        assert np.allclose(a, b, atol=1e-14)

    def test_zero_mlp_is_identity(self):
        e = {k: np.zeros_like(v) for k, v in self.w.experts[0].items()}
        out = moe_feed_forward(self.x, [e], GateWeights.single(0), "down_ff")
        assert np.array_equal(out, self.x)


class TestForward:
    def test_identical_experts_collapse(self):
        w = _identical(4)
        z, ctx = _inputs()
        g = GateWeights((1, 3), np.array([0.3, 0.7]))
        agg = forward(w, z, 10, ctx, g)
        sep = forward(w, z, 10, ctx, g, mode="separate_first")
        assert sep.eps.shape == (4, 1) + GEOM.latent_shape
        assert sep.mid.post.shape == (4, 1, GEOM.mid_tokens, GEOM.d_mid)
        for i in range(4):
            assert np.max(np.abs(sep.eps[i] - agg.eps)) < 1e-12
            assert np.max(np.abs(sep.mid.post[i] - agg.mid.post)) < 1e-12

    def test_single_expert_modes_coincide(self):
        w = UNetWeights.random(GEOM, 1, 2)
        z, ctx = _inputs()
        g = GateWeights.single(0)
        assert np.array_equal(forward(w, z, 3, ctx, g).eps, forward(w, z, 3, ctx, g, mode="separate_first").eps[0])

    def test_deterministic(self):
        w = UNetWeights.random(GEOM, 4, 2)
        z, ctx = _inputs()
        g = GateWeights.uniform(4)
        assert np.array_equal(forward(w, z, 5, ctx, g).eps, forward(w, z, 5, ctx, g).eps)

    def test_batch_matches_single(self):
        w = UNetWeights.random(GEOM, 2, 2)
        z, ctx = _inputs(b=3)
        g = GateWeights.uniform(2)
        batch = forward(w, z, np.array([1, 7, 25]), ctx, g).eps
        for i, t in enumerate([1, 7, 25]):
            assert np.allclose(batch[i], forward(w, z[i], t, ctx, g).eps[0], atol=1e-13)

    def test_bad_timestep_and_shape(self):
        w = UNetWeights.random(GEOM, 1, 0)
        z, ctx = _inputs()
        with pytest.raises(ValueError, match="timestep"):
            forward(w, z, 0, ctx, GateWeights.single(0))
        with pytest.raises(ValueError, match="latent"):
            forward(w, np.zeros((2, 4, 4)), 1, ctx, GateWeights.single(0))

    def test_mid_latent_size(self):
        assert GEOM.mid_size == 32 and GEOM.mid_tokens == 4


class TestWeights:
    def test_shape_validation(self):
        w = UNetWeights.random(GEOM, 1, 0)
        bad = dict(w.backbone, W_in=np.zeros((3, 3)))
        with pytest.raises(ValueError, match="W_in"):
            UNetWeights(GEOM, bad, w.experts)

    def test_projection_shapes(self):
        s = GEOM.expert_shapes()
        assert s["down_ca.Wq"] == (8, 8) and s["down_ca.Wk"] == (32, 8) and s["mid_ca.Wv"] == (32, 8)

    def test_subset_and_copy(self):
        w = UNetWeights.random(GEOM, 4, 0)
        sub = w.subset([2, 0])
        assert sub.M == 2 and sub.experts[0] is w.experts[2]
        c = w.copy()
        c.experts[0]["down_ca.Wq"][0, 0] += 1
        assert c.experts[0]["down_ca.Wq"][0, 0] != w.experts[0]["down_ca.Wq"][0, 0]
