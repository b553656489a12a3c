"""Toy conditional U-Net with sparse mixture-of-experts conditioning layers.

Dataflow for a ``2x8x8`` latent (token counts in brackets)::

    patchify [16 x 8] -> linear + position and timestep embeddings
      -> down_ca (MoE cross-attention)  <- separation layer
      -> down_ff (MoE feed-forward)                      ---- skip ----+
    merge 2x2 [4 x 32] -> linear -> m_pre [4 x 8]                      |
      -> mid_ca (MoE cross-attention) -> mid MLP -> m_post [4 x 8]     |
    linear [4 x 32] -> split 2x2 [16 x 8] + skip <----------------------+
      -> up_ca (MoE cross-attention) -> up_ff (MoE feed-forward)
    linear -> unpatchify -> eps_pred = skip_gain[t] * z + out_gain[t] * (.)

The two per-timestep scalar tables let the noise prediction change its gain
with ``t``; an additive timestep embedding alone cannot.

All MoE layers share one prompt-level :class:`GateWeights`. Gradients are
hand-derived; :func:`backward` consumes the cache built by :func:`forward`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import RngStream, attention_weights, check_finite, softmax
from .text import ExpertDescriptor, Prompt, gate_vector, prompt_gate_vector

CA_LAYERS = ("down_ca", "mid_ca", "up_ca")
FF_LAYERS = ("down_ff", "up_ff")
MOE_LAYERS = ("down_ca", "down_ff", "mid_ca", "up_ca", "up_ff")
SEPARATION_LAYER = "down_ca"


@dataclass(frozen=True)
class Geometry:
    channels: int = 2
    size: int = 8
    d_model: int = 8
    d_mid: int = 8  # channels of the mid-block latent
    d_txt: int = 32
    d_ff: int = 16
    T: int = 25

    def __post_init__(self):
        if self.size % 4:
            raise ValueError("latent size must be divisible by 4")
        if min(self.channels, self.size, self.d_model, self.d_mid, self.d_txt, self.d_ff) < 1:
            raise ValueError("all dimensions must be >= 1")
        if self.T < 2:
            raise ValueError("T must be >= 2")

    @property
    def n_tokens(self) -> int:
        return (self.size // 2) ** 2

    @property
    def mid_tokens(self) -> int:
        return (self.size // 4) ** 2

    @property
    def mid_size(self) -> int:
        """Flattened size of m_pre / m_post (d_mid in the estimator)."""
        return self.mid_tokens * self.d_mid

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        return (self.channels, self.size, self.size)

    def backbone_shapes(self) -> dict[str, tuple[int, ...]]:
        pin = self.channels * 4
        return {
            "W_in": (pin, self.d_model),
            "b_in": (self.d_model,),
            "temb": (self.T, self.d_model),
            "pos": (self.n_tokens, self.d_model),
            "W_dm": (4 * self.d_model, self.d_mid),
            "b_dm": (self.d_mid,),
            "mid_W1": (self.d_mid, self.d_ff),
            "mid_b1": (self.d_ff,),
            "mid_W2": (self.d_ff, self.d_mid),
            "mid_b2": (self.d_mid,),
            "W_ue": (self.d_mid, 4 * self.d_model),
            "b_ue": (4 * self.d_model,),
            "W_out": (self.d_model, pin),
            "b_out": (pin,),
            "skip_gain": (self.T,),
            "out_gain": (self.T,),
        }

    def expert_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        for layer in CA_LAYERS:
            d = self.d_mid if layer == "mid_ca" else self.d_model
            shapes[f"{layer}.Wq"] = (d, d)
            shapes[f"{layer}.Wk"] = (self.d_txt, d)
            shapes[f"{layer}.Wv"] = (self.d_txt, d)
        for layer in FF_LAYERS:
            shapes[f"{layer}.W1"] = (self.d_model, self.d_ff)
            shapes[f"{layer}.b1"] = (self.d_ff,)
            shapes[f"{layer}.W2"] = (self.d_ff, self.d_model)
            shapes[f"{layer}.b2"] = (self.d_model,)
        return shapes


def _init_array(stream: RngStream, name: str, shape: tuple[int, ...], scale: float = 1.0) -> np.ndarray:
    base = name.rsplit(".", 1)[-1]
    if base.startswith("b") and len(shape) == 1:
        return np.zeros(shape)
    if base in ("temb", "pos"):
        return 0.3 * stream.normal(shape)
    if base in ("skip_gain", "out_gain"):
        return np.ones(shape)
    return scale * stream.normal(shape) / np.sqrt(shape[0])


def init_backbone(geom: Geometry, stream: RngStream) -> dict[str, np.ndarray]:
    return {k: _init_array(stream, k, s) for k, s in geom.backbone_shapes().items()}


def init_expert(geom: Geometry, stream: RngStream) -> dict[str, np.ndarray]:
    return {k: _init_array(stream, k, s) for k, s in geom.expert_shapes().items()}


@dataclass
class UNetWeights:
    geometry: Geometry
    backbone: dict[str, np.ndarray]
    experts: list[dict[str, np.ndarray]] = field(default_factory=list)

    def __post_init__(self):
        for k, s in self.geometry.backbone_shapes().items():
            if self.backbone[k].shape != s:
                raise ValueError(f"backbone weight {k} has shape {self.backbone[k].shape}, expected {s}")
        shapes = self.geometry.expert_shapes()
        for i, e in enumerate(self.experts):
            if set(e) != set(shapes):
                raise ValueError(f"expert {i} does not carry every MoE layer")
            for k, s in shapes.items():
                if e[k].shape != s:
                    raise ValueError(f"expert {i} weight {k} has shape {e[k].shape}, expected {s}")

    @property
    def M(self) -> int:
        return len(self.experts)

    @classmethod
    def random(cls, geom: Geometry, n_experts: int, seed: int) -> "UNetWeights":
        stream = RngStream(seed, 0xB0)
        experts = [init_expert(geom, RngStream(seed, 0xE0 + i)) for i in range(n_experts)]
        return cls(geom, init_backbone(geom, stream), experts)

    def subset(self, indices) -> "UNetWeights":
        """Same backbone, only the listed experts (arrays are shared)."""
        return UNetWeights(self.geometry, self.backbone, [self.experts[i] for i in indices])

    def copy(self) -> "UNetWeights":
        return UNetWeights(
            self.geometry,
            {k: v.copy() for k, v in self.backbone.items()},
            [{k: v.copy() for k, v in e.items()} for e in self.experts],
        )


@dataclass(frozen=True)
class GateWeights:
    selected: tuple[int, ...]
    weights: np.ndarray

    def __post_init__(self):
        if len(self.selected) != len(self.weights) or len(self.selected) == 0:
            raise ValueError("gate needs one weight per selected expert")
        if np.any(self.weights < 0) or abs(float(np.sum(self.weights)) - 1.0) > 1e-12:
            raise ValueError("gate weights must be a probability vector")

    @classmethod
    def single(cls, index: int = 0) -> "GateWeights":
        return cls((index,), np.ones(1))

    @classmethod
    def uniform(cls, m: int) -> "GateWeights":
        return cls(tuple(range(m)), np.full(m, 1.0 / m))

    def dense(self, m: int) -> np.ndarray:
        out = np.zeros(m)
        out[list(self.selected)] = self.weights
        return out


def gate_logits(prompt: Prompt, descriptors: list[ExpertDescriptor], d_txt: int) -> np.ndarray:
    """``alpha_i = v_i . [pooled(prompt); pooled(negative prompt)]``."""
    query = prompt_gate_vector(prompt, d_txt)
    return np.array([gate_vector(d, d_txt) @ query for d in descriptors])


def gates_from_logits(alpha: np.ndarray, n: int) -> GateWeights:
    m = len(alpha)
    if not 1 <= n <= m:
        raise ValueError(f"top-n must satisfy 1 <= n <= M (got n={n}, M={m})")
    order = sorted(range(m), key=lambda i: (-alpha[i], i))
    selected = tuple(sorted(order[:n]))
    return GateWeights(selected, softmax(alpha[list(selected)]))


def compute_gate_weights(prompt: Prompt, descriptors: list[ExpertDescriptor], n: int,
                         d_txt: int) -> GateWeights:
    return gates_from_logits(gate_logits(prompt, descriptors, d_txt), n)


# ---------------------------------------------------------------------------
# token layout helpers


def patchify(z: np.ndarray) -> np.ndarray:
    b, c, h, w = z.shape
    x = z.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(b, (h // 2) * (w // 2), c * 4)


def unpatchify(x: np.ndarray, channels: int, size: int) -> np.ndarray:
    b = x.shape[0]
    g = size // 2
    x = x.reshape(b, g, g, channels, 2, 2).transpose(0, 3, 1, 4, 2, 5)
    return x.reshape(b, channels, size, size)


def merge_tokens(x: np.ndarray) -> np.ndarray:
    """``(B, g*g, d)`` token grid -> ``(B, g*g/4, 4d)`` by 2x2 grouping."""
    b, n, d = x.shape
    g = int(round(np.sqrt(n)))
    x = x.reshape(b, g // 2, 2, g // 2, 2, d).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, n // 4, 4 * d)


def split_tokens(x: np.ndarray) -> np.ndarray:
    """Inverse of :func:`merge_tokens`."""
    b, n, d4 = x.shape
    g = int(round(np.sqrt(n)))
    d = d4 // 4
    x = x.reshape(b, g, g, 2, 2, d).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, 4 * n, d)


# ---------------------------------------------------------------------------
# layers


def _flat(x: np.ndarray) -> np.ndarray:
    return x.reshape(-1, x.shape[-1])


def _mix(experts: list[dict], gates: GateWeights, key: str) -> np.ndarray:
    it = iter(zip(gates.selected, gates.weights))
    i, w = next(it)
    out = w * experts[i][key]
    for i, w in it:
        out = out + w * experts[i][key]
    return out


def _check_dims(x: np.ndarray, d: int, what: str):
    if x.shape[-1] != d:
        raise ValueError(f"{what}: feature axis has size {x.shape[-1]}, layer expects {d}")


def moe_cross_attention(x, ctx, mask, experts, gates, layer, mode="aggregate"):
    """MoE cross-attention with residual.

    ``aggregate``: Q, K, V are the gate-weighted sums of the selected experts'
    projections (computed by mixing the bias-free projection matrices), then a
    single attention call. ``separate``: every expert ``i`` produces its own
    ``x + Attention(Q_i, K_i, V_i)``; returns an array with a new leading
    expert axis. Only the separation layer may run in separate mode.
    """
    wq_key, wk_key, wv_key = f"{layer}.Wq", f"{layer}.Wk", f"{layer}.Wv"
    _check_dims(x, experts[0][wq_key].shape[0], f"{layer} query input")
    _check_dims(ctx, experts[0][wk_key].shape[0], f"{layer} context input")
    if mode == "separate":
        if layer != SEPARATION_LAYER:
            raise ValueError(f"separate mode is only legal at {SEPARATION_LAYER}, not {layer}")
        outs = []
        for e in experts:
            p = attention_weights(x @ e[wq_key], ctx @ e[wk_key], mask)
            outs.append(x + p @ (ctx @ e[wv_key]))
        return np.stack(outs)
    if mode != "aggregate":
        raise ValueError(f"unknown mode {mode!r}")
    out, _ = _ca_forward(x, ctx, mask, _mix(experts, gates, wq_key), _mix(experts, gates, wk_key),
                         _mix(experts, gates, wv_key))
    return out


def _ca_forward(x, ctx, mask, wq, wk, wv):
    q = x @ wq
    k = ctx @ wk
    v = ctx @ wv
    p = attention_weights(q, k, mask)
    return x + p @ v, (x, ctx, q, k, v, p, wq, wk, wv)


def _ca_backward(dout, cache):
    x, ctx, q, k, v, p, wq, wk, wv = cache
    d = q.shape[-1]
    dv = np.swapaxes(p, -1, -2) @ dout
    dp = dout @ np.swapaxes(v, -1, -2)
    ds = p * (dp - np.sum(dp * p, axis=-1, keepdims=True))
    dq = ds @ k / np.sqrt(d)
    dk = np.swapaxes(ds, -1, -2) @ q / np.sqrt(d)
    grads = {
        "Wq": _flat(x).T @ _flat(dq),
        "Wk": _flat(ctx).T @ _flat(dk),
        "Wv": _flat(ctx).T @ _flat(dv),
    }
    dx = dout + dq @ wq.T
    return dx, grads


def _mlp_forward(x, w1, b1, w2, b2):
    h = np.tanh(x @ w1 + b1)
    return h @ w2 + b2, (x, h, w1, w2)


def _mlp_backward(df, cache):
    x, h, w1, w2 = cache
    da = (df @ w2.T) * (1.0 - h * h)
    grads = {
        "W1": _flat(x).T @ _flat(da),
        "b1": _flat(da).sum(axis=0),
        "W2": _flat(h).T @ _flat(df),
        "b2": _flat(df).sum(axis=0),
    }
    return da @ w1.T, grads


def moe_feed_forward(x, experts, gates, layer):
    """``x + sum_{i in S} w_i FF_i(x)`` with 2-layer tanh MLP experts."""
    out, _ = _ff_forward(x, experts, gates, layer)
    return out


def _ff_forward(x, experts, gates, layer):
    _check_dims(x, experts[0][f"{layer}.W1"].shape[0], f"{layer} input")
    out = x
    caches = []
    for i, w in zip(gates.selected, gates.weights):
        e = experts[i]
        f, c = _mlp_forward(x, e[f"{layer}.W1"], e[f"{layer}.b1"], e[f"{layer}.W2"], e[f"{layer}.b2"])
        out = out + w * f
        caches.append((i, w, c))
    return out, caches


def _ff_backward(dout, caches):
    dx = dout
    per_expert = {}
    for i, w, c in caches:
        dxi, g = _mlp_backward(w * dout, c)
        dx = dx + dxi
        per_expert[i] = g
    return dx, per_expert


# ---------------------------------------------------------------------------
# full network


@dataclass
class MidLatent:
    pre: np.ndarray
    post: np.ndarray


@dataclass
class ForwardResult:
    eps: np.ndarray  # (B, C, H, W) or (M, B, C, H, W) in separate_first mode
    mid: MidLatent  # (B, tokens, d_mid) or with leading M axis
    cache: dict | None = None


def _as_batch(z):
    z = np.asarray(z, dtype=np.float64)
    return z[None] if z.ndim == 3 else z


def _as_ctx(ctx, mask, batch):
    ctx = np.asarray(ctx, dtype=np.float64)
    if ctx.ndim == 2:
        ctx = np.broadcast_to(ctx, (batch,) + ctx.shape)
    if mask is None:
        mask = np.ones(ctx.shape[:2], dtype=bool)
    elif mask.ndim == 1:
        mask = np.broadcast_to(mask, (batch,) + mask.shape)
    return ctx, mask


def forward(weights: UNetWeights, z, t, ctx, gates: GateWeights, mask=None,
            mode: str = "aggregate", keep_cache: bool = False) -> ForwardResult:
    """Noise prediction for a batch of latents.

    ``z`` is ``(C, H, W)`` or ``(B, C, H, W)``; ``t`` is an int or ``(B,)``
    array of timesteps in ``1..T``; ``ctx`` is ``(L, d_txt)`` or
    ``(B, L, d_txt)`` token embeddings with optional boolean ``mask``.
    ``separate_first`` runs the separation layer in separate mode and carries
    ``M`` paths (leading axis of the outputs) through the aggregate layers.
    """
    geom = weights.geometry
    bb, ex = weights.backbone, weights.experts
    z = _as_batch(z)
    b = z.shape[0]
    if z.shape[1:] != geom.latent_shape:
        raise ValueError(f"latent has shape {z.shape[1:]}, expected {geom.latent_shape}")
    ctx, mask = _as_ctx(ctx, mask, b)
    t = np.broadcast_to(np.asarray(t, dtype=np.int64), (b,))
    if np.any(t < 1) or np.any(t > geom.T):
        raise ValueError(f"timestep outside 1..{geom.T}")
    if max(gates.selected) >= len(ex):
        raise ValueError("gate selects an expert the weights do not carry")
    cache = {} if keep_cache else None

    p = patchify(z)
    h0 = p @ bb["W_in"] + bb["b_in"] + bb["pos"] + bb["temb"][t - 1][:, None, :]
    if mode == "separate_first":
        if keep_cache:
            raise ValueError("separate_first mode is inference-only")
        h1 = moe_cross_attention(h0, ctx, mask, ex, gates, "down_ca", mode="separate")
        m = h1.shape[0]
        h1 = h1.reshape((m * b,) + h1.shape[2:])
        ctx = np.broadcast_to(ctx, (m,) + ctx.shape).reshape((m * b,) + ctx.shape[1:])
        mask = np.broadcast_to(mask, (m,) + mask.shape).reshape((m * b,) + mask.shape[1:])
    elif mode == "aggregate":
        m = None
        h1, c = _ca_forward(h0, ctx, mask, _mix(ex, gates, "down_ca.Wq"),
                            _mix(ex, gates, "down_ca.Wk"), _mix(ex, gates, "down_ca.Wv"))
        if keep_cache:
            cache["down_ca"] = c
    else:
        raise ValueError(f"unknown mode {mode!r}")

    h2, c = _ff_forward(h1, ex, gates, "down_ff")
    if keep_cache:
        cache["down_ff"] = c
    g = merge_tokens(h2)
    m_pre = g @ bb["W_dm"] + bb["b_dm"]
    m1, c = _ca_forward(m_pre, ctx, mask, _mix(ex, gates, "mid_ca.Wq"),
                        _mix(ex, gates, "mid_ca.Wk"), _mix(ex, gates, "mid_ca.Wv"))
    if keep_cache:
        cache["mid_ca"] = c
    f, c = _mlp_forward(m1, bb["mid_W1"], bb["mid_b1"], bb["mid_W2"], bb["mid_b2"])
    m_post = m1 + f
    if keep_cache:
        cache["mid_mlp"] = c
    u0 = split_tokens(m_post @ bb["W_ue"] + bb["b_ue"]) + h2
    u1, c = _ca_forward(u0, ctx, mask, _mix(ex, gates, "up_ca.Wq"),
                        _mix(ex, gates, "up_ca.Wk"), _mix(ex, gates, "up_ca.Wv"))
    if keep_cache:
        cache["up_ca"] = c
    u2, c = _ff_forward(u1, ex, gates, "up_ff")
    if keep_cache:
        cache["up_ff"] = c
    out = unpatchify(u2 @ bb["W_out"] + bb["b_out"], geom.channels, geom.size)
    gain = bb["out_gain"][t - 1][:, None, None, None]
    skip = bb["skip_gain"][t - 1][:, None, None, None]
    eps = check_finite(skip * z + gain * out, "eps prediction")

    if keep_cache:
        cache.update(z=z, out=out, p=p, t=t, g=g, m_post=m_post, u2=u2, gates=gates)
    if m is not None:
        eps = eps.reshape((m, b) + eps.shape[1:])
        m_pre = m_pre.reshape((m, b) + m_pre.shape[1:])
        m_post = m_post.reshape((m, b) + m_post.shape[1:])
    return ForwardResult(eps, MidLatent(m_pre, m_post), cache)


def backward(weights: UNetWeights, cache: dict, d_eps: np.ndarray):
    """Gradients of a scalar loss given ``d_eps = dLoss/d(eps_pred)``.

    Returns ``(backbone_grads, expert_grads)`` where ``expert_grads`` maps the
    index of every selected expert to its gradient dict.
    """
    bb, ex = weights.backbone, weights.experts
    gates = cache["gates"]
    gb: dict[str, np.ndarray] = {}
    ge: dict[int, dict[str, np.ndarray]] = {i: {} for i in gates.selected}

    def add_ca(layer, grads):
        for i, w in zip(gates.selected, gates.weights):
            for k, g in grads.items():
                ge[i][f"{layer}.{k}"] = w * g

    def add_ff(layer, per_expert):
        for i, grads in per_expert.items():
            for k, g in grads.items():
                ge[i][f"{layer}.{k}"] = g

    t = cache["t"]
    gb["skip_gain"] = np.zeros_like(bb["skip_gain"])
    np.add.at(gb["skip_gain"], t - 1, np.sum(d_eps * cache["z"], axis=(1, 2, 3)))
    gb["out_gain"] = np.zeros_like(bb["out_gain"])
    np.add.at(gb["out_gain"], t - 1, np.sum(d_eps * cache["out"], axis=(1, 2, 3)))
    dout = patchify(d_eps * bb["out_gain"][t - 1][:, None, None, None])
    gb["W_out"] = _flat(cache["u2"]).T @ _flat(dout)
    gb["b_out"] = _flat(dout).sum(axis=0)
    du2 = dout @ bb["W_out"].T
    du1, g = _ff_backward(du2, cache["up_ff"])
    add_ff("up_ff", g)
    du0, g = _ca_backward(du1, cache["up_ca"])
    add_ca("up_ca", g)
    dh2 = du0.copy()
    dup = merge_tokens(du0)
    gb["W_ue"] = _flat(cache["m_post"]).T @ _flat(dup)
    gb["b_ue"] = _flat(dup).sum(axis=0)
    dm_post = dup @ bb["W_ue"].T
    dm1, g = _mlp_backward(dm_post, cache["mid_mlp"])
    dm1 = dm1 + dm_post
    gb.update({f"mid_{k}": v for k, v in g.items()})
    dm_pre, g = _ca_backward(dm1, cache["mid_ca"])
    add_ca("mid_ca", g)
    gb["W_dm"] = _flat(cache["g"]).T @ _flat(dm_pre)
    gb["b_dm"] = _flat(dm_pre).sum(axis=0)
    dh2 = dh2 + split_tokens(dm_pre @ bb["W_dm"].T)
    dh1, g = _ff_backward(dh2, cache["down_ff"])
    add_ff("down_ff", g)
    dh0, g = _ca_backward(dh1, cache["down_ca"])
    add_ca("down_ca", g)
    gb["W_in"] = _flat(cache["p"]).T @ _flat(dh0)
    gb["b_in"] = _flat(dh0).sum(axis=0)
    gb["pos"] = dh0.sum(axis=0)
    temb = np.zeros_like(bb["temb"])
    np.add.at(temb, cache["t"] - 1, dh0.sum(axis=1))
    gb["temb"] = temb
    return gb, ge
