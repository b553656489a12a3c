"""Noise schedule, forward corruption, DDIM reverse step and L_LDM training."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .core import RngStream, check_finite
from .synthetic import DataSlice
from .text import encode
from . import unet

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas)

    def alpha_bar(self, t: int) -> float:
        """``alpha_bar_t`` with the convention ``alpha_bar_0 = 1``."""
        if t == 0:
            return 1.0
        return float(self.alpha_bars[t - 1])


def build_schedule(T: int, beta_min: float, beta_max: float) -> NoiseSchedule:
    if T < 2:
        raise ValueError("schedule needs T >= 2")
    if not 0.0 < beta_min < beta_max < 1.0:
        raise ValueError("need 0 < beta_min < beta_max < 1")
    betas = np.linspace(beta_min, beta_max, T)
    return NoiseSchedule(betas, np.cumprod(1.0 - betas))


def schedule_from_betas(betas) -> NoiseSchedule:
    """Schedule from an explicit beta sequence (must be strictly increasing)."""
    betas = np.asarray(betas, dtype=np.float64)
    if len(betas) < 1 or np.any(betas <= 0) or np.any(betas >= 1) or np.any(np.diff(betas) <= 0):
        raise ValueError("betas must be strictly increasing inside (0, 1)")
    return NoiseSchedule(betas, np.cumprod(1.0 - betas))


@dataclass(frozen=True)
class LatentState:
    z: np.ndarray
    t: int


def forward_step(state: LatentState, schedule: NoiseSchedule, stream: RngStream) -> LatentState:
    """Sample ``z_t ~ N(sqrt(1 - beta_t) z_{t-1}, beta_t I)``."""
    if state.t >= schedule.T:
        raise ValueError("chain exhausted")
    beta = schedule.betas[state.t]
    noise = stream.normal(state.z.shape)
    return LatentState(np.sqrt(1.0 - beta) * state.z + np.sqrt(beta) * noise, state.t + 1)


def forward_marginal(z0: LatentState, t: int, schedule: NoiseSchedule,
                     stream: RngStream) -> tuple[LatentState, np.ndarray]:
    """Closed-form ``z_t = sqrt(ab_t) z_0 + sqrt(1 - ab_t) eps``; returns ``(z_t, eps)``."""
    if not 1 <= t <= schedule.T:
        raise ValueError(f"t={t} outside 1..{schedule.T}")
    eps = stream.normal(z0.z.shape)
    ab = schedule.alpha_bar(t)
    return LatentState(np.sqrt(ab) * z0.z + np.sqrt(1.0 - ab) * eps, t), eps


def ddim_step(state: LatentState, eps_pred: np.ndarray, schedule: NoiseSchedule) -> LatentState:
    """Deterministic DDIM update from ``t`` to ``t - 1`` (eta = 0)."""
    if state.t < 1:
        raise ValueError("cannot take a DDIM step from t=0")
    if eps_pred.shape != state.z.shape:
        raise ValueError(f"eps_pred shape {eps_pred.shape} does not match latent shape {state.z.shape}")
    ab_t = schedule.alpha_bar(state.t)
    ab_prev = schedule.alpha_bar(state.t - 1)
    z0_hat = (state.z - np.sqrt(1.0 - ab_t) * eps_pred) / np.sqrt(ab_t)
    z_prev = np.sqrt(ab_prev) * z0_hat + np.sqrt(1.0 - ab_prev) * eps_pred
    return LatentState(check_finite(z_prev, "DDIM output"), state.t - 1)


def ldm_loss(eps: np.ndarray, eps_pred: np.ndarray) -> float:
    """Mean squared error over all elements."""
    if eps.shape != eps_pred.shape:
        raise ValueError(f"shape mismatch: {eps.shape} vs {eps_pred.shape}")
    return float(np.mean((eps - eps_pred) ** 2))


def ldm_loss_grad(eps: np.ndarray, eps_pred: np.ndarray) -> np.ndarray:
    """Gradient of :func:`ldm_loss` with respect to ``eps_pred``."""
    return 2.0 * (eps_pred - eps) / eps.size


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainingConfig:
    epochs: int = 40
    batch_size: int = 32
    learning_rate: float = 0.003
    seed: int = 0
    data_slice_id: int = 0
    optimizer: str = "adam"  # or "sgd"

    def __post_init__(self):
        if self.learning_rate < 0 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("need learning_rate >= 0, epochs >= 1 and batch_size >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


class _Optimizer:
    """Plain SGD or Adam (beta1=0.9, beta2=0.999) over named arrays, in place."""

    def __init__(self, kind: str, lr: float):
        self.kind, self.lr, self.step = kind, lr, 0
        self.m: dict = {}
        self.v: dict = {}

    def begin(self):
        self.step += 1

    def update(self, key, param: np.ndarray, grad: np.ndarray):
        if self.kind == "sgd":
            param -= self.lr * grad
            return
        m = self.m.get(key)
        if m is None:
            m = self.m[key] = np.zeros_like(param)
            self.v[key] = np.zeros_like(param)
        v = self.v[key]
        m *= 0.9
        m += 0.1 * grad
        v *= 0.999
        v += 0.001 * grad * grad
        m_hat = m / (1.0 - 0.9**self.step)
        v_hat = v / (1.0 - 0.999**self.step)
        param -= self.lr * m_hat / (np.sqrt(v_hat) + 1e-8)


@dataclass
class TrainingLog:
    epoch_losses: list[float] = field(default_factory=list)
    initial_eval: float = float("nan")
    final_eval: float = float("nan")
    steps: int = 0


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int):
        super().__init__(f"training diverged (non-finite loss) in epoch {epoch}")
        self.epoch = epoch


def encode_batch(prompts, d_txt: int) -> tuple[np.ndarray, np.ndarray]:
    """Padded ``(N, L_max, d_txt)`` token embeddings and the key mask."""
    embs = [encode(p, d_txt).tokens for p in prompts]
    lmax = max(len(e) for e in embs)
    ctx = np.zeros((len(embs), lmax, d_txt))
    mask = np.zeros((len(embs), lmax), dtype=bool)
    for i, e in enumerate(embs):
        ctx[i, : len(e)] = e
        mask[i, : len(e)] = True
    return ctx, mask


def _eval_loss(model, gates, schedule, x0, ctx, mask, seed) -> float:
    stream = RngStream(seed, 0xE7A1)
    n = min(len(x0), 256)
    t = stream.uniform_ints(schedule.T, n) + 1
    eps = stream.normal((n,) + x0.shape[1:])
    ab = schedule.alpha_bars[t - 1][:, None, None, None]
    zt = np.sqrt(ab) * x0[:n] + np.sqrt(1 - ab) * eps
    pred = unet.forward(model, zt, t, ctx[:n], gates, mask[:n]).eps
    return ldm_loss(eps, pred)


def train_expert(config: TrainingConfig, data: DataSlice, model: unet.UNetWeights,
                 schedule: NoiseSchedule, trainable: str = "all",
                 gates: unet.GateWeights | None = None) -> TrainingLog:
    """Minibatch gradient descent on L_LDM with ``t ~ U{1..T}``; updates ``model`` in place.

    ``trainable`` is ``"all"`` (backbone and selected experts) or
    ``"experts"`` (backbone frozen).
    """
    if len(data) == 0:
        raise ValueError("data slice must be nonempty")
    if trainable not in ("all", "experts"):
        raise ValueError(f"unknown trainable group {trainable!r}")
    if gates is None:
        gates = unet.GateWeights.uniform(model.M)
    geom = model.geometry
    ctx, mask = encode_batch(data.prompts, geom.d_txt)
    x0 = data.latents
    n = len(x0)
    stream = RngStream(config.seed, 0x7A10 + config.data_slice_id)
    opt = _Optimizer(config.optimizer, config.learning_rate)
    tlog = TrainingLog(initial_eval=_eval_loss(model, gates, schedule, x0, ctx, mask, config.seed))
    for epoch in range(config.epochs):
        order = stream.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            b = len(idx)
            t = stream.uniform_ints(schedule.T, b) + 1
            eps = stream.normal((b,) + x0.shape[1:])
            ab = schedule.alpha_bars[t - 1][:, None, None, None]
            zt = np.sqrt(ab) * x0[idx] + np.sqrt(1 - ab) * eps
            try:
                with np.errstate(over="raise", invalid="raise"):
                    res = unet.forward(model, zt, t, ctx[idx], gates, mask[idx], keep_cache=True)
                    loss = ldm_loss(eps, res.eps)
            except FloatingPointError:
                raise TrainingDiverged(epoch) from None
            if not np.isfinite(loss):
                raise TrainingDiverged(epoch)
            total += loss * b
            gb, ge = unet.backward(model, res.cache, ldm_loss_grad(eps, res.eps))
            opt.begin()
            if trainable == "all":
                for k, g in gb.items():
                    opt.update(("backbone", k), model.backbone[k], g)
            for i, grads in ge.items():
                for k, g in grads.items():
                    opt.update((i, k), model.experts[i][k], g)
            tlog.steps += 1
        tlog.epoch_losses.append(total / n)
        if not np.isfinite(tlog.epoch_losses[-1]):
            raise TrainingDiverged(epoch)
    tlog.final_eval = _eval_loss(model, gates, schedule, x0, ctx, mask, config.seed)
    log.debug("slice %d: eval loss %.4f -> %.4f", data.slice_id, tlog.initial_eval, tlog.final_eval)
    return tlog
