"""Expert separation, epistemic-uncertainty estimation and rollouts.

The estimator is the mean over latent dimensions of the population variance
across experts, measured on the mid-block output of the first denoising
step. Reported values are scaled by ``sqrt(d)`` with ``d`` the size of the
latent space the variance was taken in.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import RngStream, ensemble_mean_var, stable_hash64
from .diffusion import LatentState, NoiseSchedule, ddim_step
from .text import ExpertDescriptor, Prompt, encode
from . import unet

SPACES = ("mid_post", "mid_pre", "z_next")


@dataclass(frozen=True)
class UncertaintyEstimate:
    eu: float
    reported: float
    space: str
    d_mid: int


@dataclass
class EmoeResult:
    estimate: UncertaintyEstimate
    latents: list[np.ndarray] | None = None
    per_path_eps: np.ndarray | None = None


@dataclass
class SeparationPass:
    """Everything one ``separate_first`` forward pass yields for a prompt."""

    z: LatentState
    eps: np.ndarray  # (M, C, H, W)
    mid_pre: np.ndarray  # (M, tokens, d_mid)
    mid_post: np.ndarray
    z_next: np.ndarray  # (M, C, H, W) after one DDIM step per path

    def members(self, space: str) -> np.ndarray:
        if space == "mid_post":
            return self.mid_post
        if space == "mid_pre":
            return self.mid_pre
        if space == "z_next":
            return self.z_next
        raise ValueError(f"unknown latent space {space!r}; expected one of {SPACES}")


def epistemic_uncertainty(members: Sequence[np.ndarray], space: str = "mid_post") -> UncertaintyEstimate:
    """Estimator from explicit per-expert latents (one array per expert)."""
    if len(members) == 0:
        raise ValueError("need at least one expert")
    _, var = ensemble_mean_var(list(members))
    eu = float(np.mean(var))
    d = int(var.size)
    return UncertaintyEstimate(eu, float(np.sqrt(d) * eu), space, d)


def decode(state: LatentState) -> np.ndarray:
    """Identity codec: the synthetic task lives directly in latent space."""
    if state.t != 0:
        raise ValueError(f"decode needs a fully denoised latent (t=0), got t={state.t}")
    return state.z


def encode_image(x: np.ndarray) -> LatentState:
    return LatentState(np.asarray(x, dtype=np.float64), 0)


@dataclass
class ExpertBundle:
    weights: unet.UNetWeights
    descriptors: list[ExpertDescriptor]
    top_n: int

    def __post_init__(self):
        if self.weights.M == 0:
            raise ValueError("bundle carries no experts")
        if len(self.descriptors) != self.weights.M:
            raise ValueError("need one descriptor per expert")
        if not 1 <= self.top_n <= self.weights.M:
            raise ValueError("top_n must be in 1..M")

    @property
    def M(self) -> int:
        return self.weights.M

    def subset(self, indices: Sequence[int]) -> "ExpertBundle":
        indices = list(indices)
        return ExpertBundle(self.weights.subset(indices), [self.descriptors[i] for i in indices],
                            min(self.top_n, len(indices)))


@dataclass
class EMoE:
    bundle: ExpertBundle | None
    schedule: NoiseSchedule
    forward_calls: int = field(default=0, init=False)

    def _require(self) -> ExpertBundle:
        if self.bundle is None:
            raise RuntimeError("no expert bundle loaded")
        return self.bundle

    @property
    def geometry(self) -> unet.Geometry:
        return self._require().weights.geometry

    def gates(self, prompt: Prompt) -> unet.GateWeights:
        b = self._require()
        return unet.compute_gate_weights(prompt, b.descriptors, b.top_n, self.geometry.d_txt)

    def initial_noise(self, prompt: Prompt, seed: int) -> LatentState:
        stream = RngStream(seed, stable_hash64("prompt", prompt.text))
        return LatentState(stream.normal(self.geometry.latent_shape), self.schedule.T)

    def _forward(self, z, t, ctx, gates, mode):
        self.forward_calls += 1
        return unet.forward(self._require().weights, z, t, ctx, gates, mode=mode)

    def separate(self, prompt: Prompt, seed: int, state: LatentState | None = None) -> SeparationPass:
        """One ``separate_first`` pass at ``state`` (default: fresh ``z_T``)."""
        if state is None:
            state = self.initial_noise(prompt, seed)
        ctx = encode(prompt, self.geometry.d_txt).tokens
        res = self._forward(state.z, state.t, ctx, self.gates(prompt), "separate_first")
        eps = res.eps[:, 0]
        z_next = np.stack([ddim_step(state, e, self.schedule).z for e in eps])
        return SeparationPass(state, eps, res.mid.pre[:, 0], res.mid.post[:, 0], z_next)

    def estimate_uncertainty(self, prompt: Prompt, seed: int, space: str = "mid_post") -> UncertaintyEstimate:
        return epistemic_uncertainty(self.separate(prompt, seed).members(space), space)

    def estimate_all_spaces(self, prompt: Prompt, seed: int) -> dict[str, UncertaintyEstimate]:
        sep = self.separate(prompt, seed)
        return {s: epistemic_uncertainty(sep.members(s), s) for s in SPACES}

    def _aggregate_chain(self, state, ctx, gates, stop: int = 0) -> LatentState:
        while state.t > stop:
            eps = self._forward(state.z, state.t, ctx, gates, "aggregate").eps[0]
            state = ddim_step(state, eps, self.schedule)
        return state

    def sample(self, prompt: Prompt, seed: int) -> np.ndarray:
        """Plain aggregate MoE DDIM sampler (no separation)."""
        ctx = encode(prompt, self.geometry.d_txt).tokens
        return self._aggregate_chain(self.initial_noise(prompt, seed), ctx, self.gates(prompt)).z

    def emoe_rollout(self, prompt: Prompt, seed: int, steps: int | None = None) -> EmoeResult:
        """Separate at ``t = T``, then denoise each of the M paths in aggregate mode."""
        if steps is not None and steps != self.schedule.T:
            raise ValueError(f"rollout runs exactly T={self.schedule.T} steps, got {steps}")
        sep = self.separate(prompt, seed)
        est = epistemic_uncertainty(sep.mid_post, "mid_post")
        z = self.continue_paths(prompt, sep.z_next, sep.z.t - 1)
        return EmoeResult(est, [zi for zi in z], sep.eps)

    def continue_paths(self, prompt: Prompt, paths: np.ndarray, t: int) -> np.ndarray:
        """Denoise a stack of per-path latents from step ``t`` to 0 in aggregate mode.

        Paths are batched through the network but never interact.
        """
        ctx = encode(prompt, self.geometry.d_txt).tokens
        gates = self.gates(prompt)
        z = np.asarray(paths, dtype=np.float64)
        while t > 0:
            eps = self._forward(z, t, ctx, gates, "aggregate").eps
            z = np.stack([ddim_step(LatentState(zi, t), ei, self.schedule).z for zi, ei in zip(z, eps)])
            t -= 1
        return z

    def fast_emoe(self, prompt: Prompt, seed: int, threshold: float | None = None,
                  space: str = "mid_post") -> tuple[UncertaintyEstimate, np.ndarray | None]:
        """EU from the first step; halt if ``reported >= threshold``, else one aggregate rollout."""
        est = self.estimate_uncertainty(prompt, seed, space)
        if threshold is not None and est.reported >= threshold:
            return est, None
        return est, self.sample(prompt, seed)

    def uncertainty_series(self, prompt: Prompt, seed: int, space: str = "mid_post") -> list[UncertaintyEstimate]:
        """EU with separation re-run at every step ``t = T..1`` of one aggregate trajectory."""
        ctx = encode(prompt, self.geometry.d_txt).tokens
        gates = self.gates(prompt)
        state = self.initial_noise(prompt, seed)
        out = []
        while state.t > 0:
            out.append(epistemic_uncertainty(self.separate(prompt, seed, state).members(space), space))
            state = self._aggregate_chain(state, ctx, gates, stop=state.t - 1)
        return out
