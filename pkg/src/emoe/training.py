"""Bundle construction: shared backbone, then per-expert fine-tunes.

The backbone and a base set of conditioning weights are trained on the union
of all data slices. Each expert then starts from the base weights with a
random perturbation of its text-side key/value projections and is fine-tuned
on its own slice with the backbone frozen. Fine-tuning pins the projections
inside the span of the training vocabulary; directions outside that span get
no gradient, so experts keep disagreeing exactly where the training data gave
them nothing to agree on.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig
from .core import RngStream, stable_hash64
from .diffusion import TrainingConfig, TrainingLog, train_expert
from .engine import ExpertBundle
from .synthetic import COLORS, DataSlice, make_slice
from .text import ExpertDescriptor
from . import unet

log = logging.getLogger(__name__)

PERTURBED_KEYS = ("Wk", "Wv")
_COLORS = tuple(COLORS)


def expert_descriptor(i: int) -> ExpertDescriptor:
    """Expert ``i`` is good at its slice's favored color, weak at the opposite one."""
    return ExpertDescriptor(_COLORS[i % 4], _COLORS[(i + 2) % 4])


def expert_slices(cfg: RunConfig) -> list[DataSlice]:
    return [make_slice(cfg.seed, i, cfg.slice_size, _COLORS[i % 4]) for i in range(cfg.M)]


def union_slice(slices: list[DataSlice]) -> DataSlice:
    return DataSlice([p for s in slices for p in s.prompts],
                     np.concatenate([s.latents for s in slices]), slice_id=0xBB)


@dataclass
class BaseModel:
    """Trained backbone plus the single set of conditioning weights every expert starts from."""

    weights: unet.UNetWeights
    log: TrainingLog


@dataclass
class TrainedBundle:
    bundle: ExpertBundle
    backbone_log: TrainingLog
    expert_logs: list[TrainingLog] = field(default_factory=list)


def train_base(cfg: RunConfig, slices: list[DataSlice] | None = None) -> BaseModel:
    slices = expert_slices(cfg) if slices is None else slices
    weights = unet.UNetWeights.random(cfg.geometry(), 1, cfg.seed)
    tcfg = TrainingConfig(cfg.backbone_epochs, cfg.batch_size, cfg.learning_rate, cfg.seed,
                          data_slice_id=0xBB, optimizer=cfg.optimizer)
    tlog = train_expert(tcfg, union_slice(slices), weights, cfg.schedule())
    log.info("backbone: eval loss %.4f -> %.4f", tlog.initial_eval, tlog.final_eval)
    return BaseModel(weights, tlog)


def perturbed_expert(base: dict[str, np.ndarray], scale: float, stream: RngStream) -> dict[str, np.ndarray]:
    """Copy of ``base`` with ``scale * N(0, 1/fan_in)`` noise on every K/V projection."""
    out = {}
    for k in sorted(base):
        v = base[k]
        if k.rsplit(".", 1)[-1] in PERTURBED_KEYS:
            out[k] = v + scale * stream.normal(v.shape) / np.sqrt(v.shape[0])
        else:
            out[k] = v.copy()
    return out


def finetune_experts(cfg: RunConfig, base: BaseModel, init_scale: float,
                     slices: list[DataSlice] | None = None) -> TrainedBundle:
    """Derive and fine-tune ``cfg.M`` experts from ``base`` (which is left untouched)."""
    slices = expert_slices(cfg) if slices is None else slices
    backbone = base.weights.backbone
    experts, logs = [], []
    for i in range(cfg.M):
        stream = RngStream(cfg.seed, stable_hash64("expert-init", i))
        e = perturbed_expert(base.weights.experts[0], init_scale, stream)
        model = unet.UNetWeights(base.weights.geometry, backbone, [e])
        tcfg = TrainingConfig(cfg.expert_epochs, cfg.batch_size, cfg.learning_rate,
                              seed=stable_hash64("expert-seed", cfg.seed, i),
                              data_slice_id=i, optimizer=cfg.optimizer)
        tlog = train_expert(tcfg, slices[i], model, cfg.schedule(), trainable="experts")
        log.info("expert %d: eval loss %.4f -> %.4f", i, tlog.initial_eval, tlog.final_eval)
        experts.append(e)
        logs.append(tlog)
    weights = unet.UNetWeights(base.weights.geometry, backbone, experts)
    bundle = ExpertBundle(weights, [expert_descriptor(i) for i in range(cfg.M)], cfg.top_n)
    return TrainedBundle(bundle, base.log, logs)


def train_bundle(cfg: RunConfig, variant: str = "distinct", base: BaseModel | None = None) -> TrainedBundle:
    """Full pipeline for one bundle.

    ``distinct`` experts start from a large K/V perturbation of the base
    weights, ``similar`` ones from a small perturbation.
    """
    if variant == "distinct":
        scale = cfg.expert_init_scale
    elif variant == "similar":
        scale = cfg.similar_init_scale
    else:
        raise ValueError(f"unknown bundle variant {variant!r}")
    slices = expert_slices(cfg)
    if base is None:
        base = train_base(cfg, slices)
    return finetune_experts(cfg, base, scale, slices)
