"""Run configuration: one flat JSON document, every field defaulted."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

from .core import stable_hash64
from .diffusion import NoiseSchedule, build_schedule
from .unet import Geometry


@dataclass(frozen=True)
class RunConfig:
    # model geometry
    channels: int = 2
    size: int = 8
    d_model: int = 8
    d_mid: int = 8
    d_txt: int = 32
    d_ff: int = 16
    M: int = 4
    top_n: int = 2
    # schedule
    T: int = 25
    beta_min: float = 1e-4
    beta_max: float = 0.4
    # training
    slice_size: int = 1000
    backbone_epochs: int = 60
    expert_epochs: int = 120
    batch_size: int = 32
    learning_rate: float = 0.003
    optimizer: str = "adam"
    expert_init_scale: float = 2.0
    similar_init_scale: float = 0.5
    # corpus
    n_in_dist: int = 200
    n_ood_remap: int = 200
    n_ood_unseen: int = 200
    max_unseen: int = 3
    # scoring / ablations
    space: str = "mid_post"
    step_series_prompts: int = 8
    seed: int = 0
    checkpoint_dir: str = "checkpoints"
    out_dir: str = "reports"
    threads: int = 1

    def __post_init__(self):
        if self.M < 1 or not 1 <= self.top_n <= self.M:
            raise ValueError("need M >= 1 and 1 <= top_n <= M")
        if self.T < 2:
            raise ValueError("T must be >= 2")
        if min(self.channels, self.size, self.d_model, self.d_mid, self.d_txt, self.d_ff) < 1:
            raise ValueError("all dimensions must be >= 1")
        if min(self.slice_size, self.backbone_epochs, self.expert_epochs, self.batch_size, self.threads) < 1:
            raise ValueError("sizes, epochs and thread counts must be >= 1")
        if min(self.n_in_dist, self.n_ood_remap, self.n_ood_unseen) < 0:
            raise ValueError("corpus split sizes must be >= 0")
        if self.space not in ("mid_post", "mid_pre", "z_next"):
            raise ValueError(f"unknown latent space {self.space!r}")
        self.geometry()  # geometry-level validation
        build_schedule(self.T, self.beta_min, self.beta_max)

    def geometry(self) -> Geometry:
        return Geometry(self.channels, self.size, self.d_model, self.d_mid, self.d_txt, self.d_ff, self.T)

    def schedule(self) -> NoiseSchedule:
        return build_schedule(self.T, self.beta_min, self.beta_max)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def config_hash(self) -> str:
        """Hash of everything that affects results (paths and threads excluded)."""
        d = self.to_dict()
        for k in ("checkpoint_dir", "out_dir", "threads"):
            d.pop(k)
        return f"{stable_hash64(json.dumps(d, sort_keys=True)):016x}"

    def replace(self, **overrides) -> "RunConfig":
        return dataclasses.replace(self, **overrides)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name: f for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - set(known))
        if unknown:
            raise ValueError(f"unknown config field(s): {', '.join(unknown)}")
        return cls(**{k: _coerce(known[k], v) for k, v in data.items()})

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def with_overrides(self, pairs: list[str]) -> "RunConfig":
        """Apply ``key=value`` strings (values parsed as JSON, falling back to text)."""
        updates = {}
        for pair in pairs:
            key, sep, raw = pair.partition("=")
            if not sep:
                raise ValueError(f"override {pair!r} is not of the form key=value")
            try:
                updates[key.strip()] = json.loads(raw)
            except json.JSONDecodeError:
                updates[key.strip()] = raw
        return RunConfig.from_dict({**self.to_dict(), **updates})


def _coerce(f: dataclasses.Field, value):
    kind = f.type if isinstance(f.type, str) else f.type.__name__
    if kind == "int":
        if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
            raise ValueError(f"{f.name} must be an integer")
        return int(value)
    if kind == "float":
        return float(value)
    return value
