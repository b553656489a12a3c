"""Synthetic prompt grammar and its ground-truth latent generator.

Prompts follow ``a {color} {shape} {modifier...}`` over a fixed 20-word
vocabulary. The color picks a direction across the two latent channels, the
shape picks where a Gaussian bump sits on the 8x8 grid and the modifiers
rescale or shift it. Training latents are the bump plus small i.i.d. noise,
so every prompt has an exact mean latent to score generations against.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import RngStream
from .text import Prompt, words

LATENT_SHAPE = (2, 8, 8)

COLORS = {
    "red": (1.0, 0.0),
    "blue": (0.0, 1.0),
    "green": (0.7071067811865476, -0.7071067811865476),
    "yellow": (0.7071067811865476, 0.7071067811865476),
}
SHAPES = {
    "circle": (2.0, 2.0),
    "square": (2.0, 5.0),
    "triangle": (5.0, 2.0),
    "star": (5.0, 5.0),
    "ring": (3.5, 3.5),
}
MODIFIERS = ("big", "small", "bright", "dark", "left", "right", "up", "down", "wide", "tall")
VOCABULARY = ("a",) + tuple(COLORS) + tuple(SHAPES) + MODIFIERS

# words never seen in training, grouped by the slot they can replace
UNSEEN_WORDS = {
    "color": ("crimson", "teal", "violet", "amber"),
    "shape": ("hexagon", "oval", "cross", "heart"),
    "modifier": ("huge", "tiny", "faint", "vivid", "fuzzy", "glossy"),
}

BASE_SIGMA = 1.2
BASE_AMPLITUDE = 2.0
NOISE_STD = 0.1


@dataclass(frozen=True)
class Semantics:
    color: str
    shape: str
    modifiers: tuple[str, ...] = ()

    def text(self) -> str:
        return " ".join(("a", self.color, self.shape) + self.modifiers)


def parse(text: str | Prompt) -> Semantics:
    """Recover the semantics of an in-vocabulary prompt text."""
    if isinstance(text, Prompt):
        text = text.text
    toks = words(text)
    colors = [w for w in toks if w in COLORS]
    shapes = [w for w in toks if w in SHAPES]
    mods = tuple(w for w in toks if w in MODIFIERS)
    unknown = [w for w in toks if w not in VOCABULARY]
    if unknown or len(colors) != 1 or len(shapes) != 1:
        raise ValueError(f"prompt {text!r} is not parseable by the grammar")
    return Semantics(colors[0], shapes[0], mods)


def mean_latent(sem: Semantics) -> np.ndarray:
    """Noise-free latent for the given semantics, shape ``LATENT_SHAPE``."""
    cy, cx = SHAPES[sem.shape]
    sy = sx = BASE_SIGMA
    amp = BASE_AMPLITUDE
    for m in sem.modifiers:
        if m == "big":
            sy, sx = sy * 1.5, sx * 1.5
        elif m == "small":
            sy, sx = sy / 1.5, sx / 1.5
        elif m == "bright":
            amp *= 1.5
        elif m == "dark":
            amp *= 0.5
        elif m == "left":
            cx -= 1.5
        elif m == "right":
            cx += 1.5
        elif m == "up":
            cy -= 1.5
        elif m == "down":
            cy += 1.5
        elif m == "wide":
            sx *= 1.5
        elif m == "tall":
            sy *= 1.5
    _, h, w = LATENT_SHAPE
    rows = np.arange(h, dtype=np.float64)[:, None]
    cols = np.arange(w, dtype=np.float64)[None, :]
    bump = np.exp(-((rows - cy) ** 2) / (2 * sy**2) - ((cols - cx) ** 2) / (2 * sx**2))
    color = np.asarray(COLORS[sem.color])
    return amp * color[:, None, None] * bump[None, :, :]


def sample_semantics(stream: RngStream, n: int, favored_color: str | None = None,
                     max_modifiers: int = 3) -> list[Semantics]:
    """Draw ``n`` random grammar instances.

    With ``favored_color`` set, that color is drawn with probability 0.4
    instead of 0.25.
    """
    colors = list(COLORS)
    if favored_color is None:
        pc = np.full(len(colors), 1.0 / len(colors))
    else:
        pc = np.full(len(colors), 0.6 / (len(colors) - 1))
        pc[colors.index(favored_color)] = 0.4
    u = stream.uniform((n, 3))
    perm_keys = stream.uniform((n, len(MODIFIERS)))
    out = []
    shapes = list(SHAPES)
    for i in range(n):
        c = colors[min(int(np.searchsorted(np.cumsum(pc), u[i, 0], side="right")), len(colors) - 1)]
        s = shapes[min(int(u[i, 1] * len(shapes)), len(shapes) - 1)]
        k = min(int(u[i, 2] * (max_modifiers + 1)), max_modifiers)
        order = np.argsort(perm_keys[i], kind="stable")
        mods = tuple(MODIFIERS[j] for j in sorted(order[:k]))
        out.append(Semantics(c, s, mods))
    return out


def sample_latents(stream: RngStream, sems: list[Semantics]) -> np.ndarray:
    """Training latents ``mean + NOISE_STD * N(0, I)``, shape ``(n, 2, 8, 8)``."""
    means = np.stack([mean_latent(s) for s in sems])
    return means + NOISE_STD * stream.normal(means.shape)


@dataclass
class DataSlice:
    """Prompt/latent pairs one expert (or the backbone) trains on."""

    prompts: list[Prompt]
    latents: np.ndarray
    slice_id: int = 0

    def __len__(self):
        return len(self.prompts)


def make_slice(root_seed: int, slice_id: int, size: int, favored_color: str | None = None) -> DataSlice:
    """Disjoint slices come from disjoint RNG streams of the same root seed."""
    if size < 1:
        raise ValueError("data slice must be nonempty")
    stream = RngStream(root_seed, 0x5A1CE000 + slice_id)
    sems = sample_semantics(stream, size, favored_color)
    return DataSlice([Prompt(s.text()) for s in sems], sample_latents(stream, sems), slice_id)
