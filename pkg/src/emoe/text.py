"""Deterministic hash-seeded text encoder.

Token embeddings are unit-norm Gaussian vectors seeded by a 64-bit hash of
the token, so an embedding is a pure function of ``(text, language_tag)``.
The ``xx-remap`` language tag XORs every id with a fixed constant, which
gives a vocabulary that shares no ids (and no embeddings) with English.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .core import RngStream, stable_hash64

D_TXT = 32
MAX_TOKENS = 32
REMAP_XOR = 0x9E3779B97F4A7C15
REMAP_TAGS = ("xx-remap",)
EMPTY_TOKEN_ID = stable_hash64("tok", "<empty>")
_EMBED_STREAM = 0x7E47
_WORD = re.compile(r"[^\W_]+", re.UNICODE)


@dataclass(frozen=True)
class Prompt:
    text: str
    language_tag: str = "en"
    negative: str | None = None

    def __post_init__(self):
        if not self.text.strip():
            raise ValueError("prompt text is empty")


@dataclass(frozen=True)
class PromptEmbedding:
    tokens: np.ndarray  # (L, d_txt)
    pooled: np.ndarray  # (d_txt,)


@dataclass(frozen=True)
class ExpertDescriptor:
    positive: str
    negative: str

    def __post_init__(self):
        if not self.positive.strip() or not self.negative.strip():
            raise ValueError("expert descriptors need a positive and a negative text")


def words(text: str) -> list[str]:
    return _WORD.findall(text.lower())


def tokenize(prompt: Prompt | str, language_tag: str = "en") -> list[int]:
    if isinstance(prompt, Prompt):
        text, language_tag = prompt.text, prompt.language_tag
    else:
        text = prompt
    toks = words(text)
    if not toks:
        raise ValueError("cannot tokenize empty text")
    ids = [stable_hash64("tok", w) for w in toks[:MAX_TOKENS]]
    if language_tag in REMAP_TAGS:
        ids = [i ^ REMAP_XOR for i in ids]
    return ids


@lru_cache(maxsize=65536)
def _token_vector(token_id: int, d_txt: int) -> np.ndarray:
    v = RngStream(token_id, _EMBED_STREAM).normal((d_txt,))
    v = v / np.linalg.norm(v)
    v.setflags(write=False)
    return v


def embed(ids: list[int], d_txt: int = D_TXT) -> PromptEmbedding:
    if len(ids) == 0:
        raise ValueError("embed needs at least one token")
    tokens = np.stack([_token_vector(int(i), d_txt) for i in ids[:MAX_TOKENS]])
    return PromptEmbedding(tokens=tokens, pooled=tokens.mean(axis=0))


def encode(prompt: Prompt, d_txt: int = D_TXT) -> PromptEmbedding:
    return embed(tokenize(prompt), d_txt)


def encode_negative(prompt: Prompt, d_txt: int = D_TXT) -> PromptEmbedding:
    """Embedding of the negative prompt; the reserved empty token if absent."""
    if prompt.negative is None or not words(prompt.negative):
        return embed([EMPTY_TOKEN_ID], d_txt)
    return embed(tokenize(prompt.negative, prompt.language_tag), d_txt)


def gate_vector(descriptor: ExpertDescriptor, d_txt: int = D_TXT) -> np.ndarray:
    """``[pooled(positive); pooled(negative)]``, length ``2 * d_txt``."""
    pos = embed(tokenize(descriptor.positive), d_txt).pooled
    neg = embed(tokenize(descriptor.negative), d_txt).pooled
    return np.concatenate([pos, neg])


def prompt_gate_vector(prompt: Prompt, d_txt: int = D_TXT) -> np.ndarray:
    return np.concatenate([encode(prompt, d_txt).pooled, encode_negative(prompt, d_txt).pooled])
