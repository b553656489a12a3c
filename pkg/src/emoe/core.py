"""Numerical primitives shared by every other module.

Tensors are plain ``numpy.ndarray`` objects of dtype float64 in C (row-major)
order. Randomness comes from :class:`RngStream`, a counter-based stream built
on the Philox bijection so that any ``(root_seed, stream_id, counter)`` triple
maps to a fixed block of samples.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np

_MASK64 = (1 << 64) - 1


def stable_hash64(*parts: str | bytes | int) -> int:
    """64-bit hash that is identical across runs, processes and platforms."""
    h = hashlib.blake2b(digest_size=8)
    for part in parts:
        if isinstance(part, int):
            part = str(part)
        if isinstance(part, str):
            part = part.encode("utf-8")
        h.update(len(part).to_bytes(8, "little"))
        h.update(part)
    return int.from_bytes(h.digest(), "little")


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite values in {what}")
    return x


@dataclass
class RngStream:
    """Counter-based Gaussian stream.

    Each call to :meth:`normal` consumes one counter value; the samples for
    counter ``c`` live in their own Philox counter block, so the output of a
    call depends only on ``(root_seed, stream_id, c)``.
    """

    root_seed: int
    stream_id: int = 0
    counter: int = 0

    def _generator(self) -> np.random.Generator:
        key = [self.root_seed & _MASK64, self.stream_id & _MASK64]
        # call index occupies the top counter word; Philox walks the low word
        bitgen = np.random.Philox(key=key, counter=[0, 0, 0, self.counter & _MASK64])
        return np.random.Generator(bitgen)

    def normal(self, shape: Sequence[int]) -> np.ndarray:
        shape = tuple(int(s) for s in shape)
        if len(shape) == 0 or any(s < 1 for s in shape):
            raise ValueError("empty shape")
        out = self._generator().standard_normal(shape)
        self.counter += 1
        return out

    def uniform(self, shape: Sequence[int]) -> np.ndarray:
        out = self._generator().random(tuple(shape))
        self.counter += 1
        return out

    def uniform_ints(self, high: int, size: int) -> np.ndarray:
        """Integers in ``[0, high)``; consumes one counter value."""
        out = self._generator().integers(0, high, size=size)
        self.counter += 1
        return out

    def permutation(self, n: int) -> np.ndarray:
        out = self._generator().permutation(n)
        self.counter += 1
        return out

    def spawn(self, stream_id: int) -> "RngStream":
        """Fresh stream under the same root seed."""
        return RngStream(self.root_seed, stream_id, 0)


def gaussian(stream: RngStream, shape: Sequence[int]) -> np.ndarray:
    """Standard-normal tensor drawn from ``stream`` (advances its counter)."""
    return stream.normal(shape)


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    if logits.size == 0:
        raise ValueError("softmax of an empty vector")
    shifted = logits - np.max(logits, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def attention_weights(q: np.ndarray, k: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Row-stochastic ``softmax(q kᵀ / sqrt(d))``.

    Works on ``(L_q, d)`` / ``(L_k, d)`` pairs and on any leading batch axes.
    ``mask`` is boolean over the key axis (True = attend).
    """
    if q.shape[-1] != k.shape[-1]:
        raise ValueError(
            f"query feature axis (size {q.shape[-1]}) does not match key feature axis (size {k.shape[-1]})"
        )
    d = q.shape[-1]
    scores = (q @ np.swapaxes(k, -1, -2)) / np.sqrt(d)
    if mask is not None:
        scores = np.where(mask[..., None, :], scores, -1e300)
    return softmax(scores, axis=-1)


def attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Scaled dot-product attention ``softmax(q kᵀ / sqrt(d)) v``."""
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if k.shape[-2] != v.shape[-2]:
        raise ValueError(
            f"key length axis (size {k.shape[-2]}) does not match value length axis (size {v.shape[-2]})"
        )
    return attention_weights(q, k, mask) @ v


def ensemble_mean_var(members: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Per-element mean and population variance (divide by M) over members."""
    if len(members) == 0:
        raise ValueError("ensemble_mean_var needs at least one member")
    shape = np.shape(members[0])
    for i, m in enumerate(members):
        if np.shape(m) != shape:
            raise ValueError(f"member {i} has shape {np.shape(m)}, expected {shape}")
    stacked = np.stack([np.asarray(m, dtype=np.float64) for m in members])
    # shift by the first member so identical members give exactly zero variance
    # (a plain mean of M equal values can be off by one ulp when M is not a power of two)
    dev = stacked - stacked[0]
    shift = dev.mean(axis=0)
    var = ((dev - shift) ** 2).mean(axis=0)
    return stacked[0] + shift, var
