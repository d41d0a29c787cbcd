"""Shared transformer pieces built on the tensor ops."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .rng import Rng


def init_linear(rng: Rng, fan_in: int, fan_out: int, scale: float = 1.0) -> tuple[T.Tensor, T.Tensor]:
    w = rng.normal((fan_in, fan_out)) * (scale / np.sqrt(fan_in))
    return T.Tensor(w, requires_grad=True), T.Tensor(np.zeros(fan_out), requires_grad=True)


def causal_mask(n: int) -> np.ndarray:
    m = np.zeros((n, n))
    m[np.triu_indices(n, 1)] = -np.inf
    return m


def multihead_attention(x, wqkv, bqkv, wo, bo, heads: int, additive_mask=None, record: list | None = None):
    """Self-attention over the second-to-last axis of ``x`` (..., T, D).

    ``additive_mask`` broadcasts against the (..., H, T, T) score tensor.
    """
    x = T.as_tensor(x)
    *lead, n, d = x.shape
    dh = d // heads
    qkv = x @ wqkv + bqkv  # (..., T, 3D)
    qkv = qkv.reshape(*lead, n, 3, heads, dh)
    nl = len(lead)
    # -> (3, ..., H, T, dh)
    perm = (nl + 1,) + tuple(range(nl)) + (nl + 2, nl, nl + 3)
    qkv = T.transpose(qkv, perm)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = (q @ T.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(dh))
    if additive_mask is not None:
        scores = scores + T.Tensor(additive_mask)
    probs = T.softmax(scores, axis=-1)
    if record is not None:
        record.append(probs.data)
    out = probs @ v  # (..., H, T, dh)
    out = T.swapaxes(out, -2, -3).reshape(*lead, n, d)
    return out @ wo + bo
