"""Small layer helpers shared by the backbone and the noise generator."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


def init_weight(rng: np.random.Generator, fan_in: int, fan_out: int, name: str, gain: float = 1.0) -> Tensor:
    w = rng.standard_normal((fan_in, fan_out)) * (gain / np.sqrt(fan_in))
    return Tensor(w, requires_grad=True, name=name)


def zeros(shape, name: str) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, name=name)


def ones(shape, name: str) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True, name=name)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = T.matmul(x, w)
    return y if b is None else T.bias_add(y, b)


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    """[B, S, H*dh] -> [B, H, S, dh]"""
    B, S, D = x.shape
    return T.transpose(T.reshape(x, (B, S, n_heads, D // n_heads)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    """[B, H, S, dh] -> [B, S, H*dh]"""
    B, H, S, dh = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (B, S, H * dh))


def attention(q: Tensor, k: Tensor, v: Tensor, n_heads: int, allowed: np.ndarray | None = None):
    """Scaled dot-product attention; returns (output [B,Sq,D], weights [B,H,Sq,Sk])."""
    qh, kh, vh = split_heads(q, n_heads), split_heads(k, n_heads), split_heads(v, n_heads)
    dh = qh.shape[-1]
    scores = T.scale(T.matmul(qh, T.transpose(kh, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    if allowed is not None:
        scores = T.masked_fill(scores, ~allowed, -1e9)
    weights = T.softmax(scores, axis=-1)
    return merge_heads(T.matmul(weights, vh)), weights


def as_batched(x: Tensor) -> tuple[Tensor, bool]:
    """Give a 2-D tensor a leading batch axis of one."""
    if x.ndim == 2:
        return T.reshape(x, (1,) + x.shape), True
    return x, False
