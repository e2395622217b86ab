"""Parameter construction and the standard transformer sublayers."""
from __future__ import annotations

import math

import numpy as np

from .rng import trunc_normal
from .tensor import Tensor, gelu, layer_norm, softmax

NEG_INF = -1e9


class ParamBuilder:
    """Creates named parameters in a fixed order from one seeded stream."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.params: dict = {}

    def _add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(data, requires_grad=True, name=name)
        self.params[name] = t
        return t

    def normal(self, name: str, shape, std: float = 0.02) -> Tensor:
        return self._add(name, trunc_normal(self.rng, shape, std))

    def zeros(self, name: str, shape) -> Tensor:
        return self._add(name, np.zeros(shape))

    def ones(self, name: str, shape) -> Tensor:
        return self._add(name, np.ones(shape))

    def linear(self, prefix: str, d_in: int, d_out: int, bias: bool = True):
        self.normal(f"{prefix}.weight", (d_in, d_out))
        if bias:
            self.zeros(f"{prefix}.bias", (d_out,))

    def norm(self, prefix: str, width: int):
        self.ones(f"{prefix}.gain", (width,))
        self.zeros(f"{prefix}.bias", (width,))

    def mlp(self, prefix: str, width: int, ratio: int):
        self.linear(f"{prefix}.fc1", width, ratio * width)
        self.linear(f"{prefix}.fc2", ratio * width, width)

    def attention_block(self, prefix: str, width: int, ratio: int):
        self.norm(f"{prefix}.ln1", width)
        self.linear(f"{prefix}.attn.qkv", width, 3 * width)
        self.linear(f"{prefix}.attn.proj", width, width)
        self.norm(f"{prefix}.ln2", width)
        self.mlp(f"{prefix}.mlp", width, ratio)


def linear(x: Tensor, p: dict, prefix: str) -> Tensor:
    out = x @ p[f"{prefix}.weight"]
    bias = p.get(f"{prefix}.bias")
    return out if bias is None else out + bias


def norm(x: Tensor, p: dict, prefix: str) -> Tensor:
    return layer_norm(x, p[f"{prefix}.gain"], p[f"{prefix}.bias"])


def mlp(x: Tensor, p: dict, prefix: str) -> Tensor:
    return linear(gelu(linear(x, p, f"{prefix}.fc1")), p, f"{prefix}.fc2")


def split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, c = x.shape
    return x.reshape(b, n, heads, c // heads).transpose(0, 2, 1, 3)


def merge_heads(x: Tensor) -> Tensor:
    b, h, n, d = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, h * d)


def attend(q: Tensor, k: Tensor, v: Tensor, mask=None):
    """Scaled dot-product attention on ``(B, H, n, d)`` heads.

    Returns the mixed values and the attention probabilities tensor.
    """
    scores = (q @ k.swap_last()) * (1.0 / math.sqrt(q.shape[-1]))
    if mask is not None:
        scores = scores + mask
    probs = softmax(scores, axis=-1)
    return probs @ v, probs


def self_attention(x: Tensor, p: dict, prefix: str, heads: int, mask=None):
    c = x.shape[-1]
    qkv = linear(x, p, f"{prefix}.qkv")
    q, k, v = (split_heads(qkv[..., i * c:(i + 1) * c], heads) for i in range(3))
    mixed, probs = attend(q, k, v, mask)
    return linear(merge_heads(mixed), p, f"{prefix}.proj"), probs


def causal_mask(n: int) -> np.ndarray:
    return np.triu(np.full((n, n), NEG_INF), k=1)
