"""Pre-norm transformer building blocks on the autodiff engine.

GPT-2 conventions throughout: learned absolute positions (owned by the
models, not the layers), feed-forward width 4d, GELU, strict causal
attention, normal(0, 0.02) weight init with zero biases.
"""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import DiffArray

INIT_STD = 0.02


def param(values: np.ndarray, dtype: str) -> DiffArray:
    return DiffArray(np.asarray(values, dtype=dtype), requires_grad=True)


def normal_param(rng: np.random.Generator, shape, dtype: str, std: float = INIT_STD) -> DiffArray:
    return param(rng.normal(0.0, std, size=shape), dtype)


class Linear:
    def __init__(self, rng, n_in: int, n_out: int, dtype: str):
        self.weight = normal_param(rng, (n_in, n_out), dtype)
        self.bias = param(np.zeros(n_out), dtype)

    def __call__(self, x: DiffArray) -> DiffArray:
        return ad.add(ad.matmul(x, self.weight), self.bias)

    def named_parameters(self) -> Iterator[tuple[str, DiffArray]]:
        yield "weight", self.weight
        yield "bias", self.bias


class LayerNorm:
    def __init__(self, width: int, dtype: str, eps: float = 1e-5):
        self.gain = param(np.ones(width), dtype)
        self.shift = param(np.zeros(width), dtype)
        self.eps = eps

    def __call__(self, x: DiffArray) -> DiffArray:
        return ad.layer_norm(x, self.gain, self.shift, eps=self.eps)

    def named_parameters(self) -> Iterator[tuple[str, DiffArray]]:
        yield "gain", self.gain
        yield "shift", self.shift


class TransformerLayer:
    """One pre-norm causal block: x + attn(ln(x)), then x + mlp(ln(x))."""

    def __init__(self, rng, width: int, n_heads: int, dtype: str):
        if width % n_heads != 0:
            raise ValueError("width must be divisible by n_heads")
        self.n_heads = n_heads
        self.head_width = width // n_heads
        self.ln_attn = LayerNorm(width, dtype)
        self.attn_qkv = Linear(rng, width, 3 * width, dtype)
        self.attn_out = Linear(rng, width, width, dtype)
        self.ln_mlp = LayerNorm(width, dtype)
        self.mlp_fc = Linear(rng, width, 4 * width, dtype)
        self.mlp_out = Linear(rng, 4 * width, width, dtype)

    def _attention(self, x: DiffArray) -> DiffArray:
        n_batch, n_pos, width = x.shape
        qkv = self.attn_qkv(self.ln_attn(x))
        parts = []
        for i in range(3):
            piece = ad.narrow(qkv, -1, i * width, width)
            piece = ad.reshape(piece, (n_batch, n_pos, self.n_heads, self.head_width))
            parts.append(ad.transpose(piece, (0, 2, 1, 3)))
        q, k, v = parts
        # scale q (small) instead of the [B, H, T, T] score array
        q = ad.mul(q, 1.0 / math.sqrt(self.head_width))
        scores = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2)))
        weights = ad.causal_softmax(scores)
        mixed = ad.matmul(weights, v)
        mixed = ad.reshape(ad.transpose(mixed, (0, 2, 1, 3)), (n_batch, n_pos, width))
        return self.attn_out(mixed)

    def __call__(self, x: DiffArray) -> DiffArray:
        x = ad.add(x, self._attention(x))
        h = self.mlp_out(ad.gelu(self.mlp_fc(self.ln_mlp(x))))
        return ad.add(x, h)

    def named_parameters(self) -> Iterator[tuple[str, DiffArray]]:
        for sub_name, sub in (
            ("ln_attn", self.ln_attn),
            ("attn_qkv", self.attn_qkv),
            ("attn_out", self.attn_out),
            ("ln_mlp", self.ln_mlp),
            ("mlp_fc", self.mlp_fc),
            ("mlp_out", self.mlp_out),
        ):
            for name, p in sub.named_parameters():
                yield f"{sub_name}.{name}", p


def layer_param_count(width: int) -> int:
    """Exact parameters in one block: 12*width^2 + 13*width."""
    return 12 * width * width + 13 * width
