"""Multi-head self-attention, cross-attention and FFN sub-blocks.

The default block structure is post-norm, ``LN(f(x) + x)``, for both the
attention and the FFN sub-block. Standard ViT-B checkpoints are pre-norm
(``x + f(LN(x))``); pass ``norm_first=True`` to get that structure instead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .kernels import (
    DEFAULT_LN_EPS,
    LinearLayer,
    SeededRng,
    gelu,
    layer_norm,
    linear_apply,
    seeded_init,
    softmax_rows,
)

FFN_EXPANSION = 4


@dataclass(frozen=True)
class LayerNorm:
    gamma: np.ndarray
    beta: np.ndarray
    eps: float = DEFAULT_LN_EPS

    @classmethod
    def identity(cls, width: int, eps: float = DEFAULT_LN_EPS) -> "LayerNorm":
        return cls(np.ones(width), np.zeros(width), eps)

    def __call__(self, x) -> np.ndarray:
        return layer_norm(x, self.gamma, self.beta, self.eps)


@dataclass(frozen=True)
class MhsaLayer:
    wq: LinearLayer
    wk: LinearLayer
    wv: LinearLayer
    wo: LinearLayer
    heads: int
    norm: LayerNorm | None = None

    def __post_init__(self):
        d = self.width
        for name in ("wq", "wk", "wv", "wo"):
            w = getattr(self, name).weight
            if w.shape != (d, d):
                raise ValueError(f"{name} must be {d}x{d}, got {w.shape}")
        if self.heads < 1 or d % self.heads:
            raise ValueError(f"width {d} is not divisible by {self.heads} heads")
        if self.norm is None:
            object.__setattr__(self, "norm", LayerNorm.identity(d))

    @property
    def width(self) -> int:
        return self.wq.weight.shape[0]

    @property
    def head_dim(self) -> int:
        return self.width // self.heads


@dataclass(frozen=True)
class FfnBlock:
    w1: LinearLayer
    w2: LinearLayer
    norm: LayerNorm | None = None

    def __post_init__(self):
        d = self.w1.in_features
        if self.w1.out_features != FFN_EXPANSION * d or self.w2.weight.shape != (
            d,
            FFN_EXPANSION * d,
        ):
            raise ValueError(f"FFN must map {d} -> {FFN_EXPANSION * d} -> {d}")
        if self.norm is None:
            object.__setattr__(self, "norm", LayerNorm.identity(d))

    @property
    def width(self) -> int:
        return self.w1.in_features


@dataclass(frozen=True)
class CrossAttnLayer:
    # same projection layout as self-attention; keys/values come from another sequence
    attn: MhsaLayer
    ffn: FfnBlock

    def __post_init__(self):
        if self.ffn.width != self.attn.width:
            raise ValueError("attention and FFN widths differ")

    @property
    def heads(self) -> int:
        return self.attn.heads


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    n, d = x.shape
    return x.reshape(n, heads, d // heads).transpose(1, 0, 2)


def _attend(layer: MhsaLayer, xq: np.ndarray, xkv: np.ndarray):
    xq = np.asarray(xq, dtype=np.float64)
    xkv = np.asarray(xkv, dtype=np.float64)
    d = layer.width
    if xq.ndim != 2 or xq.shape[1] != d or xkv.ndim != 2 or xkv.shape[1] != d:
        raise ValueError(f"attention expects [n x {d}] inputs, got {xq.shape}, {xkv.shape}")
    if xq.shape[0] < 1 or xkv.shape[0] < 1:
        raise ValueError("attention needs at least one query and one key")
    q = _split_heads(linear_apply(layer.wq, xq), layer.heads)
    k = _split_heads(linear_apply(layer.wk, xkv), layer.heads)
    v = _split_heads(linear_apply(layer.wv, xkv), layer.heads)
    maps = softmax_rows(q @ k.transpose(0, 2, 1) / math.sqrt(layer.head_dim))
    mixed = (maps @ v).transpose(1, 0, 2).reshape(xq.shape[0], d)
    return linear_apply(layer.wo, mixed), maps


def mhsa_forward(layer: MhsaLayer, x):
    """Scaled dot-product self-attention.

    Returns ``(y, maps)`` where ``y`` is the output projection (no residual,
    no normalization) and ``maps`` has shape [heads, n, n].
    """
    return _attend(layer, x, x)


def sa_block(layer: MhsaLayer, x, norm_first: bool = False):
    x = np.asarray(x, dtype=np.float64)
    if norm_first:
        y, maps = mhsa_forward(layer, layer.norm(x))
        return y + x, maps
    y, maps = mhsa_forward(layer, x)
    return layer.norm(y + x), maps


def ffn_block(ffn: FfnBlock, x, norm_first: bool = False) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    inner = ffn.norm(x) if norm_first else x
    h = linear_apply(ffn.w2, gelu(linear_apply(ffn.w1, inner)))
    return h + x if norm_first else ffn.norm(h + x)


def cross_attn_forward(layer: CrossAttnLayer, xq, xkv, norm_first: bool = False) -> np.ndarray:
    """Queries from ``xq`` attend over ``xkv``; residual and norm, then the FFN."""
    xq = np.asarray(xq, dtype=np.float64)
    attn = layer.attn
    if norm_first:
        y, _ = _attend(attn, attn.norm(xq), xkv)
        h = y + xq
    else:
        y, _ = _attend(attn, xq, xkv)
        h = attn.norm(y + xq)
    return ffn_block(layer.ffn, h, norm_first)


def _random_linear(rng: SeededRng, out_f: int, in_f: int) -> LinearLayer:
    return LinearLayer(
        seeded_init((out_f, in_f), 1.0 / math.sqrt(in_f), rng),
        seeded_init(out_f, 0.02, rng),
    )


def _random_norm(rng: SeededRng, width: int, jitter: float) -> LayerNorm:
    if jitter == 0:
        return LayerNorm.identity(width)
    return LayerNorm(1.0 + seeded_init(width, jitter, rng), seeded_init(width, jitter, rng))


def random_mhsa(rng: SeededRng, width: int, heads: int, norm_jitter: float = 0.0) -> MhsaLayer:
    """Self-attention layer with N(0, 1/width) projections."""
    ws = [_random_linear(rng, width, width) for _ in range(4)]
    return MhsaLayer(*ws, heads=heads, norm=_random_norm(rng, width, norm_jitter))


def random_ffn(rng: SeededRng, width: int, norm_jitter: float = 0.0) -> FfnBlock:
    hidden = FFN_EXPANSION * width
    return FfnBlock(
        _random_linear(rng, hidden, width),
        _random_linear(rng, width, hidden),
        _random_norm(rng, width, norm_jitter),
    )


def random_cross_attn(rng: SeededRng, width: int, heads: int, norm_jitter: float = 0.0) -> CrossAttnLayer:
    return CrossAttnLayer(
        random_mhsa(rng, width, heads, norm_jitter), random_ffn(rng, width, norm_jitter)
    )
