"""Dense float64 kernels shared by every other module.

Tensors are plain ``numpy.ndarray`` objects of dtype float64. Every kernel
returns a fresh array and never writes into its inputs, and every kernel
rejects non-finite results.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np
from scipy.special import erf

DEFAULT_LN_EPS = 1e-6


class NonFiniteError(ValueError):
    """A kernel produced or received NaN/Inf."""


def _all_finite(arr: np.ndarray) -> bool:
    # a finite sum implies finite entries; only fall back to the full scan when it is not
    return math.isfinite(np.add.reduce(arr, axis=None)) or bool(np.isfinite(arr).all())


def as_tensor(x, name: str = "tensor") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if not _all_finite(arr):
        raise NonFiniteError(f"{name} contains NaN or Inf")
    return arr


def _finite(out: np.ndarray, op: str) -> np.ndarray:
    if not _all_finite(out):
        raise NonFiniteError(f"{op} produced NaN or Inf")
    return out


def matmul(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        out = a @ b
    return _finite(out, "matmul")


def softmax_rows(x) -> np.ndarray:
    """Softmax over the last axis with per-row max subtraction."""
    x = np.asarray(x, dtype=np.float64)
    if math.isnan(np.add.reduce(x, axis=None)) and np.isnan(x).any():
        raise NonFiniteError("softmax_rows input contains NaN")
    e = np.exp(x - np.maximum.reduce(x, axis=-1, keepdims=True))
    return _finite(e / np.add.reduce(e, axis=-1, keepdims=True), "softmax_rows")


def layer_norm(x, gamma, beta, eps: float = DEFAULT_LN_EPS) -> np.ndarray:
    """Row-wise layer normalization (population variance, two-pass)."""
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    x = np.asarray(x, dtype=np.float64)
    gamma = np.asarray(gamma, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ValueError(
            f"layer_norm affine params must have shape ({x.shape[-1]},), "
            f"got {gamma.shape} and {beta.shape}"
        )
    n = x.shape[-1]
    centered = x - np.add.reduce(x, axis=-1, keepdims=True) / n
    var = np.add.reduce(centered * centered, axis=-1, keepdims=True) / n
    return _finite(centered / np.sqrt(var + eps) * gamma + beta, "layer_norm")


def gelu(x) -> np.ndarray:
    """Exact GELU, ``0.5 * x * (1 + erf(x / sqrt(2)))`` (not the tanh form)."""
    x = np.asarray(x, dtype=np.float64)
    return _finite(0.5 * x * (1.0 + erf(x / math.sqrt(2.0))), "gelu")


@dataclass(frozen=True)
class LinearLayer:
    """Affine map ``y = x @ weight.T + bias`` with ``weight`` of shape [out, in]."""

    weight: np.ndarray
    bias: np.ndarray | None = None

    def __post_init__(self):
        w = as_tensor(self.weight, "weight")
        if w.ndim != 2:
            raise ValueError(f"weight must be rank 2, got shape {w.shape}")
        b = np.zeros(w.shape[0]) if self.bias is None else as_tensor(self.bias, "bias")
        if b.shape != (w.shape[0],):
            raise ValueError(f"bias must have shape ({w.shape[0]},), got {b.shape}")
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]


def linear_apply(layer: LinearLayer, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != layer.in_features:
        raise ValueError(
            f"linear layer expects [m x {layer.in_features}] input, got {x.shape}"
        )
    return _finite(x @ layer.weight.T + layer.bias, "linear_apply")


def top_k_indices(scores, k: int) -> list[int]:
    """Indices of the ``k`` largest scores, returned in ascending index order.

    Ties go to the lower index.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    n = scores.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    # stable sort on the negated scores keeps lower indices first among ties
    order = np.argsort(-scores, kind="stable")
    return sorted(int(i) for i in order[:k])


def exact_rate(rate) -> Fraction:
    """The rational a float keep rate stands for.

    Floats are snapped to the nearest fraction with denominator <= 1e9, which
    recovers short decimals (0.29 -> 29/100) and simple ratios (2/3) exactly.
    """
    if isinstance(rate, Fraction):
        return rate
    return Fraction(rate).limit_denominator(10**9)


@functools.lru_cache(maxsize=4096)
def keep_count(n: int, rate: float, rounding: str = "floor") -> int:
    """Number of tokens kept out of ``n`` at keep rate ``rate`` (at least 1).

    The product is taken in exact rational arithmetic so that e.g. 100 * 0.29
    gives 29 rather than 28.
    """
    if not 0 < rate <= 1:
        raise ValueError(f"keep rate must be in (0, 1], got {rate}")
    exact = n * exact_rate(rate)
    if rounding == "floor":
        k = math.floor(exact)
    elif rounding == "nearest":
        k = math.floor(exact + Fraction(1, 2))
    else:
        raise ValueError(f"unknown rounding {rounding!r}")
    return max(1, min(n, k))


# SplitMix64 constants (Steele, Lea & Flood 2014).
_GOLDEN_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX_1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX_2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def _splitmix64(counters: np.ndarray, seed: int) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = np.uint64(seed & _MASK64) + counters * _GOLDEN_GAMMA
        z = (z ^ (z >> np.uint64(30))) * _MIX_1
        z = (z ^ (z >> np.uint64(27))) * _MIX_2
        return z ^ (z >> np.uint64(31))


@dataclass
class SeededRng:
    """Counter-based SplitMix64 stream.

    Draw ``i`` (1-based) is ``mix(seed + i * 0x9E3779B97F4A7C15 mod 2**64)``
    with the standard SplitMix64 finalizer (shifts 30/27/31, multipliers
    0xBF58476D1CE4E5B9 and 0x94D049BB133111EB). Uniforms in (0, 1] take the
    top 53 bits: ``((x >> 11) + 1) * 2**-53``. Gaussians use Box-Muller on
    consecutive uniform pairs ``(u1, u2)``:
    ``sqrt(-2 ln u1) * cos(2 pi u2)`` then ``sqrt(-2 ln u1) * sin(2 pi u2)``.
    Pure integer mixing, so streams are identical on every platform.
    """

    seed: int
    counter: int = field(default=0)

    def __post_init__(self):
        if not 0 <= self.seed <= _MASK64:
            raise ValueError("seed must be an unsigned 64-bit integer")

    def next_uint64(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        return _splitmix64(idx, self.seed)

    def uniform(self, n: int) -> np.ndarray:
        bits = self.next_uint64(n) >> np.uint64(11)
        return (bits.astype(np.float64) + 1.0) * 2.0**-53

    def normal(self, n: int) -> np.ndarray:
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs).reshape(pairs, 2)
        radius = np.sqrt(-2.0 * np.log(u[:, 0]))
        angle = 2.0 * math.pi * u[:, 1]
        z = np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=1)
        return z.ravel()[:n]

    def spawn(self, stream: int) -> "SeededRng":
        """Independent child stream, keyed by ``stream``."""
        child = _splitmix64(np.array([stream + 1], dtype=np.uint64), self.seed)[0]
        return SeededRng(int(child))


def seeded_init(shape: Sequence[int] | int, scale: float, rng: SeededRng) -> np.ndarray:
    """I.i.d. Gaussian(0, scale**2) tensor drawn from ``rng``."""
    shape = (shape,) if isinstance(shape, int) else tuple(shape)
    if any(s <= 0 for s in shape):
        raise ValueError(f"shape entries must be positive, got {shape}")
    size = math.prod(shape)
    return scale * rng.normal(size).reshape(shape)
