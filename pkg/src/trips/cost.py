"""Analytic sequence-length schedules and FLOPs accounting.

All counts are multiply-accumulates (MACs) unless the two-per-MAC convention
is requested, which doubles every figure. Ratios between reports do not
depend on the convention.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Iterable, Sequence

from .backbone import ConfigError, SelectionConfig
from .kernels import exact_rate, keep_count


class FlopsConvention(enum.Enum):
    MAC = "mac"
    TWO_PER_MAC = "2mac"

    @property
    def factor(self) -> int:
        return 1 if self is FlopsConvention.MAC else 2


@dataclass(frozen=True)
class CostConfig:
    vision_layers: int = 12
    width: int = 768
    heads: int = 12
    ffn_mult: int = 4
    text_layers: int = 6
    text_len: int = 40
    fusion_layers: int = 6
    n_tokens: int = 577
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    convention: FlopsConvention = FlopsConvention.MAC

    def __post_init__(self):
        dims = (self.vision_layers, self.width, self.heads, self.ffn_mult, self.text_len, self.n_tokens)
        if min(dims) < 1 or self.text_layers < 0 or self.fusion_layers < 0:
            raise ConfigError("cost dimensions must be positive")
        if self.n_tokens < 3 and self.selection.locations:
            raise ConfigError("selection needs at least two patch tokens")
        self.selection.validate_depth(self.vision_layers)
        object.__setattr__(self, "convention", FlopsConvention(self.convention))

    @classmethod
    def for_image(cls, image_size: int, patch_size: int = 16, **kwargs) -> "CostConfig":
        if image_size % patch_size:
            raise ConfigError("image_size must be a multiple of patch_size")
        return cls(n_tokens=(image_size // patch_size) ** 2 + 1, **kwargs)


@dataclass(frozen=True)
class CostReport:
    lengths: list[int]
    vision: int
    text: int
    fusion: int
    keep_rate: int
    convention: FlopsConvention

    @property
    def total(self) -> int:
        return self.vision + self.text + self.fusion

    def ratio_to(self, baseline: "CostReport") -> float:
        return speedup_estimate(self, baseline)

    def as_dict(self) -> dict:
        return {
            "lengths": list(self.lengths),
            "vision": self.vision,
            "text": self.text,
            "fusion": self.fusion,
            "total": self.total,
            "overall_keep_rate": self.keep_rate,
            "convention": self.convention.value,
        }


def token_schedule(n_tokens: int, selection: SelectionConfig, layers: int = 12) -> list[int]:
    """Sequence length leaving each layer.

    ``n_tokens`` counts the [CLS]. A selection layer with ``n`` candidates
    leaves ``keep_count(n, r) + 2`` tokens ([CLS], kept, fused).
    """
    selection.validate_depth(layers)
    if n_tokens < 1:
        raise ConfigError("n_tokens must be positive")
    lengths, n = [], n_tokens
    for j in range(1, layers + 1):
        rate = selection.rate_at(j)
        if rate is not None:
            if n - 1 < 2:
                raise ConfigError(f"layer {j} has fewer than two patch tokens to select from")
            n = keep_count(n - 1, rate, selection.rounding) + 2
        lengths.append(n)
    return lengths


def overall_keep_rate(rates: Iterable[float]) -> int:
    """Product of keep rates as a whole percentage, rounded half up."""
    product = Fraction(1)
    for r in rates:
        product *= exact_rate(r)
    return math.floor(100 * product + Fraction(1, 2))


def encoder_layer_flops(n: int, d: int, ffn_mult: int = 4, convention=FlopsConvention.MAC) -> int:
    """Q/K/V/O projections, attention scores and mixing, and the FFN for ``n`` tokens."""
    if n < 1 or d < 1:
        raise ValueError("n and d must be positive")
    return (_attn_macs(n, d) + _ffn_macs(n, d, ffn_mult)) * FlopsConvention(convention).factor


def _attn_macs(n: int, d: int) -> int:
    return 4 * n * d * d + 2 * n * n * d


def _ffn_macs(n: int, d: int, ffn_mult: int) -> int:
    return 2 * ffn_mult * n * d * d


def cross_layer_flops(nq: int, nk: int, d: int, ffn_mult: int = 4, convention=FlopsConvention.MAC) -> int:
    """Fusion layer: self-attention over the queries, cross-attention into ``nk`` keys, FFN."""
    if nq < 1 or nk < 1:
        raise ValueError("cross attention needs at least one query and one key")
    self_part = 4 * nq * d * d + 2 * nq * nq * d
    cross_part = 2 * nq * d * d + 2 * nk * d * d + 2 * nq * nk * d
    return (self_part + cross_part + _ffn_macs(nq, d, ffn_mult)) * FlopsConvention(convention).factor


def model_flops(config: CostConfig) -> CostReport:
    """Vision stack + text encoder + fusion encoder.

    A selection layer runs its attention at the incoming length and its FFN at
    the reduced length.
    """
    d, mult, sel = config.width, config.ffn_mult, config.selection
    factor = config.convention.factor
    lengths = token_schedule(config.n_tokens, sel, config.vision_layers)
    vision, n_in = 0, config.n_tokens
    for n_out in lengths:
        vision += _attn_macs(n_in, d) + _ffn_macs(n_out, d, mult)
        n_in = n_out
    text = config.text_layers * (_attn_macs(config.text_len, d) + _ffn_macs(config.text_len, d, mult))
    fusion = config.fusion_layers * cross_layer_flops(config.text_len, lengths[-1], d, mult)
    return CostReport(
        lengths=lengths,
        vision=vision * factor,
        text=text * factor,
        fusion=fusion * factor,
        keep_rate=overall_keep_rate(sel.rates),
        convention=config.convention,
    )


def speedup_estimate(a: CostReport, b: CostReport) -> float:
    """``total(a) / total(b)``."""
    if a.convention is not b.convention:
        raise ValueError("reports use different FLOPs conventions")
    return a.total / b.total


@dataclass(frozen=True)
class SweepRow:
    locations: tuple[int, ...]
    rates: tuple[float, ...]
    image_size: int


@dataclass(frozen=True)
class SweepResult:
    row: SweepRow
    report: CostReport
    ratio: float

    def as_dict(self) -> dict:
        return {
            "locations": list(self.row.locations),
            "rates": list(self.row.rates),
            "image_size": self.row.image_size,
            "ratio": self.ratio,
            **self.report.as_dict(),
        }


def sweep(
    rows: Sequence[SweepRow | tuple],
    base: CostConfig = CostConfig(),
    baseline: CostReport | None = None,
    patch_size: int = 16,
) -> list[SweepResult]:
    """One report per row, each with its ratio to ``baseline``.

    The default baseline is ``base`` with no selection at 384x384.
    """
    if baseline is None:
        baseline = model_flops(
            replace(base, n_tokens=(384 // patch_size) ** 2 + 1, selection=SelectionConfig())
        )
    results = []
    for row in rows:
        row = row if isinstance(row, SweepRow) else SweepRow(tuple(row[0]), tuple(row[1]), int(row[2]))
        if row.image_size % patch_size:
            raise ConfigError(f"image size {row.image_size} is not a multiple of {patch_size}")
        cfg = replace(
            base,
            n_tokens=(row.image_size // patch_size) ** 2 + 1,
            selection=SelectionConfig(row.locations, row.rates, base.selection.rounding),
        )
        report = model_flops(cfg)
        results.append(SweepResult(row, report, speedup_estimate(report, baseline)))
    return results


def _uniform(locations, rate, image_size=384) -> SweepRow:
    return SweepRow(tuple(locations), (rate,) * len(locations), image_size)


LOCATION_SWEEP = [
    _uniform([2], 0.5),
    _uniform([10], 0.5),
    _uniform([2, 4], 0.5),
    _uniform([4, 8], 0.5),
    _uniform([5, 10], 0.5),
    _uniform([6, 12], 0.5),
    _uniform([2, 4], 0.7),
    _uniform([4, 8], 0.7),
    _uniform([5, 10], 0.7),
    _uniform([6, 12], 0.7),
    _uniform([2, 6, 10], 0.7),
    _uniform([3, 6, 9], 0.7),
    _uniform([4, 8, 12], 0.7),
]

RESOLUTION_SWEEP = [_uniform([5, 10], 0.7, size) for size in (224, 256, 304, 384, 464, 512)]
