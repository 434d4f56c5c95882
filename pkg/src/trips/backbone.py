"""ViT backbone with patch-selection layers at configurable depths."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .attention import (
    CrossAttnLayer,
    FfnBlock,
    MhsaLayer,
    cross_attn_forward,
    ffn_block,
    random_ffn,
    random_mhsa,
    sa_block,
)
from .kernels import LinearLayer, SeededRng, as_tensor, linear_apply, seeded_init
from .selection import (
    CLS,
    FUSED,
    TEXT,
    GuidanceMode,
    GuidanceSource,
    SelectionOutcome,
    TokenSequence,
    selection_layer_forward,
)


class ConfigError(ValueError):
    """Model or selection configuration violates an invariant."""


@dataclass(frozen=True)
class SelectionConfig:
    """Selection layers (1-based) and the keep rate applied at each."""

    locations: tuple[int, ...] = ()
    rates: tuple[float, ...] = ()
    rounding: str = "floor"

    def __post_init__(self):
        locations = tuple(int(x) for x in self.locations)
        rates = tuple(float(x) for x in self.rates)
        if len(locations) != len(rates):
            raise ConfigError("locations and rates must have equal length")
        if any(b <= a for a, b in zip(locations, locations[1:])):
            raise ConfigError("selection locations must be strictly increasing")
        if any(loc < 1 for loc in locations):
            raise ConfigError("selection locations are 1-based")
        if any(not 0 < r <= 1 for r in rates):
            raise ConfigError("keep rates must be in (0, 1]")
        if self.rounding not in ("floor", "nearest"):
            raise ConfigError(f"unknown rounding {self.rounding!r}")
        object.__setattr__(self, "locations", locations)
        object.__setattr__(self, "rates", rates)

    @classmethod
    def uniform(cls, locations, rate: float, rounding: str = "floor") -> "SelectionConfig":
        locations = tuple(locations)
        return cls(locations, (rate,) * len(locations), rounding)

    def rate_at(self, layer: int) -> float | None:
        for loc, r in zip(self.locations, self.rates):
            if loc == layer:
                return r
        return None

    def validate_depth(self, layers: int) -> None:
        if self.locations and self.locations[-1] > layers:
            raise ConfigError(f"selection location {self.locations[-1]} exceeds depth {layers}")


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 12
    width: int = 64
    heads: int = 4
    patch_size: int = 16
    image_size: int = 96
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    mode: GuidanceMode = field(default_factory=GuidanceMode)
    seed: int = 0
    norm_first: bool = False

    def __post_init__(self):
        if min(self.layers, self.width, self.heads, self.patch_size, self.image_size) < 1:
            raise ConfigError("model dimensions must be positive")
        if self.width % self.heads:
            raise ConfigError(f"width {self.width} not divisible by {self.heads} heads")
        if self.image_size % self.patch_size:
            raise ConfigError("image_size must be a multiple of patch_size")
        self.selection.validate_depth(self.layers)

    @classmethod
    def vit_b16(cls, image_size: int = 384, **kwargs) -> "ModelConfig":
        return cls(layers=12, width=768, heads=12, patch_size=16, image_size=image_size, **kwargs)

    @property
    def grid(self) -> tuple[int, int]:
        side = self.image_size // self.patch_size
        return side, side

    @property
    def num_tokens(self) -> int:
        rows, cols = self.grid
        return rows * cols + 1


@dataclass(frozen=True)
class ViTTrips:
    config: ModelConfig
    patch_proj: LinearLayer
    pos_embed: np.ndarray
    cls_embed: np.ndarray
    blocks: tuple[tuple[MhsaLayer, FfnBlock], ...]

    def __post_init__(self):
        cfg = self.config
        if self.pos_embed.shape != (cfg.num_tokens, cfg.width):
            raise ConfigError(f"positional embedding must be {cfg.num_tokens}x{cfg.width}")
        if self.cls_embed.shape != (cfg.width,):
            raise ConfigError("cls embedding width mismatch")
        if self.patch_proj.weight.shape != (cfg.width, 3 * cfg.patch_size**2):
            raise ConfigError("patch projection shape mismatch")
        if len(self.blocks) != cfg.layers:
            raise ConfigError(f"expected {cfg.layers} blocks, got {len(self.blocks)}")

    @classmethod
    def from_seed(cls, config: ModelConfig, norm_jitter: float = 0.0) -> "ViTTrips":
        """Random weights drawn from ``SeededRng(config.seed)``."""
        rng = SeededRng(config.seed)
        d = config.width
        in_f = 3 * config.patch_size**2
        patch_proj = LinearLayer(
            seeded_init((d, in_f), 1.0 / math.sqrt(in_f), rng), seeded_init(d, 0.02, rng)
        )
        pos = seeded_init((config.num_tokens, d), 0.5, rng)
        cls_embed = seeded_init(d, 1.0, rng)
        blocks = tuple(
            (random_mhsa(rng, d, config.heads, norm_jitter), random_ffn(rng, d, norm_jitter))
            for _ in range(config.layers)
        )
        return cls(config, patch_proj, pos, cls_embed, blocks)

    def with_config(self, **changes) -> "ViTTrips":
        """Same weights under a different selection/mode setup."""
        return replace(self, config=replace(self.config, **changes))


@dataclass
class ForwardTrace:
    """Per-layer sequence lengths and one record per selection event.

    ``lengths[j-1]`` is the sequence length leaving layer ``j``. For each
    selection layer, ``kept_masks`` marks grid cells whose own token survived
    and ``fused_masks`` marks grid cells whose token was fused or dropped at
    that event. Cells already merged at an earlier event appear in neither.
    """

    grid: tuple[int, int]
    lengths: list[int] = field(default_factory=list)
    outcomes: dict[int, SelectionOutcome] = field(default_factory=dict)
    kept_masks: dict[int, np.ndarray] = field(default_factory=dict)
    fused_masks: dict[int, np.ndarray] = field(default_factory=dict)
    lengths_before: dict[int, int] = field(default_factory=dict)

    @property
    def selection_layers(self) -> list[int]:
        return sorted(self.outcomes)

    def record(self, layer: int, n_before: int, outcome: SelectionOutcome) -> None:
        rows, cols = self.grid
        prov = outcome.candidate_provenance
        kept = np.zeros(rows * cols, dtype=bool)
        gone = np.zeros(rows * cols, dtype=bool)
        kept_prov = prov[outcome.kept_indices]
        dropped_prov = prov[outcome.dropped_indices]
        kept[kept_prov[kept_prov >= 0]] = True
        gone[dropped_prov[dropped_prov >= 0]] = True
        self.outcomes[layer] = outcome
        self.lengths_before[layer] = n_before
        self.kept_masks[layer] = kept.reshape(rows, cols)
        self.fused_masks[layer] = gone.reshape(rows, cols)


def placement(layers: int, count: int) -> list[int]:
    """Evenly spaced selection layers: stride ``floor(L / (t + 1))``, index ``i * s + 1``."""
    if count < 1:
        raise ConfigError("need at least one selection layer")
    if layers < count + 1:
        raise ConfigError(f"{count} selection layers do not fit in {layers} layers")
    stride = layers // (count + 1)
    return [i * stride + 1 for i in range(1, count + 1)]


def patchify(image, patch_size: int) -> np.ndarray:
    """[3, H, W] image -> [num_patches, 3 * p * p] rows in raster order, channel-major."""
    image = as_tensor(image, "image")
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"image must be [3, H, W], got {image.shape}")
    _, h, w = image.shape
    if h % patch_size or w % patch_size:
        raise ValueError(f"image {h}x{w} is not divisible into {patch_size}px patches")
    rows, cols = h // patch_size, w // patch_size
    patches = image.reshape(3, rows, patch_size, cols, patch_size)
    return patches.transpose(1, 3, 0, 2, 4).reshape(rows * cols, 3 * patch_size * patch_size)


def patch_embed(image, model: ViTTrips) -> TokenSequence:
    cfg = model.config
    image = as_tensor(image, "image")
    if image.shape[1:] != (cfg.image_size, cfg.image_size):
        raise ValueError(
            f"model expects {cfg.image_size}x{cfg.image_size} images, got {image.shape[1:]}"
        )
    tokens = linear_apply(model.patch_proj, patchify(image, cfg.patch_size))
    tokens = np.concatenate([model.cls_embed[None, :], tokens]) + model.pos_embed
    prov = np.concatenate([[CLS], np.arange(tokens.shape[0] - 1)])
    return TokenSequence(tokens, prov, cfg.grid)


def _check_guidance(model: ViTTrips, guidance):
    cfg = model.config
    if cfg.mode.needs_guidance_vector and cfg.selection.locations:
        if guidance is None:
            raise ValueError("text-cls mode needs a guidance vector")
    if guidance is not None:
        guidance = as_tensor(guidance, "guidance").ravel()
        if guidance.shape[0] != cfg.width:
            raise ValueError(f"guidance must have width {cfg.width}, got {guidance.shape[0]}")
    return guidance


def _run_stack(model: ViTTrips, seq: TokenSequence, guidance, n_fixed: int):
    cfg = model.config
    trace = ForwardTrace(seq.grid)
    for j, (mhsa, ffn) in enumerate(model.blocks, start=1):
        rate = cfg.selection.rate_at(j)
        if rate is None:
            x, _ = sa_block(mhsa, seq.tokens, cfg.norm_first)
            seq = seq.with_tokens(ffn_block(ffn, x, cfg.norm_first))
        else:
            n_before = len(seq)
            seq, outcome, _ = selection_layer_forward(
                mhsa,
                ffn,
                seq,
                guidance,
                rate,
                cfg.mode,
                n_fixed=n_fixed,
                rounding=cfg.selection.rounding,
                norm_first=cfg.norm_first,
            )
            trace.record(j, n_before, outcome)
        trace.lengths.append(len(seq))
    return seq, trace


def forward(model: ViTTrips, seq: TokenSequence, guidance=None) -> tuple[TokenSequence, ForwardTrace]:
    """Run the dual-stream visual encoder over an embedded sequence."""
    if model.config.mode.source is GuidanceSource.MULTIMODAL_CLS:
        raise ValueError("multimodal-cls guidance runs through single_stream_forward")
    guidance = _check_guidance(model, guidance)
    return _run_stack(model, seq, guidance, n_fixed=1)


def encode(model: ViTTrips, image, guidance=None) -> tuple[TokenSequence, ForwardTrace]:
    return forward(model, patch_embed(image, model), guidance)


def single_stream_forward(model: ViTTrips, text_tokens, image_seq: TokenSequence):
    """One stream ``[CLS, text..., image...]``; only image tokens are ever pruned.

    The image [CLS] acts as the global [CLS], and scores come from its
    attention row restricted to the image columns.
    """
    if model.config.mode.source is not GuidanceSource.MULTIMODAL_CLS:
        raise ValueError("single-stream forward needs multimodal-cls guidance")
    text = as_tensor(text_tokens, "text_tokens")
    if text.ndim != 2 or text.shape[1] != image_seq.width:
        raise ValueError("text tokens must share the image token width")
    m = text.shape[0]
    tokens = np.concatenate([image_seq.tokens[:1], text, image_seq.tokens[1:]])
    prov = np.concatenate([[CLS], np.full(m, TEXT), image_seq.provenance[1:]])
    seq = TokenSequence(tokens, prov, image_seq.grid)
    return _run_stack(model, seq, None, n_fixed=1 + m)


def plain_vit_forward(model: ViTTrips, seq: TokenSequence) -> np.ndarray:
    """Reference stack with no selection at all."""
    x = seq.tokens
    for mhsa, ffn in model.blocks:
        x, _ = sa_block(mhsa, x, model.config.norm_first)
        x = ffn_block(ffn, x, model.config.norm_first)
    return x


def fuse_toy(text_seq, visual_out: TokenSequence, fusion_layers: list[CrossAttnLayer]) -> np.ndarray:
    """Text queries cross-attend to the reduced visual sequence, layer by layer."""
    x = as_tensor(text_seq, "text_seq")
    for layer in fusion_layers:
        x = cross_attn_forward(layer, x, visual_out.tokens)
    return x


def count_grid_tokens(seq: TokenSequence) -> int:
    return int(np.count_nonzero(seq.provenance >= 0))


def count_fused_tokens(seq: TokenSequence) -> int:
    return int(np.count_nonzero(seq.provenance == FUSED))
