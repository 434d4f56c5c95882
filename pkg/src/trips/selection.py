"""Text-guided patch scoring, top-k keep and inattentive-token fusion.

A selection layer runs self-attention, scores the patch tokens against a
guidance vector, keeps the ``k = floor(n * r)`` best-scoring tokens in their
original order and collapses the rest into one fused token weighted by their
(unnormalized) scores, then runs the FFN on the shortened sequence.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .attention import FfnBlock, MhsaLayer, ffn_block, sa_block
from .kernels import LinearLayer, as_tensor, keep_count, linear_apply, softmax_rows, top_k_indices

# provenance codes; non-negative values are raster indices into the patch grid
CLS = -1
FUSED = -2
TEXT = -3


class DegenerateGuidanceError(ValueError):
    """The guidance puts no attention mass on any candidate token."""


class GuidanceSource(enum.Enum):
    TEXT_CLS = "text-cls"
    IMAGE_CLS = "image-cls"
    MULTIMODAL_CLS = "multimodal-cls"


@dataclass(frozen=True)
class GuidanceMode:
    """Which [CLS] drives scoring, plus the two ablation switches.

    ``disable_fusion`` drops inattentive tokens instead of fusing them.
    ``disable_td_att`` scores by the image [CLS] attention row even though a
    text guidance vector is available (text mode only).
    ``key_projected`` scores the text query against key-projected tokens
    instead of the raw post-attention tokens.
    """

    source: GuidanceSource = GuidanceSource.TEXT_CLS
    disable_fusion: bool = False
    disable_td_att: bool = False
    key_projected: bool = False

    def __post_init__(self):
        source = GuidanceSource(self.source)
        object.__setattr__(self, "source", source)
        if self.disable_td_att and source is not GuidanceSource.TEXT_CLS:
            raise ValueError("disable_td_att only applies to text-cls guidance")
        if self.key_projected and source is not GuidanceSource.TEXT_CLS:
            raise ValueError("key_projected only applies to text-cls guidance")

    @property
    def needs_guidance_vector(self) -> bool:
        return self.source is GuidanceSource.TEXT_CLS and not self.disable_td_att


@dataclass(frozen=True)
class TokenSequence:
    """Token matrix with row 0 the [CLS] token and a provenance tag per row.

    ``provenance[i]`` is ``CLS``, ``FUSED``, ``TEXT`` or the raster index
    ``row * cols + col`` of the grid patch the token came from.
    """

    tokens: np.ndarray
    provenance: np.ndarray
    grid: tuple[int, int]

    def __post_init__(self):
        tokens = as_tensor(self.tokens, "tokens")
        prov = np.asarray(self.provenance, dtype=np.int64)
        if tokens.ndim != 2:
            raise ValueError(f"tokens must be rank 2, got {tokens.shape}")
        if prov.shape != (tokens.shape[0],):
            raise ValueError("provenance length must equal the token count")
        if prov.size == 0 or prov[0] != CLS or np.count_nonzero(prov == CLS) != 1:
            raise ValueError("exactly one [CLS] token is required, at row 0")
        rows, cols = self.grid
        if prov.size and (prov.min() < TEXT or prov.max() >= rows * cols):
            raise ValueError("provenance entry outside the patch grid")
        object.__setattr__(self, "tokens", tokens)
        object.__setattr__(self, "provenance", prov)
        object.__setattr__(self, "grid", (int(rows), int(cols)))

    def __len__(self) -> int:
        return self.tokens.shape[0]

    @property
    def width(self) -> int:
        return self.tokens.shape[1]

    def with_tokens(self, tokens) -> "TokenSequence":
        return TokenSequence(tokens, self.provenance, self.grid)

    def grid_coords(self, i: int) -> tuple[int, int] | None:
        p = int(self.provenance[i])
        if p < 0:
            return None
        return divmod(p, self.grid[1])


@dataclass(frozen=True)
class SelectionOutcome:
    """Result of one selection event.

    ``kept_indices`` index the candidate block (0 = first token after the
    fixed prefix), ascending. ``fused_mass`` is the total score of the
    inattentive tokens.
    """

    scores: np.ndarray
    kept_indices: list[int]
    fused_mass: float
    k: int
    n: int
    n_fixed: int = 1
    candidate_provenance: np.ndarray = field(default=None, repr=False)

    @property
    def dropped_indices(self) -> list[int]:
        kept = set(self.kept_indices)
        return [i for i in range(self.n) if i not in kept]

    @property
    def tie_margin(self) -> float:
        """Gap between the k-th and (k+1)-th largest score (inf when k = n)."""
        if self.k >= self.n:
            return math.inf
        ordered = np.sort(self.scores)[::-1]
        return float(ordered[self.k - 1] - ordered[self.k])


def td_att_scores(t_cls, v_post, wq_shared: LinearLayer, wk: LinearLayer | None = None) -> np.ndarray:
    """Softmax of the projected text [CLS] against the patch tokens.

    ``v_post`` includes the image [CLS] at row 0, which is excluded. The
    scale is the full model width, ``1/sqrt(d)``. With ``wk`` given, the
    patch tokens are key-projected first.
    """
    t_cls = as_tensor(t_cls, "t_cls").ravel()
    v_post = as_tensor(v_post, "v_post")
    d = v_post.shape[1]
    if t_cls.shape[0] != d or wq_shared.in_features != d:
        raise ValueError(f"guidance width {t_cls.shape[0]} does not match token width {d}")
    q_text = linear_apply(wq_shared, t_cls[None, :])[0]
    patches = v_post[1:]
    if wk is not None:
        patches = linear_apply(wk, patches)
    return softmax_rows((patches @ q_text / math.sqrt(d))[None, :])[0]


def image_cls_scores(maps) -> np.ndarray:
    """Head-averaged attention of the [CLS] query over the other tokens."""
    maps = as_tensor(maps, "maps")
    row = maps[:, 0, 1:].mean(axis=0)
    return row / row.sum()


def multimodal_cls_scores(maps, image_positions) -> np.ndarray:
    """[CLS] attention restricted to image columns, head-averaged and renormalized."""
    maps = as_tensor(maps, "maps")
    positions = np.asarray(image_positions, dtype=np.int64)
    if positions.size == 0:
        raise DegenerateGuidanceError("no image positions to score")
    row = maps[:, 0, positions].mean(axis=0)
    total = row.sum()
    if total == 0.0:
        raise DegenerateGuidanceError("[CLS] attention mass on image tokens is zero")
    return row / total


def select_and_fuse(
    seq: TokenSequence,
    scores,
    rate: float,
    *,
    fuse: bool = True,
    rounding: str = "floor",
    n_fixed: int = 1,
) -> tuple[TokenSequence, SelectionOutcome]:
    """Keep the top-scoring candidates and fuse the rest into one token.

    Rows ``[0, n_fixed)`` are never scored or pruned; the remaining rows are
    the candidates, and ``scores`` holds one weight per candidate. The output
    is ``[fixed..., kept..., fused]`` (no fused row when ``fuse`` is false).
    When every candidate is kept the fused token is the zero vector.
    """
    if not 0 < rate <= 1:
        raise ValueError(f"keep rate must be in (0, 1], got {rate}")
    scores = as_tensor(scores, "scores").ravel()
    candidates = seq.tokens[n_fixed:]
    n = candidates.shape[0]
    if n < 2:
        raise ValueError(f"need at least 2 candidate tokens, got {n}")
    if scores.shape[0] != n:
        raise ValueError(f"expected {n} scores, got {scores.shape[0]}")
    k = keep_count(n, rate, rounding)
    kept = top_k_indices(scores, k)
    is_kept = np.zeros(n, dtype=bool)
    is_kept[kept] = True
    dropped = np.flatnonzero(~is_kept)
    fused_mass = float(scores[dropped].sum())
    cand_prov = seq.provenance[n_fixed:]

    rows = [seq.tokens[:n_fixed], candidates[kept]]
    prov = [seq.provenance[:n_fixed], cand_prov[kept]]
    if fuse:
        fused = scores[dropped] @ candidates[dropped] if dropped.size else np.zeros(seq.width)
        rows.append(fused[None, :])
        prov.append(np.array([FUSED]))
    out = TokenSequence(np.concatenate(rows), np.concatenate(prov), seq.grid)
    outcome = SelectionOutcome(scores, kept, fused_mass, k, n, n_fixed, cand_prov.copy())
    return out, outcome


def selection_scores(mode: GuidanceMode, mhsa: MhsaLayer, v_post, maps, guidance, n_fixed: int = 1):
    if mode.source is GuidanceSource.MULTIMODAL_CLS:
        return multimodal_cls_scores(maps, np.arange(n_fixed, maps.shape[-1]))
    if n_fixed != 1:
        raise ValueError(f"{mode.source.value} guidance expects only [CLS] before the patches")
    if mode.needs_guidance_vector:
        if guidance is None:
            raise ValueError("text-cls guidance needs a guidance vector")
        wk = mhsa.wk if mode.key_projected else None
        return td_att_scores(guidance, v_post, mhsa.wq, wk)
    return image_cls_scores(maps)


def selection_layer_forward(
    mhsa: MhsaLayer,
    ffn: FfnBlock,
    seq: TokenSequence,
    guidance,
    rate: float,
    mode: GuidanceMode = GuidanceMode(),
    *,
    n_fixed: int = 1,
    rounding: str = "floor",
    norm_first: bool = False,
):
    """Self-attention, scoring, select-and-fuse, then FFN on the shorter sequence."""
    v_post, maps = sa_block(mhsa, seq.tokens, norm_first)
    scores = selection_scores(mode, mhsa, v_post, maps, guidance, n_fixed)
    reduced, outcome = select_and_fuse(
        seq.with_tokens(v_post),
        scores,
        rate,
        fuse=not mode.disable_fusion,
        rounding=rounding,
        n_fixed=n_fixed,
    )
    out = reduced.with_tokens(ffn_block(ffn, reduced.tokens, norm_first))
    return out, outcome, maps
