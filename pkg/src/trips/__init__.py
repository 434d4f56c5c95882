"""Text-relevant image patch selection for ViT backbones, with an analytic cost model."""

from .attention import (
    CrossAttnLayer,
    FfnBlock,
    LayerNorm,
    MhsaLayer,
    cross_attn_forward,
    ffn_block,
    mhsa_forward,
    sa_block,
)
from .backbone import (
    ConfigError,
    ForwardTrace,
    ModelConfig,
    SelectionConfig,
    ViTTrips,
    encode,
    forward,
    fuse_toy,
    patch_embed,
    placement,
    single_stream_forward,
)
from .cost import (
    CostConfig,
    CostReport,
    FlopsConvention,
    encoder_layer_flops,
    cross_layer_flops,
    model_flops,
    overall_keep_rate,
    speedup_estimate,
    sweep,
    token_schedule,
)
from .kernels import LinearLayer, SeededRng, seeded_init
from .selection import (
    GuidanceMode,
    GuidanceSource,
    SelectionOutcome,
    TokenSequence,
    select_and_fuse,
    selection_layer_forward,
    td_att_scores,
)

__version__ = "0.1.0"
