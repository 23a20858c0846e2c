"""Hyper-attention fusion for interleaved image-text sequences, at toy scale."""

from .hyperattention import (
    AttentionInputs,
    BlockParams,
    HatbOutput,
    HatbParams,
    adaptive_gate,
    cross_attention,
    fuse,
    hatb_backward,
    hatb_forward,
    load_tensors,
    project_visual_kv,
    save_tensors,
    shared_layernorm,
)
from .interleave import (
    IMAGE_TOKEN,
    IMAGE_TOKEN_ID,
    CrossAttentionMask,
    ImageSlot,
    InterleavedSequence,
    RotaryPositionMap,
    Segment,
    build_cross_mask,
    build_rope_map,
    build_sequence,
    image,
    select_crop_grid,
    text,
    video,
)
from .model import VARIANTS, Model, ModelConfig, build_model, count_params, encode_images_stub, forward
from .ops import apply_rotary

__all__ = [name for name in dir() if not name.startswith("_")]
