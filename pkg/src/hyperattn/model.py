"""A tiny decoder-only language model with pluggable image-text fusion.

Variants:

``hyper``           HATBs at ``hatb_indices``, plain blocks elsewhere.
``pre_cross``       gated cross-attention sub-layer before the block's input
                    layer norm at ``hatb_indices``.
``post_cross``      the same sub-layer after the layer norm that follows
                    self-attention (just before the FFN) at ``hatb_indices``.
``flamingo_dense``  the pre-cross sub-layer at every layer.
``concat``          no cross-attention; projected visual tokens are spliced
                    into the sequence right after their placeholder.

Base weights (embeddings, blocks, final norm, head, vision projection) are
drawn from a seed stream that does not depend on the variant, so all variants
built from one seed share them exactly.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .hyperattention import (
    AttentionInputs,
    BlockParams,
    CrossParams,
    HatbParams,
    block_backward,
    block_forward,
    cross_sublayer_backward,
    cross_sublayer_forward,
    hatb_backward,
    hatb_forward,
    load_tensors,
    save_tensors,
)
from .interleave import InterleavedSequence, build_cross_mask, build_rope_map, expand_to_patches
from .ops import ROPE_BASE, Trace, layer_norm_backward, layer_norm_forward, softmax_cross_entropy

VARIANTS = ("concat", "pre_cross", "post_cross", "flamingo_dense", "hyper")

# Palette for synthetic images; the stub writes these into the first feature
# coordinates so a probe can read them back.
SHAPES = ("circle", "square", "triangle", "star", "hexagon", "cross")
COLORS = ("red", "green", "blue", "yellow", "purple", "orange", "black", "white")
DESCRIPTOR_DIM = len(SHAPES) + len(COLORS)


def default_hatb_indices(n_layers: int, k: int) -> list[int]:
    if not 1 <= k <= n_layers:
        raise ValueError(f"need 1 <= k <= n_layers, got k={k}, n_layers={n_layers}")
    return [i * n_layers // k for i in range(k)]


@dataclass
class ModelConfig:
    hidden_dim: int = 64
    n_heads: int = 4
    n_layers: int = 8
    ffn_dim: int = 256
    vocab_size: int = 512
    patches_per_slot: int = 16
    hatb_indices: list[int] | None = None
    variant: str = "hyper"
    seed: int = 0
    vision_dim: int = 32
    rope_base: float = ROPE_BASE
    image_token_id: int | None = None
    adaptive_gate: bool = True
    shared_layernorm: bool = True
    mi_rope: bool = True
    gate_bias: bool = False

    def __post_init__(self):
        if self.hidden_dim % self.n_heads:
            raise ValueError(f"hidden_dim {self.hidden_dim} not divisible by n_heads {self.n_heads}")
        if self.head_dim % 2:
            raise ValueError("head_dim must be even")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.hatb_indices is None:
            self.hatb_indices = default_hatb_indices(self.n_layers, min(4, self.n_layers))
        self.hatb_indices = [int(i) for i in self.hatb_indices]
        idx = self.hatb_indices
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ValueError(f"hatb_indices must be strictly increasing, got {idx}")
        if idx and (idx[0] < 0 or idx[-1] >= self.n_layers):
            raise ValueError(f"hatb_indices {idx} outside [0, {self.n_layers})")
        if self.image_token_id is None:
            self.image_token_id = self.vocab_size - 1
        if not 0 <= self.image_token_id < self.vocab_size:
            raise ValueError("image_token_id outside the vocabulary")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.n_heads

    def fusion_layers(self) -> list[int]:
        if self.variant == "concat":
            return []
        if self.variant == "flamingo_dense":
            return list(range(self.n_layers))
        return list(self.hatb_indices)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        data = json.loads(text)
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown ModelConfig fields: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path) -> "ModelConfig":
        return cls.from_json(Path(path).read_text())


@dataclass
class Layer:
    kind: str  # plain | hyper | pre_cross | post_cross
    block: BlockParams
    hatb: HatbParams | None = None
    cross: CrossParams | None = None


@dataclass
class Model:
    config: ModelConfig
    embed: np.ndarray
    vis_proj_w: np.ndarray
    vis_proj_b: np.ndarray
    layers: list[Layer]
    final_ln_g: np.ndarray
    final_ln_b: np.ndarray
    head: np.ndarray

    def named_parameters(self) -> dict[str, np.ndarray]:
        out = {"embed": self.embed, "vis_proj.w": self.vis_proj_w, "vis_proj.b": self.vis_proj_b}
        for i, layer in enumerate(self.layers):
            for k, v in layer.block.named_arrays().items():
                out[f"layers.{i}.{k}"] = v
            if layer.hatb is not None:
                for k, v in layer.hatb.own_arrays().items():
                    out[f"layers.{i}.hatb.{k}"] = v
            if layer.cross is not None:
                for k, v in layer.cross.named_arrays().items():
                    out[f"layers.{i}.cross.{k}"] = v
        out["final_ln.g"] = self.final_ln_g
        out["final_ln.b"] = self.final_ln_b
        out["head"] = self.head
        return out


def build_model(config: ModelConfig) -> Model:
    D, V = config.hidden_dim, config.vocab_size
    base = np.random.default_rng([config.seed, 0])
    extra = np.random.default_rng([config.seed, 1])
    embed = base.standard_normal((V, D))
    vis_w = base.standard_normal((D, config.vision_dim)) * config.vision_dim**-0.5
    vis_b = np.zeros(D)
    blocks = [BlockParams.init(base, D, config.n_heads, config.ffn_dim) for _ in range(config.n_layers)]
    head = base.standard_normal((V, D)) * D**-0.5

    fusion = set(config.fusion_layers())
    layers = []
    for i, block in enumerate(blocks):
        if i not in fusion:
            layers.append(Layer("plain", block))
        elif config.variant == "hyper":
            hatb = HatbParams.from_host(
                block,
                gate_bias=config.gate_bias,
                shared_layernorm=config.shared_layernorm,
                adaptive_gate=config.adaptive_gate,
                mi_rope=config.mi_rope,
                rope_base=config.rope_base,
            )
            layers.append(Layer("hyper", block, hatb=hatb))
        else:
            kind = "post_cross" if config.variant == "post_cross" else "pre_cross"
            layers.append(Layer(kind, block, cross=CrossParams.init(extra, D, config.n_heads)))
    return Model(config, embed, vis_w, vis_b, layers, np.ones(D), np.zeros(D), head)


def save_weights(model: Model, path) -> None:
    save_tensors(model.named_parameters(), path)


def load_weights(model: Model, path) -> Model:
    """Copy tensors from a fixture file into ``model`` in place."""
    tensors = load_tensors(path)
    params = model.named_parameters()
    if set(tensors) != set(params):
        missing, extra = sorted(set(params) - set(tensors)), sorted(set(tensors) - set(params))
        raise ValueError(f"weight names differ: missing {missing[:5]}, unexpected {extra[:5]}")
    for name, a in tensors.items():
        if a.shape != params[name].shape:
            raise ValueError(f"{name}: shape {a.shape} != {params[name].shape}")
        params[name][...] = a
    return model


# -- vision stub ----------------------------------------------------------------


def descriptor_image_id(shape: str, color: str, uid: str) -> str:
    if shape not in SHAPES or color not in COLORS:
        raise ValueError(f"descriptor ({shape}, {color}) not in palette")
    return f"desc:{shape}:{color}:{uid}"


def parse_descriptor(image_id: str) -> tuple[str, str] | None:
    parts = image_id.split("@")[0].split(":")
    if len(parts) >= 3 and parts[0] == "desc" and parts[1] in SHAPES and parts[2] in COLORS:
        return parts[1], parts[2]
    return None


def read_descriptor(patch: np.ndarray) -> tuple[str, str]:
    """Recover (shape, color) from one stub feature row."""
    return SHAPES[int(np.argmax(patch[: len(SHAPES)]))], COLORS[int(np.argmax(patch[len(SHAPES):DESCRIPTOR_DIM]))]


def _key(image_id: str) -> int:
    return int.from_bytes(hashlib.blake2b(image_id.encode(), digest_size=8).digest(), "little")


def encode_images_stub(image_ids, patches_per_slot: int, seed: int, dim: int = 32) -> np.ndarray:
    """Deterministic stand-in for a frozen vision encoder: ``[n_images, patches, dim]``.

    Each image gets Gaussian features keyed by ``(image_id, seed)``.  Ids made
    by :func:`descriptor_image_id` additionally carry a one-hot shape and a
    one-hot color in their first coordinates.
    """
    out = np.empty((len(image_ids), patches_per_slot, dim))
    for i, image_id in enumerate(image_ids):
        rng = np.random.default_rng([seed, _key(image_id)])
        out[i] = rng.standard_normal((patches_per_slot, dim))
        desc = parse_descriptor(image_id)
        if desc is not None:
            if dim < DESCRIPTOR_DIM:
                raise ValueError(f"feature dim {dim} too small to hold a descriptor")
            out[i, :, :DESCRIPTOR_DIM] = 0.0
            out[i, :, SHAPES.index(desc[0])] = 1.0
            out[i, :, len(SHAPES) + COLORS.index(desc[1])] = 1.0
    return out


def sequence_features(model: Model, seq: InterleavedSequence, seed: int = 0) -> np.ndarray:
    cfg = model.config
    return encode_images_stub(seq.slot_keys(), cfg.patches_per_slot, seed, cfg.vision_dim)


# -- forward / backward ---------------------------------------------------------


@dataclass
class ModelOutput:
    hidden: np.ndarray  # last block output [lm_seq_len, D]
    logits: np.ndarray  # [lm_seq_len, vocab]
    text_index: np.ndarray  # row of each text token in the LM sequence
    trace: Trace
    cache: dict | None = None


def _visual_rows(model, seq, features):
    cfg = model.config
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim == 3:
        if feats.shape[0] != seq.num_slots or feats.shape[1] != cfg.patches_per_slot:
            raise ValueError(
                f"features {feats.shape} do not match {seq.num_slots} slots x {cfg.patches_per_slot} patches"
            )
        feats = feats.reshape(-1, feats.shape[-1])
    elif feats.ndim != 2 or feats.shape[0] != seq.num_slots * cfg.patches_per_slot:
        raise ValueError(f"features {feats.shape} do not match {seq.num_slots} slots")
    if feats.shape[1] != cfg.vision_dim:
        raise ValueError(f"feature dim {feats.shape[1]} != vision_dim {cfg.vision_dim}")
    return feats


def forward(model: Model, seq: InterleavedSequence, features=None, trace: Trace | None = None,
            keep_cache: bool = False) -> ModelOutput:
    cfg = model.config
    if seq.image_token_id != cfg.image_token_id:
        raise ValueError("sequence and model disagree on the image token id")
    if features is None:
        features = np.zeros((seq.num_slots, cfg.patches_per_slot, cfg.vision_dim))
    feats = _visual_rows(model, seq, features)
    trace = Trace() if trace is None else trace
    base = cfg.rope_base
    tokens = np.asarray(seq.tokens, dtype=np.int64)
    L, v = len(tokens), cfg.patches_per_slot
    h_img = feats @ model.vis_proj_w.T + model.vis_proj_b
    h = model.embed[tokens]
    cache = {"tokens": tokens, "feats": feats}

    if cfg.variant == "concat":
        order, text_index = [], []
        by_pos: dict[int, list[int]] = {}
        for s in seq.image_slots:
            by_pos.setdefault(s.placeholder_position, []).append(s.slot_index)
        for t in range(L):
            text_index.append(len(order))
            order.append(t)
            for s in by_pos.get(t, ()):
                order.extend(range(L + s * v, L + (s + 1) * v))
        order = np.asarray(order, dtype=np.int64)
        h = np.concatenate([h, h_img], axis=0)[order]
        cache["order"] = order
        text_index = np.asarray(text_index, dtype=np.int64)
    else:
        text_index = np.arange(L)
    positions = np.arange(h.shape[0])
    trace.lm_seq_len = h.shape[0]

    rope_map = build_rope_map(seq)
    vis_pos, mask = expand_to_patches(rope_map, build_cross_mask(seq), v)
    cross_vis_pos = vis_pos if cfg.mi_rope else None

    layer_caches = []
    for layer in model.layers:
        if layer.kind == "plain":
            h, lc = block_forward(h, layer.block, positions, base, trace)
        elif layer.kind == "hyper":
            inputs = AttentionInputs(h, h_img, positions, vis_pos, mask)
            out = hatb_forward(inputs, layer.hatb, trace, keep_cache=keep_cache)
            lc = (inputs, out)
            h = out.h_out
        elif layer.kind == "pre_cross":
            h, cc = cross_sublayer_forward(h, h_img, layer.cross, positions, cross_vis_pos, mask, base, trace)
            h, bc = block_forward(h, layer.block, positions, base, trace)
            lc = (cc, bc)
        elif layer.kind == "post_cross":
            mid = (layer.cross, h_img, cross_vis_pos, mask)
            h, lc = block_forward(h, layer.block, positions, base, trace, mid=mid)
        else:
            raise ValueError(f"unknown layer kind {layer.kind!r}")
        layer_caches.append(lc)

    hidden = h
    x, fln = layer_norm_forward(hidden, model.final_ln_g, model.final_ln_b)
    logits = x @ model.head.T
    if keep_cache:
        cache.update(layers=layer_caches, final_ln=fln, x=x)
    return ModelOutput(hidden, logits, text_index, trace, cache if keep_cache else None)


def backward(model: Model, out: ModelOutput, dlogits: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of ``sum(dlogits * logits)`` for every named parameter."""
    if out.cache is None or "layers" not in out.cache:
        raise ValueError("backward needs a forward pass run with keep_cache=True")
    cfg = model.config
    c = out.cache
    params = model.named_parameters()
    grads = {k: np.zeros_like(a) for k, a in params.items()}
    base = cfg.rope_base

    grads["head"] += dlogits.T @ c["x"]
    dh, dg, db = layer_norm_backward(dlogits @ model.head, c["final_ln"])
    grads["final_ln.g"] += dg
    grads["final_ln.b"] += db
    dh_img = np.zeros((c["feats"].shape[0], cfg.hidden_dim))

    for i in reversed(range(len(model.layers))):
        layer, lc = model.layers[i], c["layers"][i]
        prefix = f"layers.{i}."
        if layer.kind == "plain":
            dh, bg, _ = block_backward(dh, lc, layer.block, base)
        elif layer.kind == "hyper":
            inputs, hout = lc
            g = hatb_backward(inputs, layer.hatb, dh, hout)
            dh = g.pop("h_text")
            dh_img += g.pop("h_img")
            bg = {k[5:]: v for k, v in g.items() if k.startswith("host.")}
            for k, v in g.items():
                if not k.startswith("host."):
                    grads[prefix + "hatb." + k] += v
        elif layer.kind == "pre_cross":
            cc, bc = lc
            dh, bg, _ = block_backward(dh, bc, layer.block, base)
            dh, di, cg = cross_sublayer_backward(dh, cc, layer.cross, base)
            dh_img += di
            for k, v in cg.items():
                grads[prefix + "cross." + k] += v
        else:
            dh, bg, (di, cg) = block_backward(dh, lc, layer.block, base, mid_params=layer.cross)
            dh_img += di
            for k, v in cg.items():
                grads[prefix + "cross." + k] += v
        for k, v in bg.items():
            grads[prefix + k] += v

    tokens = c["tokens"]
    if cfg.variant == "concat":
        L = len(tokens)
        dcomb = np.zeros((dh.shape[0], dh.shape[1]))
        dcomb[c["order"]] = dh
        dh, dh_img = dcomb[:L], dh_img + dcomb[L:]
    np.add.at(grads["embed"], tokens, dh)
    grads["vis_proj.w"] += dh_img.T @ c["feats"]
    grads["vis_proj.b"] += dh_img.sum(axis=0)
    return grads


# -- training -------------------------------------------------------------------


def loss_and_grads(model: Model, batch, with_grads: bool = True):
    """Mean next-token cross entropy over all text tokens in ``batch``.

    ``batch`` is a list of ``(InterleavedSequence, features)`` pairs.
    """
    total = sum(len(seq.tokens) - 1 for seq, _ in batch)
    if total <= 0:
        raise ValueError("batch has no next-token targets")
    loss = 0.0
    grads = None
    for seq, feats in batch:
        out = forward(model, seq, feats, keep_cache=with_grads)
        idx = out.text_index[:-1]
        targets = np.asarray(seq.tokens[1:], dtype=np.int64)
        l, dl = softmax_cross_entropy(out.logits[idx], targets)
        n = len(targets)
        loss += l * n / total
        if with_grads:
            dlogits = np.zeros_like(out.logits)
            dlogits[idx] = dl * (n / total)
            g = backward(model, out, dlogits)
            grads = g if grads is None else {k: grads[k] + g[k] for k in grads}
    return loss, grads


def overfit_step(model: Model, batch, lr: float) -> float:
    """One full-batch gradient-descent step; returns the loss before the step."""
    loss, grads = loss_and_grads(model, batch)
    if not np.isfinite(loss):
        raise FloatingPointError(f"non-finite loss {loss}")
    params = model.named_parameters()
    for k, g in grads.items():
        params[k] -= lr * g
    return float(loss)


# -- parameter accounting -------------------------------------------------------


@dataclass
class ParamBreakdown:
    base: int
    added_by_fusion: int
    groups: dict[str, int] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return self.base + self.added_by_fusion


def count_params(model: Model) -> ParamBreakdown:
    groups: dict[str, int] = {}
    for name, a in model.named_parameters().items():
        parts = name.split(".")
        if parts[0] == "layers":
            group = "fusion" if parts[2] in ("hatb", "cross") else "blocks"
        elif parts[0] == "vis_proj":
            group = "vision_projection"
        else:
            group = parts[0]
        groups[group] = groups.get(group, 0) + a.size
    added = groups.get("fusion", 0)
    return ParamBreakdown(sum(groups.values()) - added, added, groups)
