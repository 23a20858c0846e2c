"""Hyper Attention Transformer Block (HATB).

A HATB is an ordinary pre-norm transformer block whose attention step also
runs a masked cross-attention from the text tokens to visual features, in
parallel with causal self-attention:

* the block's own input layer norm normalizes both the text stream and the
  visual stream (shared γ/β);
* visual keys/values come from one extra ``[2D, D]`` projection, initialised
  from the host block's K and V weights;
* the cross branch reuses the self-attention query (already rotated with the
  token positions) and the host output projection;
* visual keys are rotated with the position of their image's placeholder
  token, and token ``t`` only sees images whose placeholder is at or before
  ``t``;
* a per-token gate ``g = sigmoid(h_self · w_gate)`` blends the two branches:
  ``fused = h_cross * g + h_self * (1 - g)``.

Tokens that see no image skip the blend and keep ``h_self`` unchanged, so a
block with no images is bit-for-bit the host block.

The module also holds the plain block and the gated cross-attention sub-layer
used by the pre-/post-cross and dense (Flamingo-style) baselines, each with a
hand-written backward pass.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .interleave import InterleavedSequence, build_cross_mask, build_rope_map, expand_to_patches
from .ops import (
    ROPE_BASE,
    Trace,
    apply_rotary,
    apply_rotary_backward,
    attention_backward,
    attention_forward,
    gelu_backward,
    gelu_forward,
    layer_norm_backward,
    layer_norm_forward,
    sigmoid,
)

BLOCK_ARRAYS = ("ln1_g", "ln1_b", "wq", "wk", "wv", "wo", "ln2_g", "ln2_b", "w1", "b1", "w2", "b2")
CROSS_ARRAYS = ("ln_g", "ln_b", "wq", "w_kv", "wo", "w_gate")


def _normal(rng, shape, std):
    return rng.standard_normal(shape) * std


@dataclass
class BlockParams:
    """Weights of a standard pre-norm block (linear maps stored ``[out, in]``)."""

    n_heads: int
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    ln2_g: np.ndarray
    ln2_b: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @property
    def dim(self) -> int:
        return self.wq.shape[0]

    @property
    def head_dim(self) -> int:
        return self.dim // self.n_heads

    def named_arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in BLOCK_ARRAYS}

    @classmethod
    def init(cls, rng, dim, n_heads, ffn_dim, std=None, jitter_norms=False):
        if dim % n_heads:
            raise ValueError(f"hidden dim {dim} not divisible by {n_heads} heads")
        if (dim // n_heads) % 2:
            raise ValueError("head dim must be even for rotary embeddings")
        std_ffn = ffn_dim**-0.5 if std is None else std
        std = dim**-0.5 if std is None else std
        ones, zeros = np.ones(dim), np.zeros(dim)
        if jitter_norms:
            ones = 1.0 + 0.2 * rng.standard_normal(dim)
            zeros = 0.1 * rng.standard_normal(dim)
        return cls(
            n_heads=n_heads,
            ln1_g=ones.copy(),
            ln1_b=zeros.copy(),
            wq=_normal(rng, (dim, dim), std),
            wk=_normal(rng, (dim, dim), std),
            wv=_normal(rng, (dim, dim), std),
            wo=_normal(rng, (dim, dim), std),
            ln2_g=ones.copy(),
            ln2_b=zeros.copy(),
            w1=_normal(rng, (ffn_dim, dim), std),
            b1=np.zeros(ffn_dim) if not jitter_norms else 0.1 * rng.standard_normal(ffn_dim),
            w2=_normal(rng, (dim, ffn_dim), std_ffn),
            b2=np.zeros(dim) if not jitter_norms else 0.1 * rng.standard_normal(dim),
        )


@dataclass
class HatbParams:
    """Extra weights a HATB adds on top of its host block.

    ``img_ln_g``/``img_ln_b`` exist only when the visual stream gets its own
    layer norm, and ``gate_scale`` only when the adaptive gate is replaced by
    a single learnable scale (both are ablation settings).
    """

    host: BlockParams
    w_kv_img: np.ndarray
    w_gate: np.ndarray
    gate_bias: np.ndarray | None = None
    img_ln_g: np.ndarray | None = None
    img_ln_b: np.ndarray | None = None
    gate_scale: np.ndarray | None = None
    mi_rope: bool = True
    rope_base: float = ROPE_BASE

    @property
    def shared_layernorm(self) -> bool:
        return self.img_ln_g is None

    @property
    def adaptive_gate(self) -> bool:
        return self.gate_scale is None

    @classmethod
    def from_host(
        cls,
        host: BlockParams,
        gate_bias: bool = False,
        shared_layernorm: bool = True,
        adaptive_gate: bool = True,
        mi_rope: bool = True,
        rope_base: float = ROPE_BASE,
    ) -> "HatbParams":
        dim = host.dim
        return cls(
            host=host,
            w_kv_img=np.concatenate([host.wk, host.wv], axis=0).copy(),
            w_gate=np.zeros(dim),
            gate_bias=np.zeros(1) if gate_bias else None,
            img_ln_g=None if shared_layernorm else host.ln1_g.copy(),
            img_ln_b=None if shared_layernorm else host.ln1_b.copy(),
            gate_scale=None if adaptive_gate else np.zeros(1),
            mi_rope=mi_rope,
            rope_base=rope_base,
        )

    def own_arrays(self) -> dict[str, np.ndarray]:
        names = ("w_kv_img", "w_gate", "gate_bias", "img_ln_g", "img_ln_b", "gate_scale")
        out = {n: getattr(self, n) for n in names if getattr(self, n) is not None}
        if not self.adaptive_gate:
            out.pop("w_gate")
        return out

    def named_arrays(self) -> dict[str, np.ndarray]:
        out = {f"host.{k}": v for k, v in self.host.named_arrays().items()}
        out.update(self.own_arrays())
        return out

    def added_parameter_count(self) -> int:
        return sum(a.size for a in self.own_arrays().values())


@dataclass
class CrossParams:
    """Gated cross-attention sub-layer used by the pre/post/dense baselines."""

    n_heads: int
    ln_g: np.ndarray
    ln_b: np.ndarray
    wq: np.ndarray
    w_kv: np.ndarray
    wo: np.ndarray
    w_gate: np.ndarray

    @property
    def dim(self) -> int:
        return self.wq.shape[0]

    def named_arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in CROSS_ARRAYS}

    @classmethod
    def init(cls, rng, dim, n_heads, std=None):
        std = dim**-0.5 if std is None else std
        return cls(
            n_heads=n_heads,
            ln_g=np.ones(dim),
            ln_b=np.zeros(dim),
            wq=_normal(rng, (dim, dim), std),
            w_kv=_normal(rng, (2 * dim, dim), std),
            wo=_normal(rng, (dim, dim), std),
            w_gate=np.zeros(dim),
        )


@dataclass
class AttentionInputs:
    h_text: np.ndarray  # [L, D]
    h_img: np.ndarray  # [M, D], M = slots * patches
    query_positions: np.ndarray  # [L]
    visual_positions: np.ndarray  # [M]
    cross_mask: np.ndarray  # bool [L, M]

    def __post_init__(self):
        L, M = self.h_text.shape[0], self.h_img.shape[0]
        if self.h_img.ndim != 2 or self.h_img.shape[1] != self.h_text.shape[1]:
            raise ValueError("text and image streams must share the hidden size")
        if self.cross_mask.shape != (L, M):
            raise ValueError(f"cross mask shape {self.cross_mask.shape} does not match ({L}, {M})")
        if len(self.query_positions) != L or len(self.visual_positions) != M:
            raise ValueError("position arrays do not match stream lengths")

    @classmethod
    def from_sequence(cls, seq: InterleavedSequence, h_text, h_img, patches_per_slot):
        if h_img.shape[0] != seq.num_slots * patches_per_slot:
            raise ValueError(
                f"expected {seq.num_slots * patches_per_slot} visual rows, got {h_img.shape[0]}"
            )
        rope_map = build_rope_map(seq)
        vis_pos, mask = expand_to_patches(rope_map, build_cross_mask(seq), patches_per_slot)
        return cls(h_text, h_img, rope_map.query_positions, vis_pos, mask)


@dataclass
class HatbOutput:
    h_out: np.ndarray  # block output after FFN and both residual adds
    h_fused: np.ndarray
    h_self: np.ndarray
    h_cross: np.ndarray
    gate: np.ndarray
    bypass: np.ndarray
    self_probs: np.ndarray
    cross_probs: np.ndarray
    cache: dict | None = None


# -- tensor fixture format ------------------------------------------------------
#
#   {"format": "tensors-v1",
#    "tensors": [{"name": "...", "shape": [2, 3], "values": [row-major floats]}]}
#
# Floats are written with Python's shortest round-trip repr, so a save/load
# cycle reproduces every f64 bit.

TENSOR_FORMAT = "tensors-v1"


def dumps_tensors(tensors: dict[str, np.ndarray]) -> str:
    records = []
    for name, a in tensors.items():
        a = np.asarray(a, dtype=np.float64)
        if not np.all(np.isfinite(a)):
            raise ValueError(f"tensor {name!r} has non-finite values")
        records.append({"name": name, "shape": list(a.shape), "values": a.ravel().tolist()})
    return json.dumps({"format": TENSOR_FORMAT, "tensors": records})


def loads_tensors(text_: str) -> dict[str, np.ndarray]:
    doc = json.loads(text_)
    if doc.get("format") != TENSOR_FORMAT:
        raise ValueError(f"expected format {TENSOR_FORMAT!r}, got {doc.get('format')!r}")
    out = {}
    for rec in doc["tensors"]:
        shape = tuple(rec["shape"])
        values = np.asarray(rec["values"], dtype=np.float64)
        if values.size != int(np.prod(shape)):
            raise ValueError(f"tensor {rec['name']!r}: {values.size} values for shape {shape}")
        if rec["name"] in out:
            raise ValueError(f"duplicate tensor {rec['name']!r}")
        out[rec["name"]] = values.reshape(shape)
    return out


def save_tensors(tensors, path) -> None:
    Path(path).write_text(dumps_tensors(tensors))


def load_tensors(path) -> dict[str, np.ndarray]:
    return loads_tensors(Path(path).read_text())


# -- HATB building blocks -------------------------------------------------------


def shared_layernorm(h_text, h_img, host_ln):
    gamma, beta = host_ln
    n_text, _ = layer_norm_forward(h_text, gamma, beta)
    n_img, _ = layer_norm_forward(h_img, gamma, beta)
    return n_text, n_img


def project_visual_kv(n_img, w_kv_img):
    dim = n_img.shape[1]
    if w_kv_img.shape != (2 * dim, dim):
        raise ValueError(f"w_kv_img must be {(2 * dim, dim)}, got {w_kv_img.shape}")
    kv = n_img @ w_kv_img.T
    return kv[:, :dim], kv[:, dim:]


def cross_attention(q_text, k_img, v_img, visual_positions, cross_mask, w_o, rope_base=ROPE_BASE, trace=None):
    """Masked cross-attention from (rotated) text queries to visual keys.

    ``visual_positions=None`` leaves visual keys unrotated.  Returns
    ``(h_cross, bypass, cache)`` where ``bypass[t]`` marks tokens that see no
    visual key; their ``h_cross`` row is zero.
    """
    L, H, dh = q_text.shape
    M = k_img.shape[0]
    if cross_mask.shape != (L, M):
        raise ValueError(f"cross mask shape {cross_mask.shape} does not match ({L}, {M})")
    k = k_img.reshape(M, H, dh)
    v = v_img.reshape(M, H, dh)
    if visual_positions is not None:
        k = apply_rotary(k, visual_positions, rope_base)
    ctx, acache = attention_forward(q_text, k, v, cross_mask)
    if trace is not None:
        trace.record_attention("cross", L, M, H * dh, H)
    ctx = ctx.reshape(L, H * dh)
    h_cross = ctx @ w_o.T
    bypass = ~cross_mask.any(axis=1)
    return h_cross, bypass, {"ctx": ctx, "attn": acache, "visual_positions": visual_positions}


def _cross_attention_backward(dh_cross, cache, w_o, rope_base):
    """Returns (d_q_rotated, d_k_img, d_v_img, d_w_o)."""
    ctx = cache["ctx"]
    L, D = ctx.shape
    H = cache["attn"][0].shape[0]
    dwo = dh_cross.T @ ctx
    dctx = (dh_cross @ w_o).reshape(L, H, D // H)
    dq, dk, dv = attention_backward(dctx, cache["attn"])
    if cache["visual_positions"] is not None:
        dk = apply_rotary_backward(dk, cache["visual_positions"], rope_base)
    M = dk.shape[0]
    return dq, dk.reshape(M, D), dv.reshape(M, D), dwo


def adaptive_gate(h_self, w_gate, bias=None):
    z = h_self @ w_gate
    if bias is not None:
        z = z + bias[0]
    return sigmoid(z)


def fuse(h_cross, h_self, gate, bypass):
    if h_cross.shape != h_self.shape or gate.shape != (h_self.shape[0],):
        raise ValueError("fuse: mismatched shapes")
    active = ~bypass
    g = gate[active]
    if np.any(g <= 0.0) or np.any(g >= 1.0):
        raise ValueError("gate must lie strictly inside (0, 1) for fused tokens")
    mixed = h_cross * gate[:, None] + h_self * (1.0 - gate[:, None])
    return np.where(bypass[:, None], h_self, mixed)


# -- standard block pieces ----------------------------------------------------


def _self_attention_forward(n, p: BlockParams, positions, rope_base, trace):
    L, D = n.shape
    H, dh = p.n_heads, p.head_dim
    q = (n @ p.wq.T).reshape(L, H, dh)
    k = (n @ p.wk.T).reshape(L, H, dh)
    v = (n @ p.wv.T).reshape(L, H, dh)
    qr = apply_rotary(q, positions, rope_base)
    kr = apply_rotary(k, positions, rope_base)
    ctx, acache = attention_forward(qr, kr, v, np.tri(L, dtype=bool))
    if trace is not None:
        trace.record_attention("self", L, L, D, H)
    ctx = ctx.reshape(L, D)
    return ctx @ p.wo.T, qr, {"n": n, "ctx": ctx, "attn": acache, "positions": positions}


def _self_attention_backward(dout, dq_extra, cache, p: BlockParams, grads, rope_base):
    n, ctx = cache["n"], cache["ctx"]
    L, D = n.shape
    H, dh = p.n_heads, p.head_dim
    grads["wo"] += dout.T @ ctx
    dctx = (dout @ p.wo).reshape(L, H, dh)
    dqr, dkr, dv = attention_backward(dctx, cache["attn"])
    if dq_extra is not None:
        dqr = dqr + dq_extra
    dq = apply_rotary_backward(dqr, cache["positions"], rope_base).reshape(L, D)
    dk = apply_rotary_backward(dkr, cache["positions"], rope_base).reshape(L, D)
    dv = dv.reshape(L, D)
    grads["wq"] += dq.T @ n
    grads["wk"] += dk.T @ n
    grads["wv"] += dv.T @ n
    return dq @ p.wq + dk @ p.wk + dv @ p.wv


def _ffn_forward(n2, p: BlockParams):
    a = n2 @ p.w1.T + p.b1
    g, gcache = gelu_forward(a)
    return g @ p.w2.T + p.b2, (n2, g, gcache)


def _ffn_backward(df, cache, p: BlockParams, grads):
    n2, g, gcache = cache
    grads["w2"] += df.T @ g
    grads["b2"] += df.sum(axis=0)
    da = gelu_backward(df @ p.w2, gcache)
    grads["w1"] += da.T @ n2
    grads["b1"] += da.sum(axis=0)
    return da @ p.w1


def _zero_grads(arrays):
    return {k: np.zeros_like(v) for k, v in arrays.items()}


# -- gated cross-attention sub-layer (baselines) ------------------------------


def cross_sublayer_forward(
    x, h_img, cp: CrossParams, positions, visual_positions, cross_mask, rope_base=ROPE_BASE, trace=None
):
    """``x + g * CrossAttn(LN(x), LN(h_img))`` with ``g = sigmoid(LN(x) · w_gate)``."""
    L, D = x.shape
    H = cp.n_heads
    n, lnc = layer_norm_forward(x, cp.ln_g, cp.ln_b)
    n_img, lnic = layer_norm_forward(h_img, cp.ln_g, cp.ln_b)
    qr = apply_rotary((n @ cp.wq.T).reshape(L, H, D // H), positions, rope_base)
    k, v = project_visual_kv(n_img, cp.w_kv)
    c, bypass, ccache = cross_attention(qr, k, v, visual_positions, cross_mask, cp.wo, rope_base, trace)
    g = adaptive_gate(n, cp.w_gate)
    out = np.where(bypass[:, None], x, x + g[:, None] * c)
    cache = {"n": n, "n_img": n_img, "ln": lnc, "ln_img": lnic, "c": c, "g": g, "bypass": bypass,
             "cross": ccache, "positions": positions}
    return out, cache


def cross_sublayer_backward(dout, cache, cp: CrossParams, rope_base=ROPE_BASE):
    """Returns ``(dx, dh_img, grads)``."""
    grads = _zero_grads(cp.named_arrays())
    n, n_img, c, g, bypass = cache["n"], cache["n_img"], cache["c"], cache["g"], cache["bypass"]
    L, D = n.shape
    active = (~bypass).astype(dout.dtype)
    dc = dout * (g * active)[:, None]
    dz = (dout * c).sum(axis=1) * active * g * (1.0 - g)
    grads["w_gate"] += n.T @ dz
    dn = dz[:, None] * cp.w_gate[None, :]

    dqr, dk, dv, dwo = _cross_attention_backward(dc, cache["cross"], cp.wo, rope_base)
    grads["wo"] += dwo
    dq = apply_rotary_backward(dqr, cache["positions"], rope_base).reshape(L, D)
    grads["wq"] += dq.T @ n
    dn += dq @ cp.wq
    dkv = np.concatenate([dk, dv], axis=1)
    grads["w_kv"] += dkv.T @ n_img
    dn_img = dkv @ cp.w_kv

    dx, dg1, db1 = layer_norm_backward(dn, cache["ln"])
    dh_img, dg2, db2 = layer_norm_backward(dn_img, cache["ln_img"])
    grads["ln_g"] += dg1 + dg2
    grads["ln_b"] += db1 + db2
    return dout + dx, dh_img, grads


# -- standard block -------------------------------------------------------------


def block_forward(h, p: BlockParams, positions, rope_base=ROPE_BASE, trace=None, mid=None):
    """Plain pre-norm block.

    ``mid`` optionally inserts a cross sub-layer between the second layer norm
    and the FFN (the post-cross baseline); it is a tuple
    ``(CrossParams, h_img, visual_positions, cross_mask)``.
    """
    n, ln1c = layer_norm_forward(h, p.ln1_g, p.ln1_b)
    h_self, _, sac = _self_attention_forward(n, p, positions, rope_base, trace)
    h1 = h + h_self
    n2, ln2c = layer_norm_forward(h1, p.ln2_g, p.ln2_b)
    midc = None
    if mid is not None:
        cp, h_img, vis_pos, mask = mid
        n2, midc = cross_sublayer_forward(n2, h_img, cp, positions, vis_pos, mask, rope_base, trace)
    f, fc = _ffn_forward(n2, p)
    out = h1 + f
    return out, {"ln1": ln1c, "sa": sac, "ln2": ln2c, "ffn": fc, "mid": midc}


def block_backward(dout, cache, p: BlockParams, rope_base=ROPE_BASE, mid_params: CrossParams | None = None):
    """Returns ``(dh, grads, mid_result)``; ``mid_result`` is ``(dh_img, cross_grads)`` or None."""
    grads = _zero_grads(p.named_arrays())
    dn2 = _ffn_backward(dout, cache["ffn"], p, grads)
    mid_result = None
    if cache["mid"] is not None:
        dn2, dh_img, cgrads = cross_sublayer_backward(dn2, cache["mid"], mid_params, rope_base)
        mid_result = (dh_img, cgrads)
    dh1, dg, db = layer_norm_backward(dn2, cache["ln2"])
    grads["ln2_g"] += dg
    grads["ln2_b"] += db
    dh1 = dh1 + dout
    dn = _self_attention_backward(dh1, None, cache["sa"], p, grads, rope_base)
    dh, dg, db = layer_norm_backward(dn, cache["ln1"])
    grads["ln1_g"] += dg
    grads["ln1_b"] += db
    return dh + dh1, grads, mid_result


# -- HATB -----------------------------------------------------------------------


def hatb_forward(inputs: AttentionInputs, params: HatbParams, trace: Trace | None = None, keep_cache=True) -> HatbOutput:
    host = params.host
    base = params.rope_base
    h_text, h_img = inputs.h_text, inputs.h_img

    n_text, ln1c = layer_norm_forward(h_text, host.ln1_g, host.ln1_b)
    if params.shared_layernorm:
        n_img, lnic = layer_norm_forward(h_img, host.ln1_g, host.ln1_b)
    else:
        n_img, lnic = layer_norm_forward(h_img, params.img_ln_g, params.img_ln_b)

    h_self, q_rot, sac = _self_attention_forward(n_text, host, inputs.query_positions, base, trace)
    k_img, v_img = project_visual_kv(n_img, params.w_kv_img)
    vis_pos = inputs.visual_positions if params.mi_rope else None
    h_cross, bypass, ccache = cross_attention(q_rot, k_img, v_img, vis_pos, inputs.cross_mask, host.wo, base, trace)

    if params.adaptive_gate:
        gate = adaptive_gate(h_self, params.w_gate, params.gate_bias)
        h_fused = fuse(h_cross, h_self, gate, bypass)
    else:
        # learnable-scale ablation: fused = h_self + s * h_cross
        gate = np.full(h_self.shape[0], params.gate_scale[0])
        h_fused = np.where(bypass[:, None], h_self, h_self + params.gate_scale[0] * h_cross)

    h1 = h_text + h_fused
    n2, ln2c = layer_norm_forward(h1, host.ln2_g, host.ln2_b)
    f, fc = _ffn_forward(n2, host)
    h_out = h1 + f

    cache = None
    if keep_cache:
        cache = {"ln1": ln1c, "ln_img": lnic, "n_img": n_img, "sa": sac, "cross": ccache,
                 "ln2": ln2c, "ffn": fc}
    return HatbOutput(h_out, h_fused, h_self, h_cross, gate, bypass, sac["attn"][3], ccache["attn"][3], cache)


def hatb_backward(inputs: AttentionInputs, params: HatbParams, upstream_grad, output: HatbOutput) -> dict[str, np.ndarray]:
    """Gradients of ``sum(upstream_grad * h_out)``.

    ``output`` is the result of ``hatb_forward(..., keep_cache=True)``.  Keys
    match ``HatbParams.named_arrays()`` plus ``h_text`` and ``h_img``.
    """
    if output is None or output.cache is None:
        raise ValueError("hatb_backward needs cached forward activations")
    if upstream_grad.shape != inputs.h_text.shape:
        raise ValueError("upstream gradient shape does not match h_text")
    out, c = output, output.cache
    host = params.host
    base = params.rope_base
    hg = _zero_grads(host.named_arrays())
    own = _zero_grads(params.own_arrays())

    dout = upstream_grad
    dn2 = _ffn_backward(dout, c["ffn"], host, hg)
    dh1, dg, db = layer_norm_backward(dn2, c["ln2"])
    hg["ln2_g"] += dg
    hg["ln2_b"] += db
    dh1 = dh1 + dout
    dh_text = dh1.copy()
    dfused = dh1

    bypass = out.bypass
    active = (~bypass).astype(dfused.dtype)[:, None]
    h_self, h_cross, gate = out.h_self, out.h_cross, out.gate
    if params.adaptive_gate:
        g = gate[:, None]
        dh_cross = dfused * g * active
        dh_self = dfused * (1.0 - g) * active + dfused * (1.0 - active)
        dz = (dfused * (h_cross - h_self)).sum(axis=1) * active[:, 0] * gate * (1.0 - gate)
        own["w_gate"] += h_self.T @ dz
        if params.gate_bias is not None:
            own["gate_bias"] += dz.sum()
        dh_self = dh_self + dz[:, None] * params.w_gate[None, :]
    else:
        s = params.gate_scale[0]
        dh_cross = dfused * s * active
        dh_self = dfused
        own["gate_scale"] += (dfused * h_cross * active).sum()

    dq_cross, dk_img, dv_img, dwo = _cross_attention_backward(dh_cross, c["cross"], host.wo, base)
    hg["wo"] += dwo
    dkv = np.concatenate([dk_img, dv_img], axis=1)
    own["w_kv_img"] += dkv.T @ c["n_img"]
    dn_img = dkv @ params.w_kv_img

    dn_text = _self_attention_backward(dh_self, dq_cross, c["sa"], host, hg, base)
    dx, dg, db = layer_norm_backward(dn_text, c["ln1"])
    hg["ln1_g"] += dg
    hg["ln1_b"] += db
    dh_text += dx
    dh_img, dg, db = layer_norm_backward(dn_img, c["ln_img"])
    if params.shared_layernorm:
        hg["ln1_g"] += dg
        hg["ln1_b"] += db
    else:
        own["img_ln_g"] += dg
        own["img_ln_b"] += db

    grads = {f"host.{k}": v for k, v in hg.items()}
    grads.update(own)
    grads["h_text"] = dh_text
    grads["h_img"] = dh_img
    return grads
