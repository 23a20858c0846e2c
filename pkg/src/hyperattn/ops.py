"""Array primitives with hand-written backward passes.

Every ``*_forward`` returns ``(output, cache)`` and the matching
``*_backward`` takes the upstream gradient plus that cache.  All arrays are
float64 unless a caller passes something else in.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

LN_EPS = 1e-5
ROPE_BASE = 10000.0


@dataclass
class Trace:
    """Counters filled in during a forward pass (used by the benchmark)."""

    attn_flops: int = 0
    lm_seq_len: int = 0
    peak_score_floats: int = 0
    calls: list = field(default_factory=list)

    def record_attention(self, kind: str, lq: int, lk: int, dim: int, n_heads: int):
        # score FLOPs only: one multiply and one add per q.k term
        self.attn_flops += 2 * lq * lk * dim
        self.peak_score_floats = max(self.peak_score_floats, n_heads * lq * lk)
        self.calls.append((kind, lq, lk))


# -- layer norm ---------------------------------------------------------------


def layer_norm_forward(x, gamma, beta, eps=LN_EPS):
    if x.shape[-1] != gamma.shape[0]:
        raise ValueError(f"feature dim {x.shape[-1]} does not match layer norm width {gamma.shape[0]}")
    if x.size and np.any(x.max(axis=-1) == x.min(axis=-1)):
        raise ValueError("zero-variance row passed to layer norm")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, (xhat, rstd, gamma)


def layer_norm_backward(dy, cache):
    xhat, rstd, gamma = cache
    dgamma = (dy * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0)
    dbeta = dy.reshape(-1, xhat.shape[-1]).sum(axis=0)
    dxhat = dy * gamma
    dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dgamma, dbeta


# -- rotary embedding ---------------------------------------------------------


def rotary_angles(positions, dim, base=ROPE_BASE):
    inv_freq = base ** (-np.arange(0, dim, 2, dtype=np.float64) / dim)
    return np.outer(np.asarray(positions, dtype=np.float64), inv_freq)


def apply_rotary(x, positions, base=ROPE_BASE):
    """Rotate consecutive feature pairs ``(2j, 2j+1)`` of ``x``.

    ``x`` has the position axis first and the head dimension last, e.g.
    ``[n, dim]`` or ``[n, heads, dim]``.  Pair ``j`` at position ``p`` is turned
    by ``p * base**(-2j/dim)`` radians.
    """
    dim = x.shape[-1]
    if dim % 2:
        raise ValueError(f"rotary embedding needs an even head dim, got {dim}")
    ang = rotary_angles(positions, dim, base)
    ang = ang.reshape((ang.shape[0],) + (1,) * (x.ndim - 2) + (dim // 2,))
    cos, sin = np.cos(ang), np.sin(ang)
    x0, x1 = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = x0 * cos - x1 * sin
    out[..., 1::2] = x0 * sin + x1 * cos
    return out


def apply_rotary_backward(dy, positions, base=ROPE_BASE):
    # the transpose of a rotation is the rotation by the negative angle
    return apply_rotary(dy, -np.asarray(positions, dtype=np.float64), base)


# -- attention ----------------------------------------------------------------


def attention_forward(q, k, v, mask):
    """Masked multi-head softmax attention.

    q: [Lq, H, dh], k/v: [Lk, H, dh], mask: bool [Lq, Lk] (True = visible).
    Rows with nothing visible get all-zero probabilities and a zero output.
    """
    lq, n_heads, dh = q.shape
    lk = k.shape[0]
    if mask.shape != (lq, lk):
        raise ValueError(f"mask shape {mask.shape} does not match ({lq}, {lk})")
    qh = q.transpose(1, 0, 2)
    kh = k.transpose(1, 0, 2)
    vh = v.transpose(1, 0, 2)
    scale = 1.0 / math.sqrt(dh)
    if lk == 0:
        probs = np.zeros((n_heads, lq, 0))
        ctx = np.zeros_like(q)
        return ctx, (qh, kh, vh, probs, scale)
    scores = (qh @ kh.transpose(0, 2, 1)) * scale
    scores = np.where(mask, scores, -np.inf)
    row_max = scores.max(axis=-1, keepdims=True)
    row_max = np.where(np.isfinite(row_max), row_max, 0.0)
    e = np.exp(scores - row_max)
    denom = e.sum(axis=-1, keepdims=True)
    probs = e / np.where(denom > 0, denom, 1.0)
    ctx = (probs @ vh).transpose(1, 0, 2)
    return ctx, (qh, kh, vh, probs, scale)


def attention_backward(dctx, cache):
    qh, kh, vh, probs, scale = cache
    dctx_h = dctx.transpose(1, 0, 2)
    dprobs = dctx_h @ vh.transpose(0, 2, 1)
    dv = probs.transpose(0, 2, 1) @ dctx_h
    ds = probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True)) * scale
    dq = ds @ kh
    dk = ds.transpose(0, 2, 1) @ qh
    return dq.transpose(1, 0, 2), dk.transpose(1, 0, 2), dv.transpose(1, 0, 2)


# -- pointwise ----------------------------------------------------------------

_GELU_C = math.sqrt(2.0 / math.pi)


def gelu_forward(x):
    t = np.tanh(_GELU_C * (x + 0.044715 * x**3))
    return 0.5 * x * (1.0 + t), (x, t)


def gelu_backward(dy, cache):
    x, t = cache
    dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * dt)


def sigmoid(x):
    return expit(x)


def softmax_cross_entropy(logits, targets):
    """Mean next-token cross entropy and its gradient w.r.t. ``logits``."""
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    n = len(targets)
    loss = -logp[np.arange(n), targets].mean()
    dlogits = np.exp(logp)
    dlogits[np.arange(n), targets] -= 1.0
    return loss, dlogits / n
