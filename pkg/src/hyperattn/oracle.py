"""Brute-force references and numeric validators.

Everything that computes model outputs here is written with Python scalars,
lists and ``math``; nothing is shared with the vectorised main path.  It is
slow on purpose and only meant for small shapes.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Callable, Mapping

import numpy as np

LN_EPS = 1e-5
ROPE_BASE = 10000.0
REL_FLOOR = 1e-8


# -- scalar helpers -------------------------------------------------------------


def _rows(a) -> list[list[float]]:
    return np.asarray(a, dtype=np.float64).tolist()


def _vec(a) -> list[float]:
    return np.asarray(a, dtype=np.float64).ravel().tolist()


def _dot(a, b):
    s = 0.0
    for x, y in zip(a, b):
        s += x * y
    return s


def _matvec(w, x, bias=None):
    out = [_dot(row, x) for row in w]
    if bias is not None:
        out = [o + b for o, b in zip(out, bias)]
    return out


def _layer_norm(x, gamma, beta, eps=LN_EPS):
    n = len(x)
    mu = sum(x) / n
    var = sum((xi - mu) ** 2 for xi in x) / n
    r = 1.0 / math.sqrt(var + eps)
    return [(xi - mu) * r * g + b for xi, g, b in zip(x, gamma, beta)]


def _rotate(vec, pos, base=ROPE_BASE):
    d = len(vec)
    out = list(vec)
    for j in range(d // 2):
        theta = pos * base ** (-2.0 * j / d)
        c, s = math.cos(theta), math.sin(theta)
        a, b = vec[2 * j], vec[2 * j + 1]
        out[2 * j] = a * c - b * s
        out[2 * j + 1] = a * s + b * c
    return out


def _sigmoid(z):
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


def _gelu(x):
    return 0.5 * x * (1.0 + math.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x**3)))


# -- attention ------------------------------------------------------------------


def dense_attention_reference(q, k, v, positions_q, positions_k, mask, n_heads=1, base=ROPE_BASE):
    """Triple-loop multi-head attention with optional rotary and masking.

    ``q``: [Lq][D], ``k``/``v``: [Lk][D], ``mask[i][j]`` True when query i may
    see key j.  ``positions_*=None`` skips the rotation on that side.  Queries
    with nothing visible get a zero output row.  Returns ``(out, probs)`` with
    ``probs[h][i][j]``.
    """
    q, k, v = _rows(q), _rows(k), _rows(v)
    mask = np.asarray(mask, dtype=bool).tolist()
    lq, lk = len(q), len(k)
    d = len(q[0]) if lq else 0
    dh = d // n_heads
    out = [[0.0] * d for _ in range(lq)]
    probs = [[[0.0] * lk for _ in range(lq)] for _ in range(n_heads)]
    for h in range(n_heads):
        sl = slice(h * dh, (h + 1) * dh)
        qs = [q[i][sl] for i in range(lq)]
        ks = [k[j][sl] for j in range(lk)]
        if positions_q is not None:
            qs = [_rotate(qs[i], float(positions_q[i]), base) for i in range(lq)]
        if positions_k is not None:
            ks = [_rotate(ks[j], float(positions_k[j]), base) for j in range(lk)]
        for i in range(lq):
            visible = [j for j in range(lk) if mask[i][j]]
            if not visible:
                continue
            scores = {j: _dot(qs[i], ks[j]) / math.sqrt(dh) for j in visible}
            top = max(scores.values())
            w = {j: math.exp(s - top) for j, s in scores.items()}
            z = sum(w.values())
            for j in visible:
                p = w[j] / z
                probs[h][i][j] = p
                for c in range(dh):
                    out[i][h * dh + c] += p * v[j][h * dh + c]
    return out, probs


# -- blocks ---------------------------------------------------------------------


def _block_dict(p):
    d = {name: _rows(a) if np.ndim(a) == 2 else _vec(a) for name, a in p.named_arrays().items()}
    d["n_heads"] = p.n_heads
    return d


def _self_attention(n, b, positions, base):
    L = len(n)
    q = [_matvec(b["wq"], x) for x in n]
    k = [_matvec(b["wk"], x) for x in n]
    v = [_matvec(b["wv"], x) for x in n]
    causal = [[j <= i for j in range(L)] for i in range(L)]
    ctx, probs = dense_attention_reference(q, k, v, positions, positions, causal, b["n_heads"], base)
    return [_matvec(b["wo"], c) for c in ctx], q, probs


def _ffn(x, b):
    a = [_gelu(z) for z in _matvec(b["w1"], x, b["b1"])]
    return _matvec(b["w2"], a, b["b2"])


def _finish_block(h, mixed, b):
    out = []
    for t in range(len(h)):
        h1 = [x + y for x, y in zip(h[t], mixed[t])]
        n2 = _layer_norm(h1, b["ln2_g"], b["ln2_b"])
        f = _ffn(n2, b)
        out.append([x + y for x, y in zip(h1, f)])
    return out


def dense_block_reference(h, params, positions, base=ROPE_BASE):
    b = _block_dict(params)
    h = _rows(h)
    n = [_layer_norm(x, b["ln1_g"], b["ln1_b"]) for x in h]
    sa, _, _ = _self_attention(n, b, list(positions), base)
    return _finish_block(h, sa, b)


def dense_hatb_reference(inputs, params) -> dict:
    """Straight-line HATB forward; returns lists for every named intermediate."""
    return _hatb(
        _rows(inputs.h_text),
        _rows(inputs.h_img),
        [float(p) for p in inputs.query_positions],
        [float(p) for p in inputs.visual_positions],
        np.asarray(inputs.cross_mask, dtype=bool).tolist(),
        params,
    )


def _hatb(h_text, h_img, qpos, vpos, mask, params):
    b = _block_dict(params.host)
    base = params.rope_base
    if not params.mi_rope:
        vpos = None
    L = len(h_text)

    n_text = [_layer_norm(x, b["ln1_g"], b["ln1_b"]) for x in h_text]
    if params.shared_layernorm:
        n_img = [_layer_norm(x, b["ln1_g"], b["ln1_b"]) for x in h_img]
    else:
        n_img = [_layer_norm(x, _vec(params.img_ln_g), _vec(params.img_ln_b)) for x in h_img]

    h_self, q, self_probs = _self_attention(n_text, b, qpos, base)
    w_kv = _rows(params.w_kv_img)
    D = len(h_text[0])
    kv = [_matvec(w_kv, x) for x in n_img]
    k_img = [row[:D] for row in kv]
    v_img = [row[D:] for row in kv]
    ctx, cross_probs = dense_attention_reference(q, k_img, v_img, qpos, vpos, mask, b["n_heads"], base)
    h_cross = [_matvec(b["wo"], c) for c in ctx]

    gate, fused = [], []
    for t in range(L):
        sees_image = any(mask[t])
        if params.adaptive_gate:
            z = _dot(_vec(params.w_gate), h_self[t])
            if params.gate_bias is not None:
                z += float(params.gate_bias[0])
            g = _sigmoid(z)
            row = [c * g + s * (1.0 - g) for c, s in zip(h_cross[t], h_self[t])]
        else:
            g = float(params.gate_scale[0])
            row = [s + g * c for c, s in zip(h_cross[t], h_self[t])]
        gate.append(g)
        fused.append(row if sees_image else list(h_self[t]))

    h_out = _finish_block(h_text, fused, b)
    return {
        "h_out": h_out,
        "h_fused": fused,
        "h_self": h_self,
        "h_cross": h_cross,
        "gate": gate,
        "self_probs": self_probs,
        "cross_probs": cross_probs,
    }


def _cross_sublayer(x_rows, img_rows, cp, positions, vpos, mask, base):
    c = {name: _rows(a) if np.ndim(a) == 2 else _vec(a) for name, a in cp.named_arrays().items()}
    D = len(x_rows[0])
    n = [_layer_norm(x, c["ln_g"], c["ln_b"]) for x in x_rows]
    n_img = [_layer_norm(x, c["ln_g"], c["ln_b"]) for x in img_rows]
    q = [_matvec(c["wq"], x) for x in n]
    kv = [_matvec(c["w_kv"], x) for x in n_img]
    ctx, _ = dense_attention_reference(
        q, [r[:D] for r in kv], [r[D:] for r in kv], positions, vpos, mask, cp.n_heads, base
    )
    out = []
    for t, x in enumerate(x_rows):
        if not any(mask[t]):
            out.append(list(x))
            continue
        cross = _matvec(c["wo"], ctx[t])
        g = _sigmoid(_dot(c["w_gate"], n[t]))
        out.append([xi + g * ci for xi, ci in zip(x, cross)])
    return out


def dense_model_reference(model, seq, features) -> dict:
    """Composed scalar evaluation of ``model.forward`` for every variant."""
    cfg = model.config
    base = cfg.rope_base
    E = _rows(model.embed)
    wvis, bvis = _rows(model.vis_proj_w), _vec(model.vis_proj_b)
    feats = np.asarray(features, dtype=np.float64).reshape(-1, np.shape(features)[-1]).tolist()
    h_img = [_matvec(wvis, f, bvis) for f in feats]
    v = cfg.patches_per_slot
    tokens = list(seq.tokens)
    L = len(tokens)
    slot_pos = [s.placeholder_position for s in seq.image_slots]
    vis_pos = [float(p) for p in slot_pos for _ in range(v)]
    mask = [[p <= t for p in slot_pos for _ in range(v)] for t in range(L)]

    if cfg.variant == "concat":
        h, text_index = [], []
        for t, tok in enumerate(tokens):
            text_index.append(len(h))
            h.append(list(E[tok]))
            for s, p in enumerate(slot_pos):
                if p == t:
                    h.extend(list(r) for r in h_img[s * v:(s + 1) * v])
        positions = [float(i) for i in range(len(h))]
        for layer in model.layers:
            h = dense_block_reference(np.array(h), layer.block, positions, base)
    else:
        text_index = list(range(L))
        positions = [float(t) for t in range(L)]
        h = [list(E[tok]) for tok in tokens]
        mvpos = vis_pos if cfg.mi_rope else None
        for layer in model.layers:
            if layer.kind == "plain":
                h = dense_block_reference(np.array(h), layer.block, positions, base)
            elif layer.kind == "hyper":
                h = _hatb(h, h_img, positions, vis_pos, mask, layer.hatb)["h_out"]
            elif layer.kind == "pre_cross":
                h = _cross_sublayer(h, h_img, layer.cross, positions, mvpos, mask, base)
                h = dense_block_reference(np.array(h), layer.block, positions, base)
            elif layer.kind == "post_cross":
                b = _block_dict(layer.block)
                n = [_layer_norm(x, b["ln1_g"], b["ln1_b"]) for x in h]
                sa, _, _ = _self_attention(n, b, positions, base)
                h1 = [[x + y for x, y in zip(h[t], sa[t])] for t in range(L)]
                n2 = [_layer_norm(x, b["ln2_g"], b["ln2_b"]) for x in h1]
                n2 = _cross_sublayer(n2, h_img, layer.cross, positions, mvpos, mask, base)
                h = [[x + y for x, y in zip(h1[t], _ffn(n2[t], b))] for t in range(L)]
            else:
                raise ValueError(f"unknown layer kind {layer.kind!r}")

    g, bb = _vec(model.final_ln_g), _vec(model.final_ln_b)
    head = _rows(model.head)
    hidden = [_layer_norm(x, g, bb) for x in h]
    logits = [_matvec(head, x) for x in hidden]
    return {"hidden": h, "logits": logits, "text_index": text_index}


# -- finite differences ---------------------------------------------------------


def finite_diff_grad(f: Callable, params, eps: float = 1e-5):
    """Central-difference gradient of scalar ``f(params)``.

    ``params`` is an array or a mapping of name -> array.  Arrays are nudged
    in place one coordinate at a time and restored afterwards.
    """
    single = isinstance(params, np.ndarray)
    named = {"_": params} if single else params
    grads = {}
    for name, arr in named.items():
        g = np.zeros(arr.shape, dtype=np.float64)
        flat = arr.reshape(-1)
        if flat.size and not np.shares_memory(flat, arr):
            raise ValueError(f"parameter {name!r} is not contiguous")
        gflat = g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            fp = f(params)
            flat[i] = old - eps
            fm = f(params)
            flat[i] = old
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise ValueError(f"non-finite objective while perturbing {name}[{i}]")
            gflat[i] = (fp - fm) / (2.0 * eps)
        grads[name] = g
    return grads["_"] if single else grads


# -- comparison -----------------------------------------------------------------


@dataclass
class ComparisonReport:
    max_abs_err: float
    max_rel_err: float
    worst_location: str
    tolerance: float
    passed: bool
    mode: str = "elementwise"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pass"] = d.pop("passed")
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def compare(a, b, tol: float, floor: float = REL_FLOOR, mode: str = "elementwise") -> ComparisonReport:
    """Compare ``a`` (candidate) against ``b`` (reference), closed at ``tol``.

    ``elementwise``: relative error ``|a - b| / max(|b|, floor)`` per entry.
    ``tensor``: ``max|a - b| / max(max|b|, floor)`` per named tensor, i.e. the
    error is measured against the scale of the whole tensor.  Gradient checks
    use this mode because central differences carry an absolute noise floor
    that swamps entries whose true value is near zero.
    """
    if mode not in ("elementwise", "tensor"):
        raise ValueError(f"unknown comparison mode {mode!r}")
    if not isinstance(a, Mapping):
        a, b = {"tensor": a}, {"tensor": b}
    if set(a) != set(b):
        raise ValueError(f"tensor sets differ: {sorted(set(a) ^ set(b))}")
    max_abs, max_rel, worst = 0.0, 0.0, ""
    for name in a:
        x = np.asarray(a[name], dtype=np.float64)
        y = np.asarray(b[name], dtype=np.float64)
        if x.shape != y.shape:
            raise ValueError(f"shape mismatch for {name}: {x.shape} vs {y.shape}")
        if x.size == 0:
            continue
        err = np.abs(x - y)
        if mode == "elementwise":
            rel = err / np.maximum(np.abs(y), floor)
        else:
            rel = err / max(float(np.abs(y).max()), floor)
        i = int(np.argmax(rel))
        if rel.flat[i] > max_rel or not worst:
            max_rel = float(rel.flat[i])
            worst = f"{name}{[int(j) for j in np.unravel_index(i, x.shape)]}"
        max_abs = max(max_abs, float(err.max()))
    if not worst:
        worst = "none"
    return ComparisonReport(max_abs, max_rel, worst, tol, bool(max_rel <= tol), mode)
