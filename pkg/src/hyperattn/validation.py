"""Randomized validation suites shared by the tests and the command line.

Everything here is seeded, so a failing case can be replayed from its seed.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .hyperattention import AttentionInputs, BlockParams, HatbParams, block_forward, hatb_backward, hatb_forward
from .interleave import build_sequence, image, text
from .model import VARIANTS, ModelConfig, build_model, forward, loss_and_grads, sequence_features
from .ops import apply_rotary
from .oracle import compare, dense_hatb_reference, finite_diff_grad

FD_EPS = 1e-5
GRAD_TOL = 1e-4
ORACLE_TOL = 1e-9
HATB_OUTPUTS = ("h_out", "h_fused", "h_self", "h_cross", "gate")


def random_interleaving(rng, length: int, n_images: int, image_token_id: int, vocab: int):
    """A sequence of ``length`` tokens with ``n_images`` placeholders at random spots."""
    if n_images > length:
        raise ValueError("more images than tokens")
    places = set(rng.choice(length, size=n_images, replace=False).tolist())
    segments, run = [], []
    for t in range(length):
        if t in places:
            if run:
                segments.append(text(run))
                run = []
            segments.append(image(f"img{t}"))
        else:
            tok = int(rng.integers(vocab - 1))
            run.append(tok if tok != image_token_id else 0)
    if run:
        segments.append(text(run))
    return build_sequence(segments, image_token_id=image_token_id)


@dataclass
class HatbCase:
    seed: int
    inputs: AttentionInputs
    params: HatbParams
    toggles: dict = field(default_factory=dict)


def random_hatb_case(
    seed: int,
    dim: int | None = None,
    length: int | None = None,
    n_slots: int | None = None,
    patches: int | None = None,
    n_heads: int | None = None,
    toggles: dict | None = None,
    max_len: int = 32,
    max_visual: int = 48,
) -> HatbCase:
    """Random HATB inputs and weights with non-trivial norms, gate and projections."""
    rng = np.random.default_rng(seed)
    if n_heads is None:
        n_heads = int(rng.choice([1, 2, 4]))
    if dim is None:
        dim = int(rng.choice([d for d in (4, 8, 16, 32, 64) if d % (2 * n_heads) == 0]))
    if dim % (2 * n_heads):
        n_heads = 1
    length = int(rng.integers(1, max_len + 1)) if length is None else length
    patches = int(rng.integers(1, 5)) if patches is None else patches
    if n_slots is None:
        n_slots = int(rng.integers(0, min(length, max_visual // patches) + 1))
    if toggles is None:
        toggles = {
            "gate_bias": bool(rng.random() < 0.3),
            "shared_layernorm": bool(rng.random() < 0.8),
            "adaptive_gate": bool(rng.random() < 0.8),
            "mi_rope": bool(rng.random() < 0.8),
        }

    host = BlockParams.init(rng, dim, n_heads, 2 * dim, jitter_norms=True)
    params = HatbParams.from_host(host, **toggles)
    params.w_kv_img += 0.3 * rng.standard_normal(params.w_kv_img.shape)
    if params.adaptive_gate:
        params.w_gate[:] = rng.standard_normal(dim) * dim**-0.5
    if params.gate_bias is not None:
        params.gate_bias[:] = rng.standard_normal()
    if params.gate_scale is not None:
        params.gate_scale[:] = rng.standard_normal()
    if params.img_ln_g is not None:
        params.img_ln_g[:] = 1.0 + 0.2 * rng.standard_normal(dim)
        params.img_ln_b[:] = 0.1 * rng.standard_normal(dim)

    seq = random_interleaving(rng, length, n_slots, 511, 512)
    h_text = rng.standard_normal((length, dim))
    h_img = rng.standard_normal((n_slots * patches, dim))
    inputs = AttentionInputs.from_sequence(seq, h_text, h_img, patches)
    return HatbCase(seed, inputs, params, dict(toggles))


# -- oracle equivalence ---------------------------------------------------------


def oracle_check(case: HatbCase, tol: float = ORACLE_TOL):
    out = hatb_forward(case.inputs, case.params, keep_cache=False)
    ref = dense_hatb_reference(case.inputs, case.params)
    got = {k: getattr(out, k) for k in HATB_OUTPUTS}
    want = {k: np.asarray(ref[k], dtype=np.float64).reshape(got[k].shape) for k in HATB_OUTPUTS}
    return compare(got, want, tol)


def oracle_suite(n_cases: int = 100, seed: int = 0, tol: float = ORACLE_TOL) -> dict:
    start = time.perf_counter()
    worst, failures = None, []
    for i in range(n_cases):
        case = random_hatb_case(seed * 100_003 + i)
        r = oracle_check(case, tol)
        if worst is None or r.max_rel_err > worst["max_rel_err"]:
            worst = dict(r.to_dict(), case_seed=case.seed)
        if not r.passed:
            failures.append(case.seed)
    return {
        "cases": n_cases,
        "tolerance": tol,
        "max_rel_err": worst["max_rel_err"] if worst else 0.0,
        "worst": worst,
        "failed_seeds": failures,
        "pass": not failures,
        "seconds": time.perf_counter() - start,
    }


# -- gradient checks ------------------------------------------------------------


def hatb_gradcheck(case: HatbCase, eps: float = FD_EPS, tol: float = GRAD_TOL) -> dict:
    """Analytic HATB gradients of ``sum(R * h_out)`` against central differences."""
    rng = np.random.default_rng([case.seed, 7])
    inputs, params = case.inputs, case.params
    out = hatb_forward(inputs, params)
    upstream = rng.standard_normal(out.h_out.shape)
    analytic = hatb_backward(inputs, params, upstream, out)
    arrays = dict(params.named_arrays(), h_text=inputs.h_text, h_img=inputs.h_img)
    numeric = finite_diff_grad(
        lambda _: float(np.sum(hatb_forward(inputs, params, keep_cache=False).h_out * upstream)), arrays, eps
    )
    report = compare({k: analytic[k] for k in numeric}, numeric, tol, mode="tensor")
    return dict(report.to_dict(), kind="hatb", seed=case.seed, eps=eps, toggles=case.toggles,
                shape={"L": int(inputs.h_text.shape[0]), "M": int(inputs.h_img.shape[0]),
                       "D": int(inputs.h_text.shape[1])})


def small_model_config(seed: int = 0, dim: int = 8, layers: int = 3, variant: str = "hyper",
                       hatb_indices=None, **overrides) -> ModelConfig:
    if hatb_indices is None:
        hatb_indices = [0, layers - 1] if layers > 1 else [0]
    return ModelConfig(
        hidden_dim=dim, n_heads=2 if dim % 4 == 0 else 1, n_layers=layers, ffn_dim=2 * dim, vocab_size=20,
        patches_per_slot=2, vision_dim=max(6, dim), hatb_indices=hatb_indices, variant=variant, seed=seed,
        **overrides,
    )


def _perturb_fusion(model, seed):
    # non-zero gates and jittered norms so every gradient path is exercised
    rng = np.random.default_rng([seed, 11])
    for name, a in model.named_parameters().items():
        if "gate" in name or "ln" in name or name.endswith(".b1") or name == "vis_proj.b":
            a += 0.3 * rng.standard_normal(a.shape)


def model_gradcheck(config: ModelConfig, eps: float = FD_EPS, tol: float = GRAD_TOL) -> dict:
    """Full toy-model backward against finite differences of the training loss."""
    model = build_model(config)
    _perturb_fusion(model, config.seed)
    rng = np.random.default_rng([config.seed, 3])
    seq = random_interleaving(rng, 7, 2, config.image_token_id, config.vocab_size)
    batch = [(seq, sequence_features(model, seq, config.seed))]
    _, analytic = loss_and_grads(model, batch)
    params = model.named_parameters()
    numeric = finite_diff_grad(lambda _: loss_and_grads(model, batch, with_grads=False)[0], params, eps)
    report = compare({k: analytic[k] for k in numeric}, numeric, tol, mode="tensor")
    return dict(report.to_dict(), kind="model", variant=config.variant, seed=config.seed, eps=eps,
                config=asdict(config))


def gradcheck_suite(seed: int = 0, dim: int = 8, n_cases: int = 20, layers: int = 3, hatb_indices=None,
                    variants=VARIANTS, eps: float = FD_EPS, tol: float = GRAD_TOL) -> dict:
    start = time.perf_counter()
    cases = []
    for i in range(n_cases):
        rng = np.random.default_rng([seed, i])
        length = int(rng.integers(1, 7))
        case = random_hatb_case(
            seed * 1000 + i, dim=dim, length=length, n_slots=int(rng.integers(0, min(length, 3) + 1)),
            patches=int(rng.integers(1, 3)),
        )
        cases.append(hatb_gradcheck(case, eps, tol))
    for v in variants:
        cfg = small_model_config(seed, dim, layers, v, hatb_indices)
        cases.append(model_gradcheck(cfg, eps, tol))
    worst = max(cases, key=lambda c: c["max_rel_err"])
    return {
        "eps": eps,
        "tolerance": tol,
        "comparison": "per-tensor relative error: max|analytic - numeric| / max|numeric|",
        "max_rel_err": worst["max_rel_err"],
        "worst_location": f"{worst['kind']}:{worst.get('variant', worst['seed'])}:{worst['worst_location']}",
        "pass": all(c["pass"] for c in cases),
        "cases": cases,
        "seconds": time.perf_counter() - start,
    }


# -- invariant checks -----------------------------------------------------------


def check_text_only(seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    cfg = small_model_config(seed, 8, 3)
    seq = random_interleaving(rng, 9, 0, cfg.image_token_id, cfg.vocab_size)
    outs = {}
    for v in VARIANTS:
        c = ModelConfig(**dict(asdict(cfg), variant=v))
        outs[v] = forward(build_model(c), seq).logits
    same_variants = all(np.array_equal(outs["hyper"], o) for o in outs.values())
    case = random_hatb_case(seed, n_slots=0)
    out = hatb_forward(case.inputs, case.params)
    plain, _ = block_forward(case.inputs.h_text, case.params.host, case.inputs.query_positions)
    same_block = bool(np.array_equal(out.h_out, plain))
    return {"variants_bitwise_equal": bool(same_variants), "hatb_equals_plain_block": same_block,
            "pass": bool(same_variants and same_block)}


def check_causality(seed: int = 0, n_cases: int = 50) -> dict:
    """Perturbing slot ``s`` may only move rows ``t >= placeholder(s)``."""
    violations, moved_ok = 0, 0
    for i in range(n_cases):
        rng = np.random.default_rng([seed, i])
        length = int(rng.integers(2, 20))
        n_slots = int(rng.integers(1, min(length, 5) + 1))
        case = random_hatb_case(seed * 7919 + i, length=length, n_slots=n_slots, patches=2)
        inp, p = case.inputs, case.params
        base = hatb_forward(inp, p, keep_cache=False)
        s = int(rng.integers(n_slots))
        pos = int(inp.visual_positions[2 * s])
        h_img = inp.h_img.copy()
        h_img[2 * s:2 * s + 2] += rng.standard_normal((2, h_img.shape[1]))
        pert = hatb_forward(AttentionInputs(inp.h_text, h_img, inp.query_positions, inp.visual_positions,
                                            inp.cross_mask), p, keep_cache=False)
        changed = np.any(pert.h_fused != base.h_fused, axis=1)
        violations += int(np.any(changed[:pos]))
        moved_ok += int(np.all(changed[pos:]))
    return {"cases": n_cases, "violations": violations, "cases_where_all_visible_rows_moved": moved_ok,
            "pass": violations == 0}


def check_rope(seed: int = 0, shift: int = 37) -> dict:
    case = random_hatb_case(seed, length=12, n_slots=3, patches=2,
                            toggles={"mi_rope": True})
    inp, p = case.inputs, case.params
    a = hatb_forward(inp, p, keep_cache=False)
    b = hatb_forward(AttentionInputs(inp.h_text, inp.h_img, inp.query_positions + shift,
                                     inp.visual_positions + shift, inp.cross_mask), p, keep_cache=False)
    shift_err = max(float(np.abs(a.self_probs - b.self_probs).max()),
                    float(np.abs(a.cross_probs - b.cross_probs).max()))
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((50, 3, 16))
    pos = rng.integers(0, 10_000, 50)
    y = apply_rotary(x, pos)
    norm = lambda z: np.hypot(z[..., 0::2], z[..., 1::2])
    norm_err = float(np.abs(norm(x) - norm(y)).max())
    return {"shift_invariance_err": shift_err, "norm_preservation_err": norm_err,
            "pass": shift_err < 1e-9 and norm_err < 1e-12}


def check_gates(seed: int = 0, n_cases: int = 20) -> dict:
    in_range = True
    for i in range(n_cases):
        case = random_hatb_case(seed * 31 + i, toggles={})
        g = hatb_forward(case.inputs, case.params, keep_cache=False).gate
        in_range &= bool(np.all((g > 0) & (g < 1)))
    case = random_hatb_case(seed, toggles={})
    case.params.w_gate[:] = 0.0
    half = bool(np.all(hatb_forward(case.inputs, case.params, keep_cache=False).gate == 0.5))
    return {"gates_in_open_interval": in_range, "zero_weight_gives_half": half, "pass": in_range and half}


def selftest(seed: int = 0, oracle_cases: int = 100) -> dict:
    results = {
        "oracle_equivalence": oracle_suite(oracle_cases, seed),
        "text_only_reduction": check_text_only(seed),
        "causality": check_causality(seed),
        "mi_rope": check_rope(seed),
        "gates": check_gates(seed),
    }
    results["pass"] = all(r["pass"] for r in results.values())
    return results


def to_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True, default=float)
