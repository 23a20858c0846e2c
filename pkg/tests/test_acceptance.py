"""One test per headline acceptance criterion; each prints a PASS/FAIL line."""

import time
from dataclasses import asdict

import numpy as np
import pytest

from hyperattn.bench import Workload, added_params, measure, slope_ratio
from hyperattn.distractor import (
    EvalConfig,
    circular_eval,
    expected_random_accuracy,
    gen_tasks,
    make_adapter,
)
from hyperattn.hyperattention import AttentionInputs, block_forward, hatb_backward, hatb_forward
from hyperattn.interleave import build_sequence, image, text
from hyperattn.model import (
    VARIANTS,
    ModelConfig,
    build_model,
    count_params,
    encode_images_stub,
    forward,
    loss_and_grads,
    overfit_step,
    sequence_features,
)
from hyperattn.ops import apply_rotary
from hyperattn.validation import gradcheck_suite, oracle_suite, random_hatb_case, random_interleaving


def test_oracle_equivalence(acceptance):
    r = oracle_suite(n_cases=100, seed=0)
    ok = r["pass"] and r["max_rel_err"] < 1e-9 and r["seconds"] < 60
    acceptance("oracle equivalence", ok,
               f"100 cases, max rel err {r['max_rel_err']:.2e} (< 1e-9), {r['seconds']:.1f} s (< 60 s)")


def test_gradient_fidelity(acceptance):
    r = gradcheck_suite(seed=0, dim=8, n_cases=20)
    ok = r["pass"] and r["max_rel_err"] < 1e-4 and r["seconds"] < 300
    acceptance("gradient fidelity", ok,
               f"20 HATB cases + {len(VARIANTS)} full models, max rel err {r['max_rel_err']:.2e} (< 1e-4), "
               f"eps 1e-5, {r['seconds']:.1f} s")


def test_text_only_reduction(acceptance):
    seq = build_sequence([text(list(range(1, 40)))])
    logits = {v: forward(build_model(ModelConfig(variant=v)), seq).logits for v in VARIANTS}
    variants_equal = all(np.array_equal(logits["hyper"], x) for x in logits.values())
    blocks_equal = True
    for seed in range(20):
        case = random_hatb_case(seed, n_slots=0)
        plain, _ = block_forward(case.inputs.h_text, case.params.host, case.inputs.query_positions)
        blocks_equal &= bool(np.array_equal(hatb_forward(case.inputs, case.params).h_out, plain))
    acceptance("text-only reduction", variants_equal and blocks_equal,
               f"5 variants bitwise equal: {variants_equal}; HATB == plain block on 20 cases: {blocks_equal}")


def test_causality(acceptance):
    cfg = ModelConfig(hidden_dim=16, n_heads=2, n_layers=4, ffn_dim=32, patches_per_slot=2, hatb_indices=[0, 2])
    model = build_model(cfg)
    violations, moved = 0, 0
    for i in range(50):
        rng = np.random.default_rng([99, i])
        length = int(rng.integers(3, 24))
        n_img = int(rng.integers(1, min(length, 6) + 1))
        seq = random_interleaving(rng, length, n_img, cfg.image_token_id, cfg.vocab_size)
        feats = sequence_features(model, seq, i)
        base = forward(model, seq, feats).hidden
        s = int(rng.integers(seq.num_slots))
        pert = feats.copy()
        pert[s] += rng.standard_normal(pert[s].shape)
        changed = np.any(forward(model, seq, pert).hidden != base, axis=1)
        p = seq.image_slots[s].placeholder_position
        violations += int(changed[:p].any())
        moved += int(changed[p:].all())
    acceptance("causality", violations == 0,
               f"50 random interleavings, {violations} rows before the placeholder changed; "
               f"all rows from the placeholder on changed in {moved}/50")


def test_mi_rope_properties(acceptance):
    shift_err = 0.0
    for seed in range(30):
        case = random_hatb_case(seed, toggles={"mi_rope": True})
        inp, p = case.inputs, case.params
        c = int(np.random.default_rng(seed).integers(1, 5000))
        a = hatb_forward(inp, p, keep_cache=False)
        b = hatb_forward(AttentionInputs(inp.h_text, inp.h_img, inp.query_positions + c, inp.visual_positions + c,
                                         inp.cross_mask), p, keep_cache=False)
        shift_err = max(shift_err, np.abs(a.self_probs - b.self_probs).max(),
                        np.abs(a.cross_probs - b.cross_probs).max(initial=0.0))

    rng = np.random.default_rng(1)
    x = rng.standard_normal((200, 4, 16))
    y = apply_rotary(x, rng.integers(0, 100_000, 200))
    norm_err = np.abs(np.hypot(x[..., 0::2], x[..., 1::2]) - np.hypot(y[..., 0::2], y[..., 1::2])).max()

    # swap the storage order of two images (features, positions and mask columns move together)
    case = random_hatb_case(5, length=20, n_slots=3, patches=3, toggles={"mi_rope": True})
    inp, p = case.inputs, case.params
    perm = np.r_[np.arange(6, 9), np.arange(3, 6), np.arange(0, 3)]
    a = hatb_forward(inp, p, keep_cache=False)
    b = hatb_forward(AttentionInputs(inp.h_text, inp.h_img[perm], inp.query_positions, inp.visual_positions[perm],
                                     inp.cross_mask[:, perm]), p, keep_cache=False)
    perm_err = max(np.abs(a.cross_probs[..., perm] - b.cross_probs).max(), np.abs(a.h_out - b.h_out).max())

    ok = shift_err < 1e-9 and norm_err < 1e-12 and perm_err < 1e-12
    acceptance("MI-Rope properties", ok,
               f"shift invariance {shift_err:.1e} (< 1e-9), pair-norm drift {norm_err:.1e} (< 1e-12), "
               f"image permutation mismatch {perm_err:.1e}")


def test_gate_properties(acceptance):
    in_range, half = True, True
    for seed in range(50):
        case = random_hatb_case(seed, toggles={})
        g = hatb_forward(case.inputs, case.params, keep_cache=False).gate
        in_range &= bool(np.all((g > 0) & (g < 1)))
        case.params.w_gate[:] = 0
        half &= bool(np.all(hatb_forward(case.inputs, case.params, keep_cache=False).gate == 0.5))

    case = random_hatb_case(10, dim=16, length=6, n_slots=2, patches=2, n_heads=2, toggles={})
    inp, p = case.inputs, case.params
    h_self = hatb_forward(inp, p).h_self
    active = inp.cross_mask.any(axis=1)
    p.w_gate[:] = np.linalg.lstsq(h_self[active], np.full(active.sum(), 25.0), rcond=None)[0]
    out = hatb_forward(inp, p)
    up = np.random.default_rng(0).standard_normal(out.h_out.shape)
    sat_grad = np.abs(hatb_backward(inp, p, up, out)["w_gate"]).max()

    ok = in_range and half and sat_grad < 1e-6
    acceptance("gate properties", ok,
               f"gates in (0,1): {in_range}; w_gate=0 gives 0.5: {half}; "
               f"saturated |grad w_gate| {sat_grad:.1e} (< 1e-6)")


def test_scaling_claims(acceptance):
    start = time.perf_counter()
    cfg = ModelConfig(hidden_dim=64)
    reports, exact = [], True
    for variant in ("hyper", "concat"):
        for n in (1, 25, 50, 100):
            r = measure(variant, cfg, Workload(n, 16, 256, cfg, repeats=5))
            exact &= r.measured_lm_seq_len == r.lm_seq_len and r.measured_attn_flops == r.attn_flops
            reports.append(r)
    ratio = slope_ratio(reports)
    concat_ms = [r.wall_ms_median for r in reports if r.variant == "concat"]
    increasing = all(b > a for a, b in zip(concat_ms, concat_ms[1:]))
    seconds = time.perf_counter() - start
    ok = ratio > 2 and exact and increasing and seconds < 600
    acceptance("scaling claims", ok,
               f"concat/hyper slope ratio {ratio:.1f} (> 2), concat strictly increasing: {increasing}, "
               f"analytic == measured at all 8 points: {exact}, {seconds:.0f} s")


def test_parameter_economy(acceptance):
    D = 64
    hyper = count_params(build_model(ModelConfig(hidden_dim=D, n_layers=8))).added_by_fusion
    dense = count_params(build_model(ModelConfig(hidden_dim=D, n_layers=8, variant="flamingo_dense"))).added_by_fusion
    ok = hyper == 4 * (2 * D * D + D) == added_params("hyper", ModelConfig()) and hyper < dense
    acceptance("parameter economy", ok, f"hyper k=4 adds {hyper} = 4*(2D^2+D); flamingo_dense adds {dense}")


def test_distractor_calibration(acceptance):
    start = time.perf_counter()
    cfg = EvalConfig(questions=50)
    tasks = gen_tasks(cfg)
    oracle = [r.accuracy for r in circular_eval(make_adapter("oracle"), tasks, cfg)]

    rcfg = EvalConfig(questions=2000, n_values=(5,))
    p = expected_random_accuracy(4, rcfg.rotations, rcfg.distractor_seeds)
    rand = circular_eval(make_adapter("random", 0), gen_tasks(rcfg), rcfg)[0].accuracy
    se = np.sqrt(p * (1 - p) / 2000)

    fcfg = EvalConfig(questions=200)
    first = [r.accuracy for r in circular_eval(make_adapter("first-image"), gen_tasks(fcfg), fcfg)]
    monotone = all(b <= a for a, b in zip(first, first[1:])) and first[-1] < first[0]
    seconds = time.perf_counter() - start

    ok = all(a == 1.0 for a in oracle) and abs(rand - p) <= 3 * se and monotone and seconds < 300
    acceptance("distractor calibration", ok,
               f"oracle {oracle}; random {rand:.4f} vs {p:.4f} +- 3*{se:.4f}; "
               f"first-image {[round(a, 3) for a in first]}; {seconds:.0f} s")


def test_training_smoke(acceptance):
    cfg = ModelConfig()
    model = build_model(cfg)
    seq = build_sequence([text([3, 17, 42]), image("desc:circle:red:a"), text([8, 99, 7]),
                          image("desc:star:blue:b"), text([55, 21, 4, 9])])
    batch = [(seq, encode_images_stub(seq.slot_keys(), cfg.patches_per_slot, 0, cfg.vision_dim))]
    initial = overfit_step(model, batch, 0.05)
    for _ in range(499):
        overfit_step(model, batch, 0.05)
    final = loss_and_grads(model, batch, with_grads=False)[0]
    acceptance("training smoke", final <= 0.1 * initial,
               f"hyper, 500 steps at lr 0.05: loss {initial:.3f} -> {final:.4f} "
               f"({100 * final / initial:.2f}% of initial, needs <= 10%)")
