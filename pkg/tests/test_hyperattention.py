import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hyperattn.hyperattention import (
    AttentionInputs,
    BlockParams,
    HatbParams,
    adaptive_gate,
    block_forward,
    cross_attention,
    dumps_tensors,
    fuse,
    hatb_backward,
    hatb_forward,
    load_tensors,
    loads_tensors,
    project_visual_kv,
    shared_layernorm,
)
from hyperattn.interleave import build_sequence, image, text
from hyperattn.oracle import compare, finite_diff_grad
from hyperattn.validation import hatb_gradcheck, random_hatb_case


def _identity_block(dim):
    eye = np.eye(dim)
    return BlockParams(1, np.ones(dim), np.zeros(dim), eye.copy(), eye.copy(), eye.copy(), eye.copy(),
                       np.ones(dim), np.zeros(dim), eye.copy(), np.zeros(dim), eye.copy(), np.zeros(dim))


def _gelu(x):
    return 0.5 * x * (1 + math.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x**3)))


def test_hand_sized_d2_case():
    # one token that is its own image placeholder, identity weights everywhere
    params = HatbParams.from_host(_identity_block(2))
    params.w_gate[:] = [1.0, 0.0]
    seq = build_sequence([image("x")])
    inputs = AttentionInputs.from_sequence(seq, np.array([[1.0, -1.0]]), np.array([[1.0, 3.0]]), 1)
    out = hatb_forward(inputs, params)

    r = math.sqrt(1 + 1e-5)
    g = 1 / (1 + math.exp(-1 / r))
    k = 1 + (1 - 2 * g) / r  # h_text + (h_cross * g + h_self * (1 - g)), both along [1, -1]
    s = k / math.sqrt(k * k + 1e-5)
    expected = [k + _gelu(s), -k + _gelu(-s)]
    assert out.gate[0] == pytest.approx(g, abs=1e-15)
    assert out.h_self[0] == pytest.approx([1 / r, -1 / r], abs=1e-15)
    assert out.h_cross[0] == pytest.approx([-1 / r, 1 / r], abs=1e-15)
    assert out.h_out[0] == pytest.approx(expected, abs=1e-12)


def test_shared_layernorm_streams():
    rng = np.random.default_rng(0)
    gamma, beta = np.ones(8), np.zeros(8)
    nt, ni = shared_layernorm(rng.standard_normal((4, 8)), 5 * rng.standard_normal((6, 8)) + 2, (gamma, beta))
    for n in (nt, ni):
        assert np.abs(n.mean(axis=1)).max() < 1e-6
        assert np.abs(n.var(axis=1) - 1).max() < 1e-4
    assert shared_layernorm(np.array([[1.0, -1.0]]), np.array([[2.0, 0.0]]), (np.ones(2), np.zeros(2)))[0] == \
        pytest.approx(np.array([[1.0, -1.0]]), abs=1e-5)
    with pytest.raises(ValueError):
        shared_layernorm(np.ones((1, 4)), np.zeros((0, 4)), (np.ones(4), np.zeros(4)))


def test_project_visual_kv():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((3, 4))
    k, v = project_visual_kv(x, np.vstack([np.eye(4), np.eye(4)]))
    assert np.array_equal(k, x) and np.array_equal(v, x)
    k, v = project_visual_kv(x, np.zeros((8, 4)))
    assert not k.any() and not v.any()
    w = rng.standard_normal((8, 4))
    k, v = project_visual_kv(x, w)
    brute = [[sum(x[i, c] * w[o, c] for c in range(4)) for o in range(8)] for i in range(3)]
    assert np.abs(np.hstack([k, v]) - np.array(brute)).max() < 1e-12
    with pytest.raises(ValueError):
        project_visual_kv(x, np.zeros((4, 4)))


def test_w_kv_img_initialized_from_host():
    host = BlockParams.init(np.random.default_rng(2), 8, 2, 16)
    p = HatbParams.from_host(host)
    assert np.array_equal(p.w_kv_img, np.vstack([host.wk, host.wv]))
    assert not np.shares_memory(p.w_kv_img, host.wk)
    assert not p.w_gate.any()


def test_cross_attention_single_patch_and_empty_row():
    rng = np.random.default_rng(3)
    q = rng.standard_normal((2, 2, 2))
    k, v = rng.standard_normal((2, 1, 4))
    wo = rng.standard_normal((4, 4))
    mask = np.array([[False], [True]])
    h, bypass, _ = cross_attention(q, k, v, np.array([1]), mask, wo)
    assert bypass.tolist() == [True, False]
    assert np.all(np.isfinite(h)) and not h[0].any()
    assert np.allclose(h[1], wo @ v[0], atol=1e-14)
    with pytest.raises(ValueError):
        cross_attention(q, k, v, None, np.ones((3, 1), bool), wo)


def test_adaptive_gate_values():
    rng = np.random.default_rng(4)
    h = rng.standard_normal((5, 6))
    assert np.all(adaptive_gate(h, np.zeros(6)) == 0.5)
    w = rng.standard_normal(6)
    expected = [1 / (1 + math.exp(-sum(a * b for a, b in zip(row, w)))) for row in h]
    assert np.abs(adaptive_gate(h, w) - expected).max() < 1e-12
    x = np.array([[20.0, 0.0]])
    assert abs(adaptive_gate(x, np.array([1.0, 0.0]))[0] - 1.0) < 1e-8


def test_fuse_rules():
    rng = np.random.default_rng(5)
    hc, hs = rng.standard_normal((2, 4, 3))
    none = np.zeros(4, bool)
    assert np.allclose(fuse(hc, hs, np.full(4, 1 - 1e-12), none), hc, atol=1e-10)
    assert np.array_equal(fuse(hs, hs, np.full(4, 0.5), none), hs)
    g = rng.uniform(0.01, 0.99, 4)
    ref = [[hc[t, j] * g[t] + hs[t, j] * (1 - g[t]) for j in range(3)] for t in range(4)]
    assert np.abs(fuse(hc, hs, g, none) - ref).max() < 1e-12
    bypass = np.array([True, False, True, False])
    out = fuse(hc, hs, g, bypass)
    assert np.array_equal(out[bypass], hs[bypass])
    with pytest.raises(ValueError):
        fuse(hc, hs, np.array([0.5, 1.0, 0.5, 0.5]), none)
    # an out-of-range gate on a bypassed token is ignored
    fuse(hc, hs, np.array([1.0, 0.5, 0.5, 0.5]), bypass)


def test_no_images_equals_plain_block_bitwise():
    case = random_hatb_case(6, n_slots=0)
    out = hatb_forward(case.inputs, case.params)
    plain, _ = block_forward(case.inputs.h_text, case.params.host, case.inputs.query_positions)
    assert np.array_equal(out.h_out, plain)


def test_query_reuse_and_self_path_identity():
    # the self-attention output equals the host block's own attention output
    case = random_hatb_case(7, n_slots=3, patches=2)
    out = hatb_forward(case.inputs, case.params)
    p = case.params.host
    out_plain, cache = block_forward(case.inputs.h_text, p, case.inputs.query_positions)
    bypass = out.bypass
    assert np.array_equal(out.h_out[bypass], out_plain[bypass])


def test_attention_inputs_validation():
    with pytest.raises(ValueError):
        AttentionInputs(np.zeros((2, 4)), np.zeros((3, 4)), np.arange(2), np.zeros(3), np.zeros((2, 2), bool))
    seq = build_sequence([text([1]), image("a")])
    with pytest.raises(ValueError):
        AttentionInputs.from_sequence(seq, np.zeros((2, 4)), np.zeros((3, 4)), 2)


def test_backward_all_masked_gives_zero_image_grads():
    case = random_hatb_case(8, n_slots=2, patches=2, toggles={})
    inp = case.inputs
    masked = AttentionInputs(inp.h_text, inp.h_img, inp.query_positions, inp.visual_positions,
                             np.zeros_like(inp.cross_mask))
    out = hatb_forward(masked, case.params)
    g = hatb_backward(masked, case.params, np.ones_like(out.h_out), out)
    assert not g["w_kv_img"].any()
    assert not g["w_gate"].any()
    assert not g["h_img"].any()


def test_backward_requires_cache():
    case = random_hatb_case(9, n_slots=1)
    out = hatb_forward(case.inputs, case.params, keep_cache=False)
    with pytest.raises(ValueError):
        hatb_backward(case.inputs, case.params, np.ones_like(out.h_out), out)


def test_saturated_gate_kills_w_gate_gradient():
    case = random_hatb_case(10, dim=16, length=6, n_slots=2, patches=2, n_heads=2, toggles={})
    inp, p = case.inputs, case.params
    h_self = hatb_forward(inp, p).h_self
    active = inp.cross_mask.any(axis=1)
    p.w_gate[:] = np.linalg.lstsq(h_self[active], np.full(active.sum(), 25.0), rcond=None)[0]
    out = hatb_forward(inp, p)
    assert np.all(out.gate[active] > 1 - 1e-10)
    up = np.random.default_rng(0).standard_normal(out.h_out.shape)
    g = hatb_backward(inp, p, up, out)["w_gate"]
    assert np.abs(g).max() < 1e-6
    num = finite_diff_grad(lambda w: float(np.sum(hatb_forward(inp, p, keep_cache=False).h_out * up)), p.w_gate)
    assert np.abs(num).max() < 1e-6


@pytest.mark.parametrize("toggles", [
    {}, {"gate_bias": True}, {"shared_layernorm": False}, {"adaptive_gate": False}, {"mi_rope": False},
])
def test_gradcheck_small_case(toggles):
    case = random_hatb_case(11, dim=8, length=5, n_slots=3, patches=2, toggles=toggles)
    r = hatb_gradcheck(case)
    assert r["pass"], r


def test_mi_rope_rotates_visual_keys_by_placeholder_position():
    rng = np.random.default_rng(12)
    host = BlockParams.init(rng, 8, 2, 16)
    p = HatbParams.from_host(host)
    h_text, h_img = rng.standard_normal((4, 8)), rng.standard_normal((3, 8))

    def probs(placeholder_at, mi_rope):
        segs = [image("a"), text([1, 2, 3])] if placeholder_at == 0 else [text([1, 2]), image("a"), text([3])]
        seq = build_sequence(segs)
        p.mi_rope = mi_rope
        return hatb_forward(AttentionInputs.from_sequence(seq, h_text, h_img, 3), p).cross_probs

    # position 0 rotates by nothing, so the toggle makes no difference there
    assert np.array_equal(probs(0, True), probs(0, False))
    assert not np.allclose(probs(2, True), probs(2, False))


@given(st.integers(0, 10_000))
def test_gates_in_open_interval(seed):
    case = random_hatb_case(seed, toggles={})
    out = hatb_forward(case.inputs, case.params, keep_cache=False)
    assert np.all((out.gate > 0) & (out.gate < 1))
    assert np.array_equal(out.h_fused[out.bypass], out.h_self[out.bypass])
    for probs, mask in ((out.cross_probs, case.inputs.cross_mask),):
        rows = mask.any(axis=1)
        assert np.allclose(probs.sum(axis=-1)[:, rows], 1.0)
        assert np.all(probs[:, ~mask] == 0)


def test_golden_fixture(fixtures_dir):
    t = load_tensors(fixtures_dir / "hatb_golden.json")
    host = BlockParams(2, *[t[f"params.host.{n}"] for n in
                            ("ln1_g", "ln1_b", "wq", "wk", "wv", "wo", "ln2_g", "ln2_b", "w1", "b1", "w2", "b2")])
    p = HatbParams(host, t["params.w_kv_img"], t["params.w_gate"], gate_bias=t["params.gate_bias"])
    inp = AttentionInputs(t["inputs.h_text"], t["inputs.h_img"], t["inputs.query_positions"].astype(int),
                          t["inputs.visual_positions"].astype(int), t["inputs.cross_mask"].astype(bool))
    out = hatb_forward(inp, p)
    got = {k: getattr(out, k) for k in ("h_out", "h_fused", "h_self", "h_cross", "gate")}
    want = {k: t[f"outputs.{k}"] for k in got}
    assert compare(got, want, 1e-9).passed


def test_tensor_format_round_trip_is_exact():
    rng = np.random.default_rng(13)
    tensors = {"a": rng.standard_normal((2, 3)), "b": np.array([1e-300, -0.0, 1 / 3])}
    back = loads_tensors(dumps_tensors(tensors))
    assert all(np.array_equal(back[k], v) and back[k].shape == v.shape for k, v in tensors.items())
    with pytest.raises(ValueError):
        dumps_tensors({"x": np.array([np.nan])})
    with pytest.raises(ValueError):
        loads_tensors('{"format": "tensors-v1", "tensors": [{"name": "x", "shape": [2], "values": [1.0]}]}')
