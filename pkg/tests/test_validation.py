import numpy as np
import pytest

from hyperattn.validation import (
    check_causality,
    check_gates,
    check_rope,
    check_text_only,
    oracle_check,
    random_hatb_case,
    random_interleaving,
)


def test_random_interleaving_counts():
    rng = np.random.default_rng(0)
    seq = random_interleaving(rng, 10, 4, 511, 512)
    assert len(seq) == 10 and seq.num_slots == 4
    assert 511 not in [t for i, t in enumerate(seq.tokens) if i not in seq.placeholder_positions]
    with pytest.raises(ValueError):
        random_interleaving(rng, 2, 3, 511, 512)


def test_random_case_bounds():
    for seed in range(30):
        case = random_hatb_case(seed)
        L, D = case.inputs.h_text.shape
        assert L <= 32 and D <= 64 and case.inputs.h_img.shape[0] <= 48


def test_case_is_reproducible():
    a, b = random_hatb_case(4), random_hatb_case(4)
    assert np.array_equal(a.inputs.h_img, b.inputs.h_img)
    assert oracle_check(a).max_rel_err == oracle_check(b).max_rel_err


@pytest.mark.parametrize("check", [check_text_only, check_causality, check_rope, check_gates])
def test_invariant_checks_pass(check):
    assert check(1)["pass"]
