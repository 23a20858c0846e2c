import csv

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hyperattn.distractor import (
    COLORS,
    RESULTS_HEADER,
    SHAPES,
    Descriptor,
    EvalConfig,
    FirstImageAdapter,
    NeedleTask,
    OracleAdapter,
    ToyVocab,
    circular_eval,
    expected_random_accuracy,
    gen_tasks,
    load_tasks,
    make_adapter,
    render_prompt,
    save_tasks,
    write_results,
)
from hyperattn.model import ModelConfig, build_model, encode_images_stub


def _task(n, x, question="what shape is shown?"):
    imgs = [Descriptor("circle", "red")] * n
    return NeedleTask(0, n, x, [imgs], "shape", question, ["circle", "star", "cross", "square"], 0)


def test_prompt_template_two_images():
    prompt, seq = render_prompt(_task(2, 1))
    assert prompt == "Image 1: <|image|> Image 2: <|image|>. In Image 1, what shape is shown?"
    assert seq.num_slots == 2
    assert ToyVocab().decode(seq.tokens) == prompt


def test_prompt_single_image():
    prompt, seq = render_prompt(_task(1, 1))
    assert prompt == "Image 1: <|image|>. In Image 1, what shape is shown?"
    assert seq.num_slots == 1


def test_prompt_multi_digit_indices():
    prompt, seq = render_prompt(_task(12, 11))
    assert prompt.endswith("Image 12: <|image|>. In Image 11, what shape is shown?")
    assert ToyVocab().decode(seq.tokens) == prompt


def test_vocab_rejects_unknown_words():
    with pytest.raises(ValueError):
        ToyVocab().encode("Image zebra")


def test_gen_tasks_deterministic_and_valid():
    cfg = EvalConfig(questions=30, n_values=(1, 5, 20), distractor_seeds=2)
    a, b = gen_tasks(cfg), gen_tasks(cfg)
    assert [t.to_dict() for t in a] == [t.to_dict() for t in b]
    for t in a:
        assert 1 <= t.needle_index <= t.n_images
        assert len(t.options) == 4 and len(set(t.options)) == 4
        assert sum(o == t.needle.get(t.attribute) for o in t.options) == 1
        assert t.options[t.answer_index] == t.needle.get(t.attribute)
        for imgs in t.image_sets:
            assert len(imgs) == t.n_images
            assert all(d.shape in SHAPES and d.color in COLORS for d in imgs)
            # default rate 0: distractors never share the queried attribute
            others = [d for i, d in enumerate(imgs, 1) if i != t.needle_index]
            assert all(d.get(t.attribute) != t.needle.get(t.attribute) for d in others)
        assert render_prompt(t)[0] == render_prompt(t)[0]


def test_same_attribute_rate_one_allows_matches():
    tasks = gen_tasks(EvalConfig(questions=40, n_values=(20,), same_attribute_rate=1.0))
    shared = sum(
        d.get(t.attribute) == t.needle.get(t.attribute)
        for t in tasks for i, d in enumerate(t.images, 1) if i != t.needle_index
    )
    assert shared > 0


def test_common_random_numbers_across_n():
    tasks = gen_tasks(EvalConfig(questions=200))
    by_q = {}
    for t in tasks:
        by_q.setdefault(t.question_id, {})[t.n_images] = t
    for per_n in by_q.values():
        ns = sorted(per_n)
        # the needle index is 1 on a shrinking, nested set of questions
        first = [per_n[n].needle_index == 1 for n in ns]
        assert first == sorted(first, reverse=True)
        assert len({tuple(per_n[n].options) for n in ns}) == 1


@settings(max_examples=25)
@given(st.integers(0, 10_000))
def test_placeholder_count_equals_n(seed):
    for t in gen_tasks(EvalConfig(questions=2, n_values=(1, 5, 17), rng_seed=seed)):
        _, seq = render_prompt(t)
        assert len(seq.placeholder_positions) == t.n_images == seq.num_slots


def test_oracle_reads_needle_for_every_task():
    cfg = EvalConfig(questions=40, n_values=(1, 10))
    oracle = OracleAdapter()
    for t in gen_tasks(cfg):
        _, seq = render_prompt(t)
        feats = encode_images_stub(seq.slot_keys(), cfg.patches_per_slot, 0, cfg.vision_dim)
        assert t.options[oracle.answer(seq, feats, t.options)] == t.needle.get(t.attribute)


def test_circular_eval_oracle_and_first_image():
    cfg = EvalConfig(questions=40, n_values=(1, 5, 50))
    tasks = gen_tasks(cfg)
    res = circular_eval(OracleAdapter(), tasks, cfg)
    assert [r.accuracy for r in res] == [1.0, 1.0, 1.0]
    res = circular_eval(FirstImageAdapter(), tasks, cfg)
    assert res[0].accuracy == 1.0
    acc = [r.accuracy for r in res]
    assert acc == sorted(acc, reverse=True) and acc[-1] < 0.2


def test_more_variants_never_raise_accuracy():
    tasks_cfg = EvalConfig(questions=200, n_values=(5,), distractor_seeds=2)
    tasks = gen_tasks(tasks_cfg)
    prev = 1.0
    for r in (1, 2, 3, 4):
        cfg = EvalConfig(questions=200, n_values=(5,), distractor_seeds=2, rotations=r)
        acc = circular_eval(make_adapter("random", 3), tasks, cfg)[0].accuracy
        assert acc <= prev
        prev = acc


class _Flaky:
    concurrent_safe = False

    def answer(self, prompt, features, options):
        raise RuntimeError("boom")


def test_adapter_failure_counts_wrong_and_is_flagged():
    cfg = EvalConfig(questions=5, n_values=(1,))
    r = circular_eval(_Flaky(), gen_tasks(cfg), cfg)[0]
    assert r.correct == 0 and r.failures == 5


def test_threads_give_identical_results(monkeypatch):
    cfg = EvalConfig(questions=30, n_values=(1, 10))
    tasks = gen_tasks(cfg)
    serial = circular_eval(make_adapter("random", 1), tasks, cfg)
    monkeypatch.setenv("HYPERATTN_THREADS", "4")
    threaded = circular_eval(make_adapter("random", 1), tasks, cfg)
    assert [(r.n_images, r.correct) for r in serial] == [(r.n_images, r.correct) for r in threaded]


def test_toy_model_adapter_is_total():
    cfg = EvalConfig(questions=3, n_values=(1, 3))
    model = build_model(ModelConfig(hidden_dim=16, n_layers=2, patches_per_slot=cfg.patches_per_slot))
    adapter = make_adapter("toy-model", model=model)
    res = circular_eval(adapter, gen_tasks(cfg), cfg)
    assert all(r.failures == 0 for r in res)


def test_make_adapter_errors():
    with pytest.raises(ValueError):
        make_adapter("gpt")
    with pytest.raises(ValueError):
        make_adapter("toy-model")


def test_config_validation():
    for kw in (dict(rotations=0), dict(rotations=5), dict(questions=0), dict(n_values=(0,)),
               dict(same_attribute_rate=2.0)):
        with pytest.raises(ValueError):
            EvalConfig(**kw)
    with pytest.raises(ValueError):
        circular_eval(OracleAdapter(), [], EvalConfig())


def test_expected_random_accuracy():
    assert expected_random_accuracy(4, 4, 1) == pytest.approx(0.00390625)


def test_task_json_and_results_csv(tmp_path):
    cfg = EvalConfig(questions=4, n_values=(1, 5), distractor_seeds=2)
    tasks = gen_tasks(cfg)
    save_tasks(tasks, tmp_path / "t.json")
    back = load_tasks(tmp_path / "t.json")
    assert [t.to_dict() for t in back] == [t.to_dict() for t in tasks]
    assert render_prompt(back[3], 1) == render_prompt(tasks[3], 1)
    res = circular_eval(OracleAdapter(), back, cfg)
    path = write_results(res, tmp_path / "r.csv")
    rows = list(csv.reader(path.open()))
    assert tuple(rows[0]) == RESULTS_HEADER
    assert rows[1] == ["1", "4", "4", "1.000000"]
