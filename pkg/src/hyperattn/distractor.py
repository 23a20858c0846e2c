"""Distractor-resistance evaluation on synthetic needle tasks.

Each question shows ``N`` images, asks about image ``X`` and offers four
options.  Under circular evaluation a question only counts as correct when
the adapter answers every option rotation (and every distractor resample)
correctly.

Images are procedural ``(shape, color)`` descriptors rendered by the vision
stub, so there is a ground truth to check against.  Tasks for different ``N``
share their random draws: question ``q`` keeps the same needle, options and
per-position distractors for every ``N``, and the needle index is drawn from
one uniform number per question.  This keeps accuracy curves comparable
across ``N`` without extra sampling noise.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Protocol

import numpy as np

from .interleave import IMAGE_TOKEN, IMAGE_TOKEN_ID, InterleavedSequence, build_sequence, image, text
from .model import COLORS, SHAPES, Model, descriptor_image_id, encode_images_stub, forward, read_descriptor

DEFAULT_N_VALUES = (1, 5, 10, 20, 50, 100, 200, 400)
N_OPTIONS = 4
QUESTIONS = {"shape": "what shape is shown?", "color": "what color is the shape?"}
PALETTE = {"shape": SHAPES, "color": COLORS}
RESULTS_HEADER = ("n_images", "questions", "correct", "accuracy")


# -- toy vocabulary -------------------------------------------------------------

_WORDS = ("Image", "In", ":", ".", ",", "?", *"0123456789", "what", "shape", "color", "is", "shown", "the",
          *SHAPES, *COLORS)
_TOKEN_RE = re.compile(re.escape(IMAGE_TOKEN) + r"|\d|[A-Za-z]+|[^\sA-Za-z\d]")


class ToyVocab:
    """Word-level vocabulary for the prompt template; digits are single tokens."""

    def __init__(self, image_token_id: int = IMAGE_TOKEN_ID):
        self.image_token_id = image_token_id
        self.ids = {w: i for i, w in enumerate(_WORDS)}
        self.words = {i: w for w, i in self.ids.items()}
        if image_token_id in self.words:
            raise ValueError("image token id collides with a word id")

    def encode(self, s: str) -> list[int]:
        out = []
        for tok in _TOKEN_RE.findall(s):
            if tok == IMAGE_TOKEN:
                out.append(self.image_token_id)
            elif tok in self.ids:
                out.append(self.ids[tok])
            else:
                raise ValueError(f"word {tok!r} not in toy vocabulary")
        return out

    def decode(self, ids) -> str:
        parts = [IMAGE_TOKEN if i == self.image_token_id else self.words[i] for i in ids]
        s = " ".join(parts)
        s = re.sub(r"(?<=\d) (?=\d)", "", s)
        return re.sub(r" ([:.,?])", r"\1", s)


# -- tasks ----------------------------------------------------------------------


@dataclass(frozen=True)
class Descriptor:
    shape: str
    color: str

    def get(self, attribute: str) -> str:
        return getattr(self, attribute)


@dataclass
class NeedleTask:
    question_id: int
    n_images: int
    needle_index: int  # 1-based
    image_sets: list[list[Descriptor]]  # one image list per distractor resample
    attribute: str
    question: str
    options: list[str]
    answer_index: int

    @property
    def images(self) -> list[Descriptor]:
        return self.image_sets[0]

    @property
    def needle(self) -> Descriptor:
        return self.images[self.needle_index - 1]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NeedleTask":
        d = dict(d)
        d["image_sets"] = [[Descriptor(**x) for x in s] for s in d["image_sets"]]
        return cls(**d)


@dataclass
class EvalConfig:
    n_values: tuple[int, ...] = DEFAULT_N_VALUES
    rotations: int = N_OPTIONS
    distractor_seeds: int = 1
    questions: int = 50
    rng_seed: int = 0
    patches_per_slot: int = 4
    vision_dim: int = 32
    feature_seed: int = 0
    # chance that a distractor shares the needle's queried attribute
    same_attribute_rate: float = 0.0

    def __post_init__(self):
        self.n_values = tuple(int(n) for n in self.n_values)
        if any(n < 1 for n in self.n_values):
            raise ValueError("n_values must be positive")
        if not 1 <= self.rotations <= N_OPTIONS:
            raise ValueError(f"rotations must be in [1, {N_OPTIONS}]")
        if self.distractor_seeds < 1 or self.questions < 1:
            raise ValueError("distractor_seeds and questions must be >= 1")
        if not 0.0 <= self.same_attribute_rate <= 1.0:
            raise ValueError("same_attribute_rate must be in [0, 1]")


def _needle_index(u: float, n: int) -> int:
    # uniform on 1..n; X == 1 exactly when u < 1/n, so {X == 1} shrinks as n grows
    if u < 1.0 / n:
        return 1
    x = 2 + int((u - 1.0 / n) / (1.0 - 1.0 / n) * (n - 1))
    return min(x, n)


def _draw(rng) -> Descriptor:
    return Descriptor(SHAPES[rng.integers(len(SHAPES))], COLORS[rng.integers(len(COLORS))])


def _distractor(rng, needle: Descriptor, attribute: str, rate: float) -> Descriptor:
    d = _draw(rng)
    if d.get(attribute) == needle.get(attribute) and rng.random() >= rate:
        others = [x for x in PALETTE[attribute] if x != needle.get(attribute)]
        value = others[rng.integers(len(others))]
        d = Descriptor(value, d.color) if attribute == "shape" else Descriptor(d.shape, value)
    return d


def gen_tasks(config: EvalConfig) -> list[NeedleTask]:
    tasks = []
    for q in range(config.questions):
        qrng = np.random.default_rng([config.rng_seed, q])
        attribute = ("shape", "color")[qrng.integers(2)]
        needle = _draw(qrng)
        values = PALETTE[attribute]
        wrong = [x for x in values if x != needle.get(attribute)]
        picked = [wrong[i] for i in qrng.choice(len(wrong), N_OPTIONS - 1, replace=False)]
        options = picked + [needle.get(attribute)]
        order = qrng.permutation(N_OPTIONS)
        options = [options[i] for i in order]
        answer = options.index(needle.get(attribute))
        u = qrng.random()
        for n in config.n_values:
            x = _needle_index(u, n)
            sets = []
            for s in range(config.distractor_seeds):
                imgs = [
                    needle if i == x else _distractor(
                        np.random.default_rng([config.rng_seed, q, s, i]), needle, attribute, config.same_attribute_rate
                    )
                    for i in range(1, n + 1)
                ]
                sets.append(imgs)
            tasks.append(NeedleTask(q, n, x, sets, attribute, QUESTIONS[attribute], list(options), answer))
    return tasks


def save_tasks(tasks, path) -> None:
    Path(path).write_text(json.dumps([t.to_dict() for t in tasks], indent=1))


def load_tasks(path) -> list[NeedleTask]:
    return [NeedleTask.from_dict(d) for d in json.loads(Path(path).read_text())]


def render_prompt(task: NeedleTask, image_set: int = 0, image_token_id: int = IMAGE_TOKEN_ID):
    """Returns ``(prompt_text, InterleavedSequence)`` for one distractor resample."""
    vocab = ToyVocab(image_token_id)
    head = " ".join(f"Image {i}: {IMAGE_TOKEN}" for i in range(1, task.n_images + 1))
    prompt = f"{head}. In Image {task.needle_index}, {task.question}"
    segments = []
    images = task.image_sets[image_set]
    pieces = prompt.split(IMAGE_TOKEN)
    for i, piece in enumerate(pieces):
        if piece.strip():
            segments.append(text(vocab.encode(piece)))
        if i < len(images):
            d = images[i]
            uid = f"q{task.question_id}s{image_set}i{i + 1}"
            segments.append(image(descriptor_image_id(d.shape, d.color, uid)))
    return prompt, build_sequence(segments, image_token_id=image_token_id)


# -- adapters -------------------------------------------------------------------


class ModelAdapter(Protocol):
    concurrent_safe: bool

    def answer(self, prompt: InterleavedSequence, features: np.ndarray, options: list[str]) -> int: ...


_ASK_RE = re.compile(r"In Image (\d+), (.*)$")


def _parse_question(prompt: InterleavedSequence) -> tuple[int, str]:
    s = ToyVocab(prompt.image_token_id).decode(prompt.tokens)
    m = _ASK_RE.search(s)
    if m is None:
        raise ValueError(f"cannot parse question from {s[-60:]!r}")
    question = m.group(2)
    attribute = next(a for a, q in QUESTIONS.items() if q == question)
    return int(m.group(1)), attribute


def _pick(value: str, options: list[str]) -> int:
    return options.index(value) if value in options else 0


class OracleAdapter:
    """Reads the descriptor of the asked-about image straight from its features."""

    concurrent_safe = True

    def answer(self, prompt, features, options):
        x, attribute = _parse_question(prompt)
        shape, color = read_descriptor(features[x - 1, 0])
        return _pick(shape if attribute == "shape" else color, options)


class FirstImageAdapter:
    """Ignores the image index and always answers about image 1."""

    concurrent_safe = True

    def answer(self, prompt, features, options):
        _, attribute = _parse_question(prompt)
        shape, color = read_descriptor(features[0, 0])
        return _pick(shape if attribute == "shape" else color, options)


class RandomAdapter:
    """Uniform guess, deterministic per (seed, prompt, option order)."""

    concurrent_safe = True

    def __init__(self, seed: int = 0):
        self.seed = seed

    def answer(self, prompt, features, options):
        h = hashlib.blake2b(digest_size=8)
        h.update(str(self.seed).encode())
        h.update(np.asarray(prompt.tokens, dtype=np.int64).tobytes())
        h.update("|".join(options).encode())
        return int.from_bytes(h.digest(), "little") % len(options)


class ToyModelAdapter:
    """Scores each option word by the toy LM's next-token logit after the prompt."""

    concurrent_safe = True

    def __init__(self, model: Model):
        self.model = model
        self.vocab = ToyVocab(model.config.image_token_id)

    def answer(self, prompt, features, options):
        out = forward(self.model, prompt, features)
        last = out.logits[out.text_index[-1]]
        scores = [last[self.vocab.ids[o]] for o in options]
        return int(np.argmax(scores))


def make_adapter(name: str, seed: int = 0, model: Model | None = None) -> ModelAdapter:
    if name == "oracle":
        return OracleAdapter()
    if name == "random":
        return RandomAdapter(seed)
    if name == "first-image":
        return FirstImageAdapter()
    if name == "toy-model":
        if model is None:
            raise ValueError("toy-model adapter needs a model")
        return ToyModelAdapter(model)
    raise ValueError(f"unknown adapter {name!r}; expected oracle, random, first-image or toy-model")


# -- circular evaluation --------------------------------------------------------


@dataclass
class NResult:
    n_images: int
    questions: int = 0
    correct: int = 0
    failures: int = 0

    @property
    def accuracy(self) -> float:
        return self.correct / self.questions if self.questions else 0.0


def expected_random_accuracy(n_options: int, rotations: int, seeds: int) -> float:
    return (1.0 / n_options) ** (rotations * seeds)


def _rotate(options, r):
    return options[r:] + options[:r]


def _evaluate(adapter, task: NeedleTask, config: EvalConfig, image_token_id: int) -> tuple[bool, bool]:
    """Returns ``(correct, had_failure)`` for one question."""
    ok, failed = True, False
    for s in range(config.distractor_seeds):
        _, seq = render_prompt(task, s, image_token_id)
        feats = encode_images_stub(seq.slot_keys(), config.patches_per_slot, config.feature_seed, config.vision_dim)
        for r in range(config.rotations):
            options = _rotate(task.options, r)
            target = (task.answer_index - r) % len(options)
            try:
                choice = adapter.answer(seq, feats, options)
            except Exception:
                failed = True
                ok = False
                continue
            if choice != target:
                ok = False
    return ok, failed


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("HYPERATTN_THREADS", "1")))
    except ValueError:
        return 1


def circular_eval(adapter, tasks, config: EvalConfig, image_token_id: int = IMAGE_TOKEN_ID) -> list[NResult]:
    tasks = list(tasks)
    if not tasks:
        raise ValueError("no tasks to evaluate")
    threads = _threads()
    if threads > 1 and getattr(adapter, "concurrent_safe", False):
        with ThreadPoolExecutor(threads) as pool:
            outcomes = list(pool.map(lambda t: _evaluate(adapter, t, config, image_token_id), tasks))
    else:
        outcomes = [_evaluate(adapter, t, config, image_token_id) for t in tasks]
    results: dict[int, NResult] = {}
    for task, (ok, failed) in zip(tasks, outcomes):
        r = results.setdefault(task.n_images, NResult(task.n_images))
        r.questions += 1
        r.correct += int(ok)
        r.failures += int(failed)
    return [results[n] for n in sorted(results)]


def write_results(results, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RESULTS_HEADER)
        for r in results:
            w.writerow([r.n_images, r.questions, r.correct, f"{r.accuracy:.6f}"])
    return path
