"""Cost models and wall-clock measurements for the fusion variants.

Analytic counts cover the attention score products (``2 * Lq * Lk * D`` per
attention call), per-weight-group projection FLOPs, added parameters and the
size of the key/value cache a decoder would keep.  ``measure`` times real
forward passes of the toy model and cross-checks the analytic sequence length
and attention FLOPs against what the model actually computed.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .interleave import build_sequence, image, text
from .model import ModelConfig, build_model, count_params, encode_images_stub, forward
from .ops import Trace

CSV_HEADER = (
    "variant",
    "n_images",
    "lm_seq_len",
    "added_params",
    "attn_flops",
    "kv_cache_floats",
    "wall_ms_median",
    "wall_ms_p10",
    "wall_ms_p90",
)


class BudgetExceeded(RuntimeError):
    pass


@dataclass
class Workload:
    n_images: int
    patches_per_slot: int = 16
    text_len: int = 256
    config: ModelConfig = field(default_factory=ModelConfig)
    repeats: int = 5
    memory_budget_floats: int | None = None

    def __post_init__(self):
        if self.n_images < 0 or self.patches_per_slot <= 0 or self.text_len <= 0:
            raise ValueError("workload sizes must be positive")
        if self.repeats < 3:
            raise ValueError(f"repeats must be >= 3, got {self.repeats}")

    @classmethod
    def from_json(cls, text_: str) -> "Workload":
        data = json.loads(text_)
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown Workload fields: {sorted(unknown)}")
        if "config" in data:
            data["config"] = ModelConfig(**data["config"])
        return cls(**data)


@dataclass
class CostReport:
    variant: str
    n_images: int
    lm_seq_len: int
    added_params: int
    attn_flops: int
    kv_cache_floats: int
    proj_flops: dict = field(default_factory=dict)
    wall_ms_median: float = math.nan
    wall_ms_p10: float = math.nan
    wall_ms_p90: float = math.nan
    peak_floats: int = 0
    measured_lm_seq_len: int | None = None
    measured_attn_flops: int | None = None

    def csv_row(self) -> list:
        return [getattr(self, name) for name in CSV_HEADER]


def added_params(variant: str, config: ModelConfig) -> int:
    """Closed-form count of the parameters a fusion variant adds."""
    D = config.hidden_dim
    if variant == "concat":
        return 0
    cfg = _with_variant(config, variant)
    k = len(cfg.fusion_layers())
    if variant == "hyper":
        per = 2 * D * D
        per += D if config.adaptive_gate else 1
        per += 1 if config.gate_bias and config.adaptive_gate else 0
        per += 0 if config.shared_layernorm else 2 * D
        return k * per
    # own layer norm, query, stacked key/value, output, gate
    return k * (2 * D + D * D + 2 * D * D + D * D + D)


def _with_variant(config: ModelConfig, variant: str) -> ModelConfig:
    data = asdict(config)
    data["variant"] = variant
    return ModelConfig(**data)


def cost_model(variant: str, config: ModelConfig, workload: Workload) -> CostReport:
    cfg = _with_variant(config, variant)
    t, N, v = workload.text_len, workload.n_images, workload.patches_per_slot
    D, nl, V, F = cfg.hidden_dim, cfg.n_layers, cfg.vocab_size, cfg.ffn_dim
    Nv = N * v
    k = len(cfg.fusion_layers())

    if variant == "concat":
        lm = t + Nv
        attn = nl * 2 * lm * lm * D
        kv = 2 * lm * D * nl
    else:
        lm = t
        attn = nl * 2 * t * t * D + k * 2 * t * Nv * D
        kv = 2 * lm * D * nl + 2 * Nv * D * k

    proj = {
        "vision_projection": 2 * Nv * cfg.vision_dim * D,
        "attention_qkvo": nl * 2 * lm * 4 * D * D,
        "ffn": nl * 2 * lm * 2 * D * F,
        "head": 2 * lm * D * V,
    }
    if variant == "hyper":
        proj["visual_kv"] = k * 2 * Nv * 2 * D * D
    elif variant != "concat":
        proj["visual_kv"] = k * 2 * Nv * 2 * D * D
        proj["cross_q_o"] = k * 2 * t * 2 * D * D
    peak = cfg.n_heads * max(lm * lm, t * Nv if variant != "concat" else 0) + kv
    return CostReport(variant, N, lm, added_params(variant, cfg), attn, kv, proj, peak_floats=peak)


def workload_sequence(workload: Workload, vocab_size: int, image_token_id: int, seed: int = 0):
    """``text_len`` tokens with ``n_images`` placeholders spread evenly."""
    t, N = workload.text_len, workload.n_images
    if N > t:
        raise ValueError(f"cannot place {N} placeholders in {t} tokens")
    rng = np.random.default_rng(seed)
    ids = rng.integers(0, vocab_size - 1, size=t)
    ids[ids == image_token_id] = 0
    places = {(2 * i + 1) * t // (2 * N) for i in range(N)} if N else set()
    segments, run = [], []
    for pos in range(t):
        if pos in places:
            if run:
                segments.append(text(run))
                run = []
            segments.append(image(f"bench{pos}"))
        else:
            run.append(int(ids[pos]))
    if run:
        segments.append(text(run))
    return build_sequence(segments, image_token_id=image_token_id)


def measure(variant: str, config: ModelConfig, workload: Workload, seed: int = 0, warmup: int = 1) -> CostReport:
    report = cost_model(variant, config, workload)
    if workload.memory_budget_floats is not None and report.peak_floats > workload.memory_budget_floats:
        raise BudgetExceeded(
            f"{variant} at N={workload.n_images} needs ~{report.peak_floats} floats, "
            f"budget is {workload.memory_budget_floats}"
        )
    cfg = _with_variant(config, variant)
    if cfg.patches_per_slot != workload.patches_per_slot:
        data = asdict(cfg)
        data["patches_per_slot"] = workload.patches_per_slot
        cfg = ModelConfig(**data)
    model = build_model(cfg)
    seq = workload_sequence(workload, cfg.vocab_size, cfg.image_token_id, seed)
    feats = encode_images_stub(seq.slot_keys(), cfg.patches_per_slot, seed, cfg.vision_dim)

    trace = Trace()
    forward(model, seq, feats, trace=trace)
    for _ in range(warmup - 1):
        forward(model, seq, feats)
    times = []
    for _ in range(workload.repeats):
        start = time.perf_counter()
        forward(model, seq, feats)
        times.append((time.perf_counter() - start) * 1e3)
    p10, med, p90 = np.percentile(times, [10, 50, 90])
    report.wall_ms_median, report.wall_ms_p10, report.wall_ms_p90 = float(med), float(p10), float(p90)
    report.measured_lm_seq_len = trace.lm_seq_len
    report.measured_attn_flops = trace.attn_flops
    report.added_params = count_params(model).added_by_fusion
    return report


def emit_report(reports, path) -> Path:
    reports = list(reports)
    if not reports:
        raise ValueError("no reports to write")
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for r in reports:
            w.writerow(r.csv_row())
    return path


def read_report(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_HEADER:
            raise ValueError(f"unexpected CSV header {reader.fieldnames}")
        rows = []
        for row in reader:
            parsed = {}
            for k, val in row.items():
                if k == "variant":
                    parsed[k] = val
                elif k.startswith("wall_ms"):
                    parsed[k] = float(val)
                else:
                    parsed[k] = int(val)
            rows.append(parsed)
    return rows


def slope_ratio(reports) -> float:
    """Concat wall-time slope over hyper's, between the smallest and largest N."""
    by = {}
    for r in reports:
        by.setdefault(r.variant, []).append(r)

    def slope(rs):
        rs = sorted(rs, key=lambda r: r.n_images)
        lo, hi = rs[0], rs[-1]
        return (hi.wall_ms_median - lo.wall_ms_median) / (hi.n_images - lo.n_images)

    return slope(by["concat"]) / slope(by["hyper"])
