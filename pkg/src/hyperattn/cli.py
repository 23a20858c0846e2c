"""Command-line entry point: ``hyperattn {demo,gradcheck,selftest,bench,distractor}``.

Every command prints its resolved configuration as JSON before running.
Exit status is 0 on success, 1 when a check fails and 2 for bad arguments.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import bench, distractor, validation
from .hyperattention import AttentionInputs, BlockParams, HatbParams, hatb_forward
from .interleave import build_cross_mask, build_rope_map, build_sequence, image, text
from .model import VARIANTS, ModelConfig, build_model


def _int_list(s: str) -> list[int]:
    try:
        return [int(x) for x in s.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {s!r}") from None


def _variants(s: str) -> list[str]:
    names = [x.strip() for x in s.split(",") if x.strip()]
    bad = [n for n in names if n not in VARIANTS]
    if bad:
        raise argparse.ArgumentTypeError(f"unknown variants {bad}; choose from {', '.join(VARIANTS)}")
    return names


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise SystemExit(_usage_error(f"cannot read config {path}: {exc}"))


def _usage_error(msg):
    print(f"error: {msg}", file=sys.stderr)
    return 2


def _print_config(command: str, config: dict) -> None:
    print(json.dumps({"command": command, "config": config}, indent=2, sort_keys=True, default=str))


def _model_config(args, base: dict | None = None, **defaults) -> ModelConfig:
    data = dict(defaults)
    data.update(base or {})
    if args.seed is not None:
        data["seed"] = args.seed
    if args.dim is not None:
        data["hidden_dim"] = args.dim
    if args.layers is not None:
        data["n_layers"] = args.layers
    if args.hatb_indices is not None:
        data["hatb_indices"] = args.hatb_indices
    return ModelConfig(**data)


# -- commands ---------------------------------------------------------------------


def cmd_demo(args) -> int:
    seed = 0 if args.seed is None else args.seed
    dim = 8 if args.dim is None else args.dim
    patches = 2
    _print_config("demo", {"seed": seed, "dim": dim, "n_heads": 2, "patches_per_slot": patches})
    rng = np.random.default_rng(seed)
    seq = build_sequence([text([5, 6]), image("cat"), text([7, 8]), image("dog"), text([9])])
    rope = build_rope_map(seq)
    mask = build_cross_mask(seq)
    print(f"\ntokens            {list(seq.tokens)}")
    print(f"placeholders      {seq.placeholder_positions}")
    print(f"visual positions  {rope.visual_key_positions.tolist()}  (one per slot, reused by its patches)")
    print("cross mask (token x slot, 1 = visible):")
    for t, row in enumerate(mask.visible):
        print(f"  t={t} tok={seq.tokens[t]:>3}  {row.astype(int).tolist()}")

    host = BlockParams.init(rng, dim, 2, 2 * dim)
    params = HatbParams.from_host(host)
    params.w_gate[:] = rng.standard_normal(dim) * dim**-0.5
    h_text = rng.standard_normal((len(seq), dim))
    h_img = rng.standard_normal((seq.num_slots * patches, dim))
    out = hatb_forward(AttentionInputs.from_sequence(seq, h_text, h_img, patches), params)
    np.set_printoptions(precision=4, suppress=True)
    print("\nper-token trace:")
    print("  t  bypass  gate    |h_self|  |h_cross|  |h_out|")
    for t in range(len(seq)):
        print(f"  {t}  {str(bool(out.bypass[t])):6}  {out.gate[t]:.4f}  {np.linalg.norm(out.h_self[t]):8.4f}"
              f"  {np.linalg.norm(out.h_cross[t]):9.4f}  {np.linalg.norm(out.h_out[t]):7.4f}")
    print("\ncross-attention probabilities, head 0 (token x visual patch):")
    print(out.cross_probs[0])
    print(f"\nadded parameters for this block: {params.added_parameter_count()} (2*D^2 + D = {2 * dim * dim + dim})")
    return 0


def cmd_gradcheck(args) -> int:
    seed = 0 if args.seed is None else args.seed
    dim = 8 if args.dim is None else args.dim
    layers = 3 if args.layers is None else args.layers
    variants = args.variants or list(VARIANTS)
    cfg = {"seed": seed, "dim": dim, "layers": layers, "hatb_indices": args.hatb_indices, "variants": variants,
           "hatb_cases": args.cases, "eps": validation.FD_EPS, "tolerance": validation.GRAD_TOL}
    _print_config("gradcheck", cfg)
    report = validation.gradcheck_suite(seed, dim, args.cases, layers, args.hatb_indices, variants)
    out = Path(args.out or "gradcheck.json")
    out.write_text(validation.to_json(report))
    print(f"max rel err {report['max_rel_err']:.3e} at {report['worst_location']}; "
          f"{'PASS' if report['pass'] else 'FAIL'}; report written to {out}")
    return 0 if report["pass"] else 1


def cmd_selftest(args) -> int:
    seed = 0 if args.seed is None else args.seed
    _print_config("selftest", {"seed": seed, "oracle_cases": args.cases})
    report = validation.selftest(seed, args.cases)
    for name, r in report.items():
        if name != "pass":
            print(f"{'PASS' if r['pass'] else 'FAIL'}  {name}")
    if args.out:
        Path(args.out).write_text(validation.to_json(report))
    return 0 if report["pass"] else 1


def cmd_bench(args) -> int:
    data = _read_json(args.config) if args.config else {}
    model_data = data.pop("config", {})
    cfg = _model_config(args, model_data)
    for flag, key in (("text_len", "text_len"), ("patches_per_slot", "patches_per_slot"),
                      ("repeats", "repeats"), ("memory_budget_floats", "memory_budget_floats")):
        if getattr(args, flag) is not None:
            data[key] = getattr(args, flag)
    data.pop("n_images", None)
    ns = args.n or [1, 10, 50, 100]
    variants = args.variants or ["hyper", "concat"]
    _print_config("bench", {"variants": variants, "n": ns, "workload": data, "model": asdict(cfg)})
    reports = []
    for v in variants:
        for n in ns:
            wl = bench.Workload(n_images=n, config=cfg, **data)
            try:
                r = bench.measure(v, cfg, wl, seed=cfg.seed)
            except bench.BudgetExceeded as exc:
                print(f"skip: {exc}", file=sys.stderr)
                continue
            ok = r.measured_lm_seq_len == r.lm_seq_len and r.measured_attn_flops == r.attn_flops
            print(f"{v:>14} N={n:<4} lm_seq_len={r.lm_seq_len:<6} attn_flops={r.attn_flops:<12} "
                  f"median={r.wall_ms_median:9.2f} ms  analytic={'match' if ok else 'MISMATCH'}")
            if not ok:
                return 1
            reports.append(r)
    if not reports:
        print("error: every measurement exceeded the memory budget", file=sys.stderr)
        return 1
    out = bench.emit_report(reports, args.out or "bench.csv")
    print(f"wrote {len(reports)} rows to {out}")
    return 0


def cmd_distractor(args) -> int:
    data = _read_json(args.config) if args.config else {}
    if args.n is not None:
        data["n_values"] = args.n
    if args.seed is not None:
        data["rng_seed"] = args.seed
    for key in ("questions", "rotations", "distractor_seeds"):
        if getattr(args, key) is not None:
            data[key] = getattr(args, key)
    model = None
    if args.adapter == "toy-model":
        mcfg = _model_config(args, None, patches_per_slot=data.get("patches_per_slot", 4),
                             vision_dim=data.get("vision_dim", 32))
        model = build_model(mcfg)
    try:
        config = distractor.EvalConfig(**data)
    except TypeError as exc:
        return _usage_error(f"bad distractor config: {exc}")
    _print_config("distractor", {"adapter": args.adapter, **asdict(config)})
    tasks = distractor.gen_tasks(config)
    if args.tasks_out:
        distractor.save_tasks(tasks, args.tasks_out)
    adapter = distractor.make_adapter(args.adapter, config.rng_seed, model)
    results = distractor.circular_eval(adapter, tasks, config)
    for r in results:
        flag = f"  ({r.failures} adapter failures)" if r.failures else ""
        print(f"N={r.n_images:<4} accuracy={r.accuracy:.3f} ({r.correct}/{r.questions}){flag}")
    out = distractor.write_results(results, args.out or "distractor.csv")
    print(f"wrote {out}")
    return 0


# -- parser -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hyperattn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, model_flags=True):
        p.add_argument("--config", help="JSON file with the command's configuration")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output path")
        if model_flags:
            p.add_argument("--dim", type=int, help="hidden size D")
            p.add_argument("--layers", type=int, help="number of transformer layers")
            p.add_argument("--hatb-indices", type=_int_list, help="comma-separated fusion layer indices")
        return p

    p = common(sub.add_parser("demo", help="worked 2-image HATB forward trace"))
    p.set_defaults(func=cmd_demo)

    p = common(sub.add_parser("gradcheck", help="finite-difference gradient validation"))
    p.add_argument("--variants", type=_variants)
    p.add_argument("--cases", type=int, default=20, help="randomized HATB cases")
    p.set_defaults(func=cmd_gradcheck)

    p = common(sub.add_parser("selftest", help="oracle-equivalence and invariant suites"), model_flags=False)
    p.add_argument("--cases", type=int, default=100, help="oracle-equivalence cases")
    p.set_defaults(func=cmd_selftest)

    p = common(sub.add_parser("bench", help="fusion-variant cost benchmark"))
    p.add_argument("--variants", type=_variants)
    p.add_argument("--n", type=_int_list, help="image counts, comma-separated")
    p.add_argument("--text-len", type=int)
    p.add_argument("--patches-per-slot", type=int)
    p.add_argument("--repeats", type=int)
    p.add_argument("--memory-budget-floats", type=int)
    p.set_defaults(func=cmd_bench)

    p = common(sub.add_parser("distractor", help="distractor-resistance evaluation"))
    p.add_argument("--adapter", choices=("oracle", "random", "first-image", "toy-model"), default="oracle")
    p.add_argument("--n", type=_int_list, help="image counts, comma-separated")
    p.add_argument("--questions", type=int)
    p.add_argument("--rotations", type=int)
    p.add_argument("--distractor-seeds", type=int)
    p.add_argument("--tasks-out", help="write the generated task set as JSON")
    p.set_defaults(func=cmd_distractor)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except SystemExit as exc:
        return int(exc.code or 0)
    except (ValueError, TypeError) as exc:
        # bad config values or unknown config keys from the dataclasses
        return _usage_error(str(exc))


def main() -> None:
    sys.exit(run())
