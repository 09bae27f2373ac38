"""Command-line entry point: ``jointattn <subcommand> ...``.

Subcommands: generate, train, eval, matrix, trace, gradcheck. Every command
returns 0 on success; errors print ``error: ...`` to stderr and return 2
(gradcheck returns 1 when a suite fails its tolerance).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .experiments import (
    DEFAULT_PRETRAIN,
    DEFAULT_SCHEDULE,
    ExperimentConfig,
    results_csv,
    results_table,
    run_experiment_matrix,
)
from .fusion import FUSED_HEADS, HEAD_TYPES, ModelSpec, TwoStreamModel, build_model, dominance_metric, model_forward
from .gradcheck import SUITES, run_suites
from .synthetic import SyntheticTaskSpec, generate_task, load_dataset, save_dataset
from .tensor_core import ConfigError, StateError, make_rng
from .traces import export_traces
from .training import PRESETS, TrainingDivergedError, WindowSpec, evaluate_breakdown, train

SCHEDULES = {"harness": DEFAULT_SCHEDULE, **PRESETS}
TASK_FLAGS = {
    "num_classes": int, "dim_s": int, "dim_t": int, "seq_len": int, "salient_count": int,
    "noise_sigma": float, "cross_stream_rho": float, "train_size": int, "test_size": int,
    "seed": int, "signal_scale": float, "signal_scale_t": float,
}


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _head_list(text: str) -> list[str]:
    heads = [h.strip() for h in text.split(",") if h.strip()]
    bad = [h for h in heads if h not in HEAD_TYPES]
    if bad:
        raise argparse.ArgumentTypeError(f"unknown head type(s) {bad}; choose from {list(HEAD_TYPES)}")
    return heads


def _read_json(path: str) -> dict:
    return json.loads(Path(path).read_text())


def _task_from_args(args) -> SyntheticTaskSpec:
    base = SyntheticTaskSpec.from_dict(_read_json(args.task_config)) if args.task_config else SyntheticTaskSpec()
    overrides = {k: getattr(args, k) for k in TASK_FLAGS if getattr(args, k, None) is not None}
    return replace(base, **overrides)


def _add_task_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--task-config", help="JSON file with SyntheticTaskSpec fields")
    for name, kind in TASK_FLAGS.items():
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=kind)


def _add_window_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--window-len", type=int, help="frames per window (default: whole sequence)")
    p.add_argument("--stride", type=int, default=1)


def _window(args, seq_len: int) -> WindowSpec:
    return WindowSpec(args.window_len or seq_len, args.stride)


def _schedule(args):
    sched = SCHEDULES[args.schedule]
    if args.iters is not None:
        sched = sched.scaled(args.iters)
    overrides = {}
    if args.lr is not None:
        overrides["base_lr"] = args.lr
    if args.batch_size is not None:
        overrides["batch_size"] = args.batch_size
    return replace(sched, **overrides) if overrides else sched


def _add_schedule_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--schedule", choices=sorted(SCHEDULES), default="harness")
    p.add_argument("--iters", type=int, help="rescale the schedule to this many joint iterations")
    p.add_argument("--lr", type=float, help="override the base learning rate")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--pretrain-iters", type=int,
                   help=f"per-branch pretraining iterations (default {DEFAULT_PRETRAIN.max_iters} "
                        "for fused heads, 0 otherwise)")


def _pretrain(args, head: str):
    iters = args.pretrain_iters
    if iters is None:
        return DEFAULT_PRETRAIN if head in FUSED_HEADS else None
    if iters <= 0:
        return None
    return replace(DEFAULT_PRETRAIN, max_iters=iters)


def cmd_generate(args) -> int:
    spec = _task_from_args(args)
    train_set, test_set = generate_task(spec)
    save_dataset(args.out, spec, train_set, test_set)
    print(f"wrote {len(train_set)} train / {len(test_set)} test pairs to {args.out}")
    return 0


def cmd_train(args) -> int:
    task, train_set, test_set = load_dataset(args.data)
    if args.model_config:
        spec = ModelSpec.from_dict(_read_json(args.model_config))
    else:
        spec = ModelSpec(head_type=args.head, stream_dims=(task.dim_s, task.dim_t),
                         gru_layers=args.gru_layers, attn_dim=args.attn_dim, num_classes=task.num_classes,
                         spatial_grid=args.spatial_grid)
    model = build_model(spec, make_rng(args.seed))
    window = _window(args, task.seq_len)
    report = train(model, train_set, _schedule(args), window, make_rng(args.seed + 1_000_003),
                   pretrain=_pretrain(args, spec.head_type), seed=args.seed,
                   dominance_every=args.dominance_every, grad_clip=args.grad_clip)
    metrics = evaluate_breakdown(model, test_set, window)
    xs = np.stack([p.seq_s for p in test_set])
    xt = np.stack([p.seq_t for p in test_set])
    y = np.array([p.label for p in test_set])
    metrics["dominance_ratio"] = dominance_metric(model, xs, xt, y)[2]
    report.final_metrics = metrics
    model.save(args.out)
    if args.report:
        Path(args.report).write_text(json.dumps(report.to_dict(), indent=1))
    print(json.dumps(metrics, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    model = TwoStreamModel.load(args.checkpoint)
    task, train_set, test_set = load_dataset(args.data)
    data = test_set if args.split == "test" else train_set
    print(json.dumps(evaluate_breakdown(model, data, _window(args, task.seq_len)), sort_keys=True))
    return 0


def cmd_matrix(args) -> int:
    config = ExperimentConfig(task=_task_from_args(args), schedule=_schedule(args),
                              gru_layers=tuple(args.gru_layers), attn_dim=args.attn_dim,
                              dominance_every=args.dominance_every)
    if args.pretrain_iters is not None:
        iters = args.pretrain_iters
        config.pretrain = replace(DEFAULT_PRETRAIN, max_iters=iters) if iters > 0 else None
    if args.window_len:
        config.window = WindowSpec(args.window_len, args.stride)
    results = run_experiment_matrix(args.heads, config, args.seeds, jobs=args.jobs)
    table = results_table(results)
    if args.out_csv:
        Path(args.out_csv).write_text(results_csv(results))
    if args.out_table:
        Path(args.out_table).write_text(table)
    sys.stdout.write(table)
    return 0


def cmd_trace(args) -> int:
    model = TwoStreamModel.load(args.checkpoint)
    if model.head_type != "jna":
        raise ConfigError(f"trace export needs a jna checkpoint, got head {model.head_type!r}")
    _, train_set, test_set = load_dataset(args.data)
    data = test_set if args.split == "test" else train_set
    items = []
    for idx in args.indices:
        if not 0 <= idx < len(data):
            raise ValueError(f"sequence index {idx} outside [0, {len(data)})")
        _, trace = model_forward(model, data[idx].seq_s, data[idx].seq_t)
        items.append((idx, trace))
    export_traces(items, args.out)
    print(f"wrote traces for {len(items)} sequence(s) to {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    results = run_suites(seeds=args.seeds, names=args.suite or None)
    width = max(len(r.name) for r in results)
    for r in results:
        flag = "PASS" if r.passed else "FAIL"
        print(f"[{flag}] {r.name.ljust(width)}  max_rel_err={r.max_rel_error:.3e}  "
              f"tol={r.tolerance:.0e}  ({r.seeds} seeds, {r.seconds:.2f}s)")
    return 0 if all(r.passed for r in results) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="jointattn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic two-stream dataset")
    _add_task_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train one head on a dataset file")
    p.add_argument("--data", required=True)
    p.add_argument("--head", choices=HEAD_TYPES, default="jna")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="checkpoint path (JSON)")
    p.add_argument("--report", help="training report path (JSON)")
    p.add_argument("--model-config", help="JSON file with ModelSpec fields (overrides --head)")
    p.add_argument("--gru-layers", type=_int_list, default=[16])
    p.add_argument("--attn-dim", type=int, default=16)
    p.add_argument("--spatial-grid", type=int, default=2)
    p.add_argument("--dominance-every", type=int, default=25)
    p.add_argument("--grad-clip", type=float)
    _add_schedule_flags(p)
    _add_window_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("test", "train"), default="test")
    _add_window_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("matrix", help="paired-seed experiment grid over head types")
    p.add_argument("--heads", type=_head_list, default=["jna", "separate_streams", "fc_fusion"])
    p.add_argument("--seeds", type=_int_list, default=[0, 1, 2, 3, 4])
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out-csv")
    p.add_argument("--out-table")
    p.add_argument("--gru-layers", type=_int_list, default=[16])
    p.add_argument("--attn-dim", type=int, default=16)
    p.add_argument("--dominance-every", type=int, default=25)
    _add_task_flags(p)
    _add_schedule_flags(p)
    _add_window_flags(p)
    p.set_defaults(func=cmd_matrix)

    p = sub.add_parser("trace", help="export joint-attention traces for chosen sequences")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--indices", type=_int_list, default=[0])
    p.add_argument("--split", choices=("test", "train"), default="test")
    p.add_argument("--out", required=True, help=".csv (plus .summary.csv) or .json")
    p.set_defaults(func=cmd_trace)

    p = sub.add_parser("gradcheck", help="run the finite-difference suites")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--suite", action="append", choices=[s.name for s in SUITES])
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except (OSError, ValueError, KeyError, StateError, TrainingDivergedError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
