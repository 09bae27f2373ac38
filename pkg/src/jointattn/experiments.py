"""Paired-seed experiment matrix over head types on the synthetic task."""

from __future__ import annotations

import csv
import io
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .attention import AttentionTrace, gate_concentration
from .fusion import FUSED_HEADS, HEAD_TYPES, ModelSpec, build_model, dominance_metric
from .synthetic import SyntheticTaskSpec, generate_task
from .tensor_core import ConfigError, make_rng
from .training import TrainSchedule, WindowSpec, evaluate_breakdown, train

# single GRU layer: a stacked encoder carries evidence forward so far that
# late states are as informative as the salient ones (see README)
DEFAULT_GRU_LAYERS = (16,)
DEFAULT_ATTN_DIM = 16
DEFAULT_SCHEDULE = TrainSchedule(0.05, (400, 700, 920), 0.1, 1000, 0.9, 32)
DEFAULT_PRETRAIN = TrainSchedule(0.05, (), 0.1, 300, 0.9, 32)

HEAD_LABELS = {
    "separate_streams": "Average",
    "fc_fusion": "FC fusion",
    "branch_selection": "Branch selection (BS)",
    "branch_selection_l2": "BS with L2 norm",
    "spatial_attention": "Spatial attention (SA)",
    "jna": "JNA",
}


def salient_recovery(trace: AttentionTrace, mask, mask_t=None) -> float:
    """Share of sharing-gate mass on ground-truth salient frames.

    Alpha columns are scored against the spatial mask and beta rows against
    ``mask_t`` (defaults to ``mask``); the two sides are averaged.
    """
    mask = np.asarray(mask, dtype=bool)
    mask_t = mask if mask_t is None else np.asarray(mask_t, dtype=bool)
    t_len = trace.alpha.shape[0]
    if mask.shape != (t_len,) or mask_t.shape != (t_len,):
        raise ValueError(f"mask length must equal trace length {t_len}")
    side_a = trace.alpha[mask, :].sum(axis=0).mean()
    side_b = trace.beta[:, mask_t].sum(axis=1).mean()
    return float(0.5 * (side_a + side_b))


@dataclass
class ExperimentConfig:
    task: SyntheticTaskSpec = field(default_factory=SyntheticTaskSpec)
    schedule: TrainSchedule = DEFAULT_SCHEDULE
    pretrain: TrainSchedule | None = DEFAULT_PRETRAIN
    # heads whose streams are trained on their own before the fusion layer is added
    pretrain_heads: tuple[str, ...] = FUSED_HEADS
    gru_layers: tuple[int, ...] = DEFAULT_GRU_LAYERS
    attn_dim: int = DEFAULT_ATTN_DIM
    window: WindowSpec | None = None
    dominance_every: int = 25

    def window_spec(self) -> WindowSpec:
        return self.window or WindowSpec(self.task.seq_len, 1)

    def model_spec(self, head_type: str) -> ModelSpec:
        return ModelSpec(head_type=head_type, stream_dims=(self.task.dim_s, self.task.dim_t),
                         gru_layers=list(self.gru_layers), attn_dim=self.attn_dim,
                         num_classes=self.task.num_classes)


@dataclass
class ExperimentResult:
    head_type: str
    seed: int
    accuracy: float
    spatial_accuracy: float
    temporal_accuracy: float
    dominance_ratio: float  # held-out set, after training
    train_dominance_ratio: float  # geometric mean over joint-phase batches
    gate_entropy: float | None
    gate_support: float | None
    salient_recovery: float | None
    uniform_recovery: float
    wall_time: float = field(default=0.0, compare=False)


TABLE_FIELDS = [f.name for f in fields(ExperimentResult) if f.name != "wall_time"]


def _stack(pairs):
    xs = np.stack([p.seq_s for p in pairs])
    xt = np.stack([p.seq_t for p in pairs])
    y = np.array([p.label for p in pairs])
    return xs, xt, y


def run_cell(head_type: str, seed: int, config: ExperimentConfig, data=None) -> ExperimentResult:
    """Train and score one (head, seed) cell."""
    t0 = time.perf_counter()
    task = config.task.with_seed(seed)
    train_set, test_set = data if data is not None else generate_task(task)
    model = build_model(config.model_spec(head_type), make_rng(seed))
    window = config.window_spec()
    pretrain = config.pretrain if head_type in config.pretrain_heads else None
    report = train(model, train_set, config.schedule, window, make_rng(seed + 1_000_003),
                   pretrain=pretrain, seed=seed, dominance_every=config.dominance_every)
    acc = evaluate_breakdown(model, test_set, window)
    xs, xt, y = _stack(test_set)
    _, _, final_ratio = dominance_metric(model, xs, xt, y)
    ratios = [d["ratio"] for d in report.dominance]
    # geometric mean over the joint phase
    train_ratio = float(math.exp(np.mean(np.log(ratios)))) if ratios else final_ratio
    entropy = support = recovery = None
    if head_type == "jna":
        out = model.forward(xs, xt)
        model._state = None
        e, f, a, b = out.trace
        ents, sups, recs = [], [], []
        for k, pair in enumerate(test_set):
            tr = AttentionTrace(e[k], f[k], a[k], b[k])
            ha, hb, sup = gate_concentration(tr)
            ents.append(0.5 * (ha + hb))
            sups.append(sup)
            recs.append(salient_recovery(tr, pair.salient_mask, pair.salient_mask_t))
        entropy, support, recovery = float(np.mean(ents)), float(np.mean(sups)), float(np.mean(recs))
    return ExperimentResult(
        head_type=head_type, seed=seed, accuracy=acc["fused"], spatial_accuracy=acc["spatial"],
        temporal_accuracy=acc["temporal"], dominance_ratio=final_ratio, train_dominance_ratio=train_ratio,
        gate_entropy=entropy, gate_support=support, salient_recovery=recovery,
        uniform_recovery=task.salient_count / task.seq_len, wall_time=time.perf_counter() - t0)


def _cell_job(args):
    head, seed, config = args
    return run_cell(head, seed, config)


def run_experiment_matrix(heads, config: ExperimentConfig, seeds, jobs: int = 1) -> list[ExperimentResult]:
    """One result per (head, seed); every head sees the same data for a given seed."""
    heads = list(heads)
    for h in heads:
        if h not in HEAD_TYPES:
            raise ConfigError(f"unknown head type {h!r}")
    seeds = [int(s) for s in seeds]
    if jobs > 1:
        cells = [(h, s, config) for s in seeds for h in heads]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_cell_job, cells))
    results = []
    for s in seeds:
        data = generate_task(config.task.with_seed(s))
        for h in heads:
            results.append(run_cell(h, s, config, data))
    return results


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def results_csv(results: list[ExperimentResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TABLE_FIELDS)
    for r in results:
        d = asdict(r)
        w.writerow([_fmt(d[k]) for k in TABLE_FIELDS])
    return buf.getvalue()


def summarize(results: list[ExperimentResult]) -> dict[str, dict]:
    """Per-head means over seeds, in first-seen head order."""
    out: dict[str, dict] = {}
    for r in results:
        out.setdefault(r.head_type, []).append(r)
    summary = {}
    for head, rs in out.items():
        row = {"n": len(rs)}
        for k in ("accuracy", "spatial_accuracy", "temporal_accuracy", "dominance_ratio",
                  "train_dominance_ratio", "gate_entropy", "salient_recovery", "uniform_recovery"):
            vals = [getattr(r, k) for r in rs if getattr(r, k) is not None]
            row[k] = float(np.mean(vals)) if vals else None
        summary[head] = row
    return summary


def ordering_checks(results: list[ExperimentResult]) -> dict[str, bool | None]:
    """Relative orderings expected from the two-stream experiments; None if a head is missing."""
    s = summarize(results)
    checks: dict[str, bool | None] = {}
    if "jna" in s and "separate_streams" in s:
        checks["jna_accuracy_ge_average_fusion"] = s["jna"]["accuracy"] >= s["separate_streams"]["accuracy"]
    else:
        checks["jna_accuracy_ge_average_fusion"] = None
    if "jna" in s and "fc_fusion" in s:
        checks["fc_dominance_gt_jna"] = s["fc_fusion"]["dominance_ratio"] > s["jna"]["dominance_ratio"]
    else:
        checks["fc_dominance_gt_jna"] = None
    if "jna" in s and s["jna"]["salient_recovery"] is not None:
        checks["jna_recovery_above_uniform_by_0.10"] = (
            s["jna"]["salient_recovery"] >= s["jna"]["uniform_recovery"] + 0.10)
    return checks


def _cell(v, pct=True) -> str:
    if v is None:
        return "-"
    return f"{100 * v:.1f}%" if pct else f"{v:.3f}"


def results_table(results: list[ExperimentResult]) -> str:
    """Fusion-comparison layout: one row per head, means over seeds, plus ordering flags."""
    s = summarize(results)
    header = ["Method", "Spatial", "Temporal", "Fusion", "Dominance", "Gate entropy", "Salient rec.", "Seeds"]
    rows = []
    for head, row in s.items():
        rows.append([HEAD_LABELS.get(head, head), _cell(row["spatial_accuracy"]),
                     _cell(row["temporal_accuracy"]), _cell(row["accuracy"]),
                     _cell(row["dominance_ratio"], False), _cell(row["gate_entropy"], False),
                     _cell(row["salient_recovery"], False), str(row["n"])])
    widths = [max(len(str(x)) for x in col) for col in zip(header, *rows)]
    line = "+".join("-" * (w + 2) for w in widths)

    def fmt(r):
        return "|".join(f" {str(x).ljust(w)} " for x, w in zip(r, widths))

    out = [line, fmt(header), line, *[fmt(r) for r in rows], line]
    for name, ok in ordering_checks(results).items():
        flag = "n/a" if ok is None else ("PASS" if ok else "FAIL")
        out.append(f"[{flag}] {name}")
    return "\n".join(out) + "\n"
