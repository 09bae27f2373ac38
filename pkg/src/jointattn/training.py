"""Staged learning-rate schedules, fixed-length windows, the train loop and evaluation."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from decimal import Decimal
from typing import Sequence

import numpy as np

from .fusion import TwoStreamModel, dominance_metric
from .tensor_core import (
    DTYPE,
    ConfigError,
    sgd_momentum_step,
    softmax_cross_entropy,
    zero_grads,
)

log = logging.getLogger(__name__)


class TrainingDivergedError(FloatingPointError):
    """Raised at the first non-finite loss or gradient."""


@dataclass(frozen=True)
class TrainSchedule:
    base_lr: float
    milestones: tuple[int, ...]
    decay_factor: float = 0.1
    max_iters: int = 1000
    momentum: float = 0.9
    batch_size: int = 64

    def __post_init__(self) -> None:
        object.__setattr__(self, "milestones", tuple(int(m) for m in self.milestones))
        if not self.base_lr > 0:
            raise ConfigError("base_lr must be positive")
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ConfigError(f"milestones must be strictly increasing: {self.milestones}")
        if self.milestones and self.milestones[-1] >= self.max_iters:
            raise ConfigError("milestones must lie below max_iters")
        if not 0.0 < self.decay_factor < 1.0:
            raise ConfigError("decay_factor must lie in (0, 1)")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.max_iters < 0 or self.batch_size < 1:
            raise ConfigError("max_iters must be >= 0 and batch_size >= 1")

    def scaled(self, max_iters: int, **overrides) -> "TrainSchedule":
        """Same shape of schedule with milestones rescaled to ``max_iters``.

        Milestones that collide or fall outside ``(0, max_iters)`` after
        rounding are dropped.
        """
        ratio = max_iters / self.max_iters
        scaled = (int(round(m * ratio)) for m in self.milestones)
        milestones = tuple(sorted({m for m in scaled if 0 < m < max_iters}))
        kw = asdict(self) | {"milestones": milestones, "max_iters": max_iters} | overrides
        return TrainSchedule(**kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["milestones"] = list(self.milestones)
        return d


# joint network: 1e-3, /10 at 25K, 45K, 60K, stop at 65K, batch 64
REFERENCE_JOINT_SCHEDULE = TrainSchedule(1e-3, (25000, 45000, 60000), 0.1, 65000, 0.9, 64)
# CNN stage: 1e-2, /10 at 20K, 30K, 35K, stop at 40K, batch 128
REFERENCE_CNN_SCHEDULE = TrainSchedule(1e-2, (20000, 30000, 35000), 0.1, 40000, 0.9, 128)
# joint schedule shape at desk scale; training from scratch needs a larger base rate
DESK_SCHEDULE = TrainSchedule(0.05, (2500, 4500, 6000), 0.1, 6500, 0.9, 64)

PRESETS = {
    "reference-joint": REFERENCE_JOINT_SCHEDULE,
    "reference-cnn": REFERENCE_CNN_SCHEDULE,
    "desk": DESK_SCHEDULE,
}


def lr_at(schedule: TrainSchedule, iteration: int) -> float:
    """``base_lr * decay^k`` with k the number of milestones <= ``iteration``.

    Evaluated in decimal so decayed rates are the exact decimal values
    (0.001 -> 0.0001 -> 1e-05 -> 1e-06, not 1.0000000000000002e-05).
    """
    if not 0 <= iteration < schedule.max_iters:
        raise ValueError(f"iteration {iteration} outside [0, {schedule.max_iters})")
    k = sum(1 for m in schedule.milestones if m <= iteration)
    return float(Decimal(repr(schedule.base_lr)) * Decimal(repr(schedule.decay_factor)) ** k)


@dataclass(frozen=True)
class WindowSpec:
    """``window_len`` frames taken every ``stride`` frames.

    ``short_policy`` decides what happens when a sequence is shorter than the
    window span: ``"shrink"`` returns one window from frame 0 with the largest
    stride that fits, ``"error"`` raises.
    """

    window_len: int = 16
    stride: int = 5
    short_policy: str = "shrink"

    def __post_init__(self) -> None:
        if self.window_len < 1 or self.stride < 1:
            raise ConfigError("window_len and stride must be >= 1")
        if self.short_policy not in ("shrink", "error"):
            raise ConfigError(f"unknown short_policy {self.short_policy!r}")

    @property
    def span(self) -> int:
        return 1 + (self.window_len - 1) * self.stride


def window_indices(length: int, spec: WindowSpec) -> list[np.ndarray]:
    if length >= spec.span:
        offs = np.arange(spec.window_len) * spec.stride
        return [start + offs for start in range(length - spec.span + 1)]
    if spec.short_policy == "error" or length < spec.window_len:
        raise ValueError(f"sequence of length {length} is shorter than the window span {spec.span}")
    stride = 1 if spec.window_len == 1 else (length - 1) // (spec.window_len - 1)
    return [np.arange(spec.window_len) * stride]


def extract_windows(seq, spec: WindowSpec) -> list[np.ndarray]:
    seq = np.asarray(seq, dtype=DTYPE)
    return [seq[idx] for idx in window_indices(seq.shape[0], spec)]


def cross_entropy(logits, label: int) -> float:
    """``-log softmax(logits)[label]`` via log-sum-exp."""
    logits = np.asarray(logits, dtype=DTYPE)
    if not 0 <= label < logits.shape[-1]:
        raise ValueError(f"label {label} out of range for {logits.shape[-1]} classes")
    return softmax_cross_entropy(logits[None], np.array([label]))[0]


@dataclass
class TrainingReport:
    seed: int | None
    config: dict
    losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    phase_boundary: int = 0
    dominance: list[dict] = field(default_factory=list)
    final_metrics: dict = field(default_factory=dict)
    final_params: dict | None = None

    def to_dict(self, include_params: bool = False) -> dict:
        d = {
            "seed": self.seed,
            "config": self.config,
            "phase_boundary": self.phase_boundary,
            "losses": self.losses,
            "lrs": self.lrs,
            "dominance": self.dominance,
            "final_metrics": self.final_metrics,
        }
        if include_params and self.final_params is not None:
            d["final_params"] = {k: v.tolist() for k, v in self.final_params.items()}
        return d


def _stack(dataset: Sequence, windows: list[list[np.ndarray]], picks: list[tuple[int, int]]):
    xs = np.stack([np.asarray(dataset[i].seq_s)[windows[i][w]] for i, w in picks])
    xt = np.stack([np.asarray(dataset[i].seq_t)[windows[i][w]] for i, w in picks])
    y = np.array([dataset[i].label for i, _ in picks], dtype=np.int64)
    return xs, xt, y


def _clip(params, max_norm: float) -> None:
    total = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params))
    if total > max_norm:
        for p in params:
            p.grad *= max_norm / total


def train(model: TwoStreamModel, dataset: Sequence, schedule: TrainSchedule, window_spec: WindowSpec,
          rng: np.random.Generator, pretrain: TrainSchedule | None = None, seed: int | None = None,
          dominance_every: int = 0, grad_clip: float | None = None) -> TrainingReport:
    """Per-branch pretraining (optional) followed by joint training.

    ``dataset`` items need ``seq_s``, ``seq_t`` and ``label``. Batches are
    drawn without replacement per epoch, one random window per sequence.
    Momentum buffers are reset at the phase boundary.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    windows = [window_indices(len(item.seq_s), window_spec) for item in dataset]
    params = list(model.params.values())
    report = TrainingReport(seed=seed, config={
        "model": model.spec.to_dict(),
        "schedule": schedule.to_dict(),
        "pretrain": pretrain.to_dict() if pretrain else None,
        "window": asdict(window_spec),
        "grad_clip": grad_clip,
    })
    order: list[int] = []
    phases = [("pretrain", pretrain), ("joint", schedule)] if pretrain else [("joint", schedule)]
    for phase, sched in phases:
        if phase == "joint":
            report.phase_boundary = len(report.losses)
        for p in params:
            p.momentum.fill(0.0)
        for it in range(sched.max_iters):
            lr = lr_at(sched, it)
            picks = []
            while len(picks) < min(sched.batch_size, len(dataset)):
                if not order:
                    order = rng.permutation(len(dataset)).tolist()
                i = order.pop()
                picks.append((i, int(rng.integers(len(windows[i])))))
            xs, xt, y = _stack(dataset, windows, picks)
            zero_grads(params)
            loss, _, _ = model.loss_and_backward(xs, xt, y, mode=phase)
            if not math.isfinite(loss):
                raise TrainingDivergedError(f"non-finite loss {loss} at {phase} iteration {it} (lr={lr})")
            bad = [p.name for p in params if not np.all(np.isfinite(p.grad))]
            if bad:
                raise TrainingDivergedError(f"non-finite gradient in {bad[0]} at {phase} iteration {it}")
            if grad_clip is not None:
                _clip(params, grad_clip)
            sgd_momentum_step(params, lr, sched.momentum)
            report.losses.append(loss)
            report.lrs.append(lr)
            if dominance_every and phase == "joint" and it % dominance_every == 0:
                ns, nt, ratio = dominance_metric(model, xs, xt, y)
                report.dominance.append({"iter": len(report.losses) - 1, "norm_s": ns, "norm_t": nt,
                                         "ratio": ratio})
        log.debug("%s phase done after %d iterations, last loss %.4f", phase, sched.max_iters,
                  report.losses[-1] if report.losses else float("nan"))
    report.final_params = {n: p.value.copy() for n, p in model.params.items()}
    return report


def predict_dataset(model: TwoStreamModel, dataset: Sequence, window_spec: WindowSpec,
                    chunk: int = 256) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Window-averaged fused, spatial and temporal scores, each ``(N, C)``."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    windows = [window_indices(len(item.seq_s), window_spec) for item in dataset]
    picks = [(i, w) for i, ws in enumerate(windows) for w in range(len(ws))]
    c = model.spec.num_classes
    sums = np.zeros((3, len(dataset), c))
    counts = np.array([len(ws) for ws in windows], dtype=DTYPE)
    for k in range(0, len(picks), chunk):
        part = picks[k:k + chunk]
        xs, xt, _ = _stack(dataset, windows, part)
        pred = model.predict(xs, xt)
        owners = np.array([i for i, _ in part])
        for row, scores in enumerate((pred.class_scores, *pred.per_branch_scores)):
            np.add.at(sums[row], owners, scores)
    sums /= counts[None, :, None]
    return sums[0], sums[1], sums[2]


def evaluate_breakdown(model: TwoStreamModel, dataset: Sequence, window_spec: WindowSpec) -> dict:
    """Accuracy of the fused prediction and of each branch's own head."""
    fused, spatial, temporal = predict_dataset(model, dataset, window_spec)
    labels = np.array([item.label for item in dataset])
    return {
        "fused": float(np.mean(fused.argmax(axis=1) == labels)),
        "spatial": float(np.mean(spatial.argmax(axis=1) == labels)),
        "temporal": float(np.mean(temporal.argmax(axis=1) == labels)),
    }


def evaluate(model: TwoStreamModel, dataset: Sequence, window_spec: WindowSpec) -> float:
    """Fraction of sequences whose window-averaged class scores pick the label."""
    return evaluate_breakdown(model, dataset, window_spec)["fused"]

