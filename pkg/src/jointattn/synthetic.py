"""Synthetic two-stream classification task with planted salient frames.

Every frame is Gaussian noise; ``salient_count`` frames per stream also carry
the class prototype of that stream. The salient positions are known, which
makes attention weights checkable against ground truth.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .tensor_core import ConfigError, make_rng

DATASET_FORMAT = "jointattn-dataset"
DATASET_VERSION = 1


@dataclass(frozen=True)
class SyntheticTaskSpec:
    num_classes: int = 5
    dim_s: int = 32
    dim_t: int = 32
    seq_len: int = 16
    salient_count: int = 4
    noise_sigma: float = 1.0
    cross_stream_rho: float = 0.5
    train_size: int = 500
    test_size: int = 200
    seed: int = 0
    # per-entry std of the class prototypes, per stream
    signal_scale: float = 0.6
    signal_scale_t: float | None = None

    def __post_init__(self) -> None:
        if self.num_classes < 2:
            raise ConfigError("num_classes must be at least 2")
        if min(self.dim_s, self.dim_t, self.seq_len) < 1:
            raise ConfigError("dims and seq_len must be positive")
        if not 0 <= self.salient_count <= self.seq_len:
            raise ConfigError(f"salient_count={self.salient_count} must lie in [0, seq_len={self.seq_len}]")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if not 0.0 <= self.cross_stream_rho <= 1.0:
            raise ConfigError("cross_stream_rho must lie in [0, 1]")
        if self.train_size < 1 or self.test_size < 1:
            raise ConfigError("train_size and test_size must be >= 1")

    def with_seed(self, seed: int) -> "SyntheticTaskSpec":
        return replace(self, seed=int(seed))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticTaskSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown task spec keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class LabeledSequencePair:
    seq_s: np.ndarray
    seq_t: np.ndarray
    label: int
    salient_mask: np.ndarray  # spatial stream
    salient_mask_t: np.ndarray

    def to_dict(self) -> dict:
        return {
            "label": int(self.label),
            "salient_mask": self.salient_mask.astype(int).tolist(),
            "salient_mask_t": self.salient_mask_t.astype(int).tolist(),
            "seq_s": self.seq_s.tolist(),
            "seq_t": self.seq_t.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LabeledSequencePair":
        return cls(np.asarray(d["seq_s"], dtype=float), np.asarray(d["seq_t"], dtype=float),
                   int(d["label"]), np.asarray(d["salient_mask"], dtype=bool),
                   np.asarray(d["salient_mask_t"], dtype=bool))


def generate_task(spec: SyntheticTaskSpec) -> tuple[list[LabeledSequencePair], list[LabeledSequencePair]]:
    rng = make_rng(spec.seed)
    scale_t = spec.signal_scale if spec.signal_scale_t is None else spec.signal_scale_t
    proto_s = rng.normal(0.0, spec.signal_scale, size=(spec.num_classes, spec.dim_s))
    proto_t = rng.normal(0.0, scale_t, size=(spec.num_classes, spec.dim_t))
    pairs = []
    for _ in range(spec.train_size + spec.test_size):
        label = int(rng.integers(spec.num_classes))
        pos_s = rng.choice(spec.seq_len, size=spec.salient_count, replace=False)
        shared = rng.random() < spec.cross_stream_rho
        other = rng.choice(spec.seq_len, size=spec.salient_count, replace=False)
        pos_t = pos_s if shared else other
        mask_s = np.zeros(spec.seq_len, dtype=bool)
        mask_t = np.zeros(spec.seq_len, dtype=bool)
        mask_s[pos_s] = True
        mask_t[pos_t] = True
        seq_s = spec.noise_sigma * rng.normal(size=(spec.seq_len, spec.dim_s))
        seq_t = spec.noise_sigma * rng.normal(size=(spec.seq_len, spec.dim_t))
        seq_s[mask_s] += proto_s[label]
        seq_t[mask_t] += proto_t[label]
        pairs.append(LabeledSequencePair(seq_s, seq_t, label, mask_s, mask_t))
    return pairs[:spec.train_size], pairs[spec.train_size:]


def shuffle_labels(pairs: list[LabeledSequencePair], rng: np.random.Generator) -> list[LabeledSequencePair]:
    """Copy of ``pairs`` with labels permuted (a chance-level control)."""
    labels = rng.permutation([p.label for p in pairs])
    return [replace(p, label=int(lab)) for p, lab in zip(pairs, labels)]


def dataset_to_json(spec: SyntheticTaskSpec, train: list, test: list) -> str:
    return json.dumps({
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "spec": spec.to_dict(),
        "train": [p.to_dict() for p in train],
        "test": [p.to_dict() for p in test],
    })


def save_dataset(path: str | Path, spec: SyntheticTaskSpec, train: list, test: list) -> None:
    Path(path).write_text(dataset_to_json(spec, train, test))


def load_dataset(path: str | Path):
    """Returns ``(spec, train, test)``."""
    payload = json.loads(Path(path).read_text())
    if payload.get("format") != DATASET_FORMAT:
        raise ConfigError(f"{path} is not a dataset file")
    if payload.get("version") != DATASET_VERSION:
        raise ConfigError(f"unsupported dataset version {payload.get('version')!r}")
    spec = SyntheticTaskSpec.from_dict(payload["spec"])
    train = [LabeledSequencePair.from_dict(d) for d in payload["train"]]
    test = [LabeledSequencePair.from_dict(d) for d in payload["test"]]
    return spec, train, test
