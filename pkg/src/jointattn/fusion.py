"""Two-branch models: separate streams, FC fusion, branch selection, spatial
attention and joint (cross-stream) attention, plus score fusion helpers.

Every model keeps one GRU encoder and one per-timestep softmax classifier per
branch. Head types differ in what sits between encoders and classifiers and
in which loss drives the joint training phase:

=====================  ==============================================  ==============
head_type              joint-phase prediction                          joint loss
=====================  ==============================================  ==============
separate_streams       mean of the two branch scores                   L_s + L_t
fc_fusion              softmax(W [h_T ; g_T] + b)                      L_fused
branch_selection       classifier(alpha_1 h_T + alpha_2 g_T)           L_fused
branch_selection_l2    same on L2-normalized h_T, g_T                  L_fused
spatial_attention      spatial attention replaces average pooling      L_s + L_t
jna                    branch classifiers read joint-attention output  L_s + L_t
=====================  ==============================================  ==============

Branch losses are timestep-averaged cross-entropies of the per-timestep
classifiers; branch scores are timestep-averaged softmax outputs.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .attention import AttentionTrace, BranchSelection, JointAttention, RecurrentSpatialPooling
from .recurrent import GruEncoder
from .tensor_core import (
    DTYPE,
    ConfigError,
    DimensionError,
    Param,
    StateError,
    glorot_uniform,
    load_params_dict,
    make_rng,
    params_to_dict,
    softmax,
    softmax_cross_entropy,
)

HEAD_TYPES = (
    "separate_streams",
    "fc_fusion",
    "branch_selection",
    "branch_selection_l2",
    "spatial_attention",
    "jna",
)
FUSED_HEADS = ("fc_fusion", "branch_selection", "branch_selection_l2")
SPEC_VERSION = 1
MODEL_FORMAT = "jointattn-model"
DOMINANCE_CAP = 1e6


@dataclass
class ModelSpec:
    head_type: str = "jna"
    stream_dims: tuple[int, int] = (32, 32)
    gru_layers: list[int] = field(default_factory=lambda: [32, 32])
    attn_dim: int = 16
    num_classes: int = 5
    spatial_grid: int = 2

    def __post_init__(self) -> None:
        self.stream_dims = tuple(int(d) for d in self.stream_dims)
        self.gru_layers = [int(d) for d in self.gru_layers]
        self.validate()

    def validate(self) -> None:
        if self.head_type not in HEAD_TYPES:
            raise ConfigError(f"unknown head_type {self.head_type!r}; expected one of {HEAD_TYPES}")
        if len(self.stream_dims) != 2 or min(self.stream_dims) < 1:
            raise ConfigError(f"stream_dims must be two positive ints, got {self.stream_dims}")
        if not self.gru_layers or min(self.gru_layers) < 1:
            raise ConfigError("gru_layers must be a nonempty list of positive sizes")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be at least 2")
        if self.attn_dim < 1:
            raise ConfigError("attn_dim must be positive")
        if self.head_type == "spatial_attention":
            cells = self.spatial_grid ** 2
            if self.spatial_grid < 1 or any(d % cells for d in self.stream_dims):
                raise ConfigError(f"stream dims {self.stream_dims} must be divisible by K*K={cells}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stream_dims"] = list(self.stream_dims)
        d["version"] = SPEC_VERSION
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        version = d.pop("version", SPEC_VERSION)
        if version != SPEC_VERSION:
            raise ConfigError(f"unsupported model spec version {version}")
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ConfigError(f"unknown model spec keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Prediction:
    class_scores: np.ndarray
    per_branch_scores: tuple[np.ndarray, np.ndarray] | None = None


class Linear:
    """Affine map applied to the last axis: ``y = x W^T + b``."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator | None, name: str):
        w = glorot_uniform(rng, out_dim, in_dim) if rng is not None else np.zeros((out_dim, in_dim))
        self.W = Param(f"{name}.W", w)
        self.b = Param(f"{name}.b", np.zeros(out_dim))
        self._x = None

    @property
    def params(self) -> list[Param]:
        return [self.W, self.b]

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.shape[-1] != self.W.shape[1]:
            raise DimensionError(f"linear layer expects input dim {self.W.shape[1]}, got {x.shape[-1]}")
        self._x = x
        return x @ self.W.value.T + self.b.value

    def backward(self, dy: np.ndarray) -> np.ndarray:
        if self._x is None:
            raise StateError("linear backward called before forward")
        x, self._x = self._x, None
        x2 = x.reshape(-1, x.shape[-1])
        dy2 = dy.reshape(-1, dy.shape[-1])
        self.W.grad += dy2.T @ x2
        self.b.grad += dy2.sum(axis=0)
        return dy @ self.W.value


def fc_fusion_forward(features_s, features_t, fc: Linear) -> np.ndarray:
    """``softmax(W [features_s ; features_t] + b)`` over classes."""
    features_s = np.asarray(features_s, dtype=DTYPE)
    features_t = np.asarray(features_t, dtype=DTYPE)
    x = np.concatenate([features_s, features_t], axis=-1)
    return softmax(fc.forward(x), axis=-1)


def average_fusion(scores_s, scores_t) -> np.ndarray:
    scores_s = np.asarray(scores_s, dtype=DTYPE)
    scores_t = np.asarray(scores_t, dtype=DTYPE)
    if scores_s.shape != scores_t.shape:
        raise DimensionError(f"score vectors differ in shape: {scores_s.shape} vs {scores_t.shape}")
    return 0.5 * (scores_s + scores_t)


@dataclass
class ForwardOutput:
    logits_s: np.ndarray  # (B, T', C)
    logits_t: np.ndarray
    logits_fused: np.ndarray | None  # (B, C)
    trace: tuple | None = None  # batched (e, f, alpha, beta)
    spatial_weights: tuple | None = None

    def branch_scores(self) -> tuple[np.ndarray, np.ndarray]:
        return (softmax(self.logits_s, axis=-1).mean(axis=1),
                softmax(self.logits_t, axis=-1).mean(axis=1))

    def class_scores(self) -> np.ndarray:
        if self.logits_fused is not None:
            return softmax(self.logits_fused, axis=-1)
        return average_fusion(*self.branch_scores())


class TwoStreamModel:
    """A spatial and a temporal branch joined by the head named in ``spec``."""

    def __init__(self, spec: ModelSpec, rng: np.random.Generator | None):
        spec.validate()
        self.spec = spec
        ds, dt = spec.stream_dims
        top = spec.gru_layers[-1]
        c = spec.num_classes
        self.sa_s = self.sa_t = None
        in_s, in_t = ds, dt
        if spec.head_type == "spatial_attention":
            self.sa_s = RecurrentSpatialPooling(ds, spec.spatial_grid, spec.gru_layers[0], spec.attn_dim, rng, "sa_s")
            self.sa_t = RecurrentSpatialPooling(dt, spec.spatial_grid, spec.gru_layers[0], spec.attn_dim, rng, "sa_t")
            in_s, in_t = self.sa_s.channels, self.sa_t.channels
        self.enc_s = GruEncoder(in_s, spec.gru_layers, rng, name="enc_s")
        self.enc_t = GruEncoder(in_t, spec.gru_layers, rng, name="enc_t")
        self.cls_s = Linear(top, c, rng, "cls_s")
        self.cls_t = Linear(top, c, rng, "cls_t")
        self.fc = self.bs = self.fused_cls = self.jna = None
        if spec.head_type == "fc_fusion":
            self.fc = Linear(2 * top, c, rng, "fc")
        elif spec.head_type in ("branch_selection", "branch_selection_l2"):
            self.bs = BranchSelection(top, spec.attn_dim, spec.head_type == "branch_selection_l2", rng, "bs")
            self.fused_cls = Linear(top, c, rng, "fused_cls")
        elif spec.head_type == "jna":
            self.jna = JointAttention(top, top, spec.attn_dim, rng, "jna")
        self._state = None

    @property
    def head_type(self) -> str:
        return self.spec.head_type

    def components(self) -> list:
        parts = [self.sa_s, self.sa_t, self.enc_s, self.enc_t, self.cls_s, self.cls_t,
                 self.fc, self.bs, self.fused_cls, self.jna]
        return [p for p in parts if p is not None]

    @property
    def params(self) -> dict[str, Param]:
        return {p.name: p for comp in self.components() for p in comp.params}

    def branch_params(self, branch: str) -> list[Param]:
        """Parameters that belong exclusively to one branch (``"s"`` or ``"t"``)."""
        comps = [getattr(self, f"{kind}_{branch}") for kind in ("sa", "enc", "cls")]
        return [p for comp in comps if comp is not None for p in comp.params]

    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def loss_weights(self, mode: str = "joint") -> tuple[float, float, float]:
        """(spatial-branch, temporal-branch, fused) weights of the training loss."""
        if mode == "pretrain" or self.head_type not in FUSED_HEADS:
            return 1.0, 1.0, 0.0
        return 0.0, 0.0, 1.0

    def forward(self, xs: np.ndarray, xt: np.ndarray, mode: str = "joint") -> ForwardOutput:
        xs = np.asarray(xs, dtype=DTYPE)
        xt = np.asarray(xt, dtype=DTYPE)
        ds, dt = self.spec.stream_dims
        if xs.ndim != 3 or xt.ndim != 3:
            raise DimensionError("model inputs must be batched (B, T, dim) arrays")
        if xs.shape[:2] != xt.shape[:2]:
            raise ValueError(f"stream batches differ in shape: {xs.shape[:2]} vs {xt.shape[:2]}")
        if xs.shape[2] != ds or xt.shape[2] != dt:
            raise DimensionError(f"model expects stream dims ({ds}, {dt}), got ({xs.shape[2]}, {xt.shape[2]})")
        if mode not in ("joint", "pretrain"):
            raise ValueError(f"unknown forward mode {mode!r}")
        head = self.head_type
        spatial_w = None
        if self.sa_s is not None:
            self.sa_s.uniform = self.sa_t.uniform = mode == "pretrain"
            xs, ws = self.sa_s.forward(xs)
            xt, wt = self.sa_t.forward(xt)
            spatial_w = None if ws is None else (ws, wt)
        h = self.enc_s.forward(xs)
        g = self.enc_t.forward(xt)
        trace = fused = bs_cache = None
        if head == "jna" and mode == "joint":
            o_h, o_g, trace = self.jna.forward(h, g)
            ls, lt = self.cls_s.forward(o_h), self.cls_t.forward(o_g)
        else:
            ls, lt = self.cls_s.forward(h), self.cls_t.forward(g)
            if mode == "joint" and head == "fc_fusion":
                fused = self.fc.forward(np.concatenate([h[:, -1], g[:, -1]], axis=-1))
            elif mode == "joint" and self.bs is not None:
                mixed, _, bs_cache = self.bs.forward(h[:, -1], g[:, -1])
                fused = self.fused_cls.forward(mixed)
        self._state = (mode, h.shape, bs_cache)
        return ForwardOutput(ls, lt, fused, trace, spatial_w)

    def backward(self, d_ls: np.ndarray | None, d_lt: np.ndarray | None, d_lf: np.ndarray | None):
        """Backpropagate logit gradients; returns gradients w.r.t. both input sequences."""
        if self._state is None:
            raise StateError("model backward called before forward")
        mode, hshape, bs_cache = self._state
        self._state = None
        dh, dg = self._branch_cls_backward(d_ls, d_lt, hshape)
        if self.head_type == "jna" and mode == "joint":
            dh, dg = self.jna.backward(dh, dg)
        elif d_lf is not None and mode == "joint" and self.head_type in FUSED_HEADS:
            top = hshape[2]
            if self.fc is not None:
                dcat = self.fc.backward(d_lf)
                dlast_h, dlast_g = dcat[:, :top], dcat[:, top:]
            else:
                dlast_h, dlast_g = self.bs.backward(bs_cache, self.fused_cls.backward(d_lf))
            dh[:, -1] += dlast_h
            dg[:, -1] += dlast_g
        dxs = self.enc_s.backward(dh)
        dxt = self.enc_t.backward(dg)
        if self.sa_s is not None:
            dxs = self.sa_s.backward(dxs)
            dxt = self.sa_t.backward(dxt)
        return dxs, dxt

    def _branch_cls_backward(self, d_ls, d_lt, hshape):
        out = []
        for cls, d in ((self.cls_s, d_ls), (self.cls_t, d_lt)):
            if d is None:
                cls._x = None
                out.append(np.zeros(hshape))
            else:
                out.append(cls.backward(d))
        return out

    def loss(self, xs, xt, labels, mode: str = "joint",
             weights: tuple[float, float, float] | None = None) -> float:
        """Training loss without a backward pass."""
        out = self.forward(xs, xt, mode)
        self._state = None
        ws, wt, wf = self.loss_weights(mode) if weights is None else weights
        total = 0.0
        for w, logits in ((ws, out.logits_s), (wt, out.logits_t), (wf, out.logits_fused)):
            if w != 0.0 and logits is not None:
                total += w * softmax_cross_entropy(logits, labels)[0]
        return total

    def loss_and_backward(self, xs, xt, labels, mode: str = "joint",
                          weights: tuple[float, float, float] | None = None):
        """Forward, loss and backward in one call.

        Returns ``(loss, output, (dxs, dxt))``; parameter grads are accumulated.
        """
        out = self.forward(xs, xt, mode)
        labels = np.asarray(labels, dtype=np.int64)
        ws, wt, wf = self.loss_weights(mode) if weights is None else weights
        loss = 0.0
        grads = []
        for w, logits in ((ws, out.logits_s), (wt, out.logits_t), (wf, out.logits_fused)):
            if w == 0.0 or logits is None:
                grads.append(None)
                continue
            l, d = softmax_cross_entropy(logits, labels)
            loss += w * l
            grads.append(w * d)
        dxs, dxt = self.backward(*grads)
        return loss, out, (dxs, dxt)

    def predict(self, xs, xt) -> Prediction:
        out = self.forward(xs, xt, "joint")
        self._state = None
        return Prediction(out.class_scores(), out.branch_scores())

    def to_dict(self) -> dict:
        return {"format": MODEL_FORMAT, "version": SPEC_VERSION, "spec": self.spec.to_dict(),
                "params": params_to_dict(self.params.values())}

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def from_dict(cls, payload: dict) -> "TwoStreamModel":
        if payload.get("format") != MODEL_FORMAT:
            raise ConfigError(f"not a model checkpoint: format={payload.get('format')!r}")
        model = cls(ModelSpec.from_dict(payload["spec"]), rng=None)
        load_params_dict(model.params, payload["params"])
        return model

    @classmethod
    def load(cls, path: str | Path) -> "TwoStreamModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def build_model(spec: ModelSpec, rng: np.random.Generator | int) -> TwoStreamModel:
    if not isinstance(rng, np.random.Generator):
        rng = make_rng(rng)
    return TwoStreamModel(spec, rng)


def model_forward(model: TwoStreamModel, seq_s, seq_t) -> tuple[Prediction, AttentionTrace | None]:
    """Predict one sequence pair of shape ``(T, dim)`` each."""
    seq_s = np.asarray(seq_s, dtype=DTYPE)
    seq_t = np.asarray(seq_t, dtype=DTYPE)
    if seq_s.ndim != 2 or seq_t.ndim != 2:
        raise DimensionError("model_forward expects unbatched (T, dim) sequences")
    if seq_s.shape[0] != seq_t.shape[0]:
        raise ValueError(f"sequence lengths differ: {seq_s.shape[0]} vs {seq_t.shape[0]}")
    out = model.forward(seq_s[None], seq_t[None], "joint")
    model._state = None
    ps, pt = out.branch_scores()
    pred = Prediction(out.class_scores()[0], (ps[0], pt[0]))
    trace = None
    if out.trace is not None:
        e, f, a, b = out.trace
        trace = AttentionTrace(e[0], f[0], a[0], b[0])
    return pred, trace


def dominance_metric(model: TwoStreamModel, xs, xt, labels, mode: str = "joint"):
    """L2 norms of the training-loss gradient w.r.t. each branch's input features.

    Returns ``(norm_s, norm_t, ratio)`` with ``ratio = max / min >= 1``, capped
    at ``DOMINANCE_CAP`` when one norm vanishes. Parameter grads are restored.
    """
    saved = {n: p.grad.copy() for n, p in model.params.items()}
    _, _, (dxs, dxt) = model.loss_and_backward(xs, xt, labels, mode)
    for n, p in model.params.items():
        p.grad[...] = saved[n]
    ns, nt = float(np.linalg.norm(dxs)), float(np.linalg.norm(dxt))
    hi, lo = max(ns, nt), min(ns, nt)
    if hi == 0.0:
        ratio = 1.0
    elif lo == 0.0 or hi / lo > DOMINANCE_CAP:
        ratio = DOMINANCE_CAP
    else:
        ratio = hi / lo
    return ns, nt, ratio
