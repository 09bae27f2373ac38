"""Central finite-difference checks for every hand-written backward pass.

Each suite builds a small random instance from a seed, defines a scalar
objective (a fixed random projection of the layer output, or the real loss
for the end-to-end model), and compares analytic gradients of every
parameter and every input against central differences.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .attention import (
    AdditiveAttention,
    BranchSelection,
    JointAttention,
    RecurrentSpatialPooling,
    SpatialAttention,
)
from .fusion import Linear, ModelSpec, build_model
from .recurrent import GruCell, GruEncoder
from .tensor_core import make_rng, softmax, softmax_cross_entropy, zero_grads

STEP = 1e-5
# entries with both magnitudes below DENOM_FLOOR are compared on an absolute scale
DENOM_FLOOR = 1e-6


def numeric_gradient(f: Callable[[], float], x: np.ndarray, step: float = STEP) -> np.ndarray:
    """Central differences of ``f`` w.r.t. ``x``, perturbing ``x`` in place."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + step
        fp = f()
        flat[k] = orig - step
        fm = f()
        flat[k] = orig
        gflat[k] = (fp - fm) / (2.0 * step)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a = np.asarray(analytic, dtype=float)
    n = np.asarray(numeric, dtype=float)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), DENOM_FLOOR)
    return float(np.max(np.abs(a - n) / denom))


def compare(objective: Callable[[], float], targets: list[tuple[np.ndarray, np.ndarray]]) -> float:
    """Max relative error over ``(array, analytic_grad)`` pairs."""
    worst = 0.0
    for arr, ana in targets:
        worst = max(worst, max_relative_error(ana, numeric_gradient(objective, arr)))
    return worst


def _params_targets(params):
    return [(p.value, p.grad.copy()) for p in params]


def check_gru_step(seed: int) -> float:
    rng = make_rng(seed)
    d_in, d_h, b = int(rng.integers(1, 5)), int(rng.integers(1, 5)), 2
    cell = GruCell(d_in, d_h, rng)
    for p in cell.params.values():
        p.value[...] = rng.normal(0, 0.7, p.shape)
    x = rng.normal(size=(b, d_in))
    h = rng.uniform(-0.9, 0.9, size=(b, d_h))
    r = rng.normal(size=(b, d_h))

    def obj():
        return float(np.sum(r * cell.step(x, h)[0]))

    out, cache = cell.step(x, h)
    zero_grads(cell.params.values())
    dx, dh = cell.step_backward(cache, r)
    return compare(obj, _params_targets(cell.params.values()) + [(x, dx), (h, dh)])


def check_bptt(seed: int) -> float:
    rng = make_rng(seed)
    t_len, d_in = int(rng.integers(1, 6)), int(rng.integers(1, 5))
    hidden = [int(rng.integers(1, 5)), int(rng.integers(1, 5))]
    enc = GruEncoder(d_in, hidden, rng)
    for p in enc.params:
        p.value[...] = rng.normal(0, 0.7, p.shape)
    x = rng.normal(size=(2, t_len, d_in))
    r = rng.normal(size=(2, t_len, hidden[-1]))

    def obj():
        return float(np.sum(r * enc.forward(x)))

    enc.forward(x)
    zero_grads(enc.params)
    dx = enc.backward(r)
    return compare(obj, _params_targets(enc.params) + [(x, dx)])


def _randomize(params, rng, scale=0.8):
    for p in params:
        p.value[...] = rng.normal(0, scale, p.shape)


def check_additive_attention(seed: int) -> float:
    rng = make_rng(seed)
    n, dk, dq, da = (int(v) for v in rng.integers(1, 5, size=4))
    attn = AdditiveAttention(dk, dq, da, rng)
    _randomize(attn.params, rng)
    keys = rng.normal(size=(2, n, dk))
    query = rng.normal(size=(2, dq))
    r = rng.normal(size=(2, dk))

    def obj():
        return float(np.sum(r * attn.forward(keys, query)[0]))

    cache = attn.forward(keys, query)[3]
    zero_grads(attn.params)
    dk_, dq_ = attn.backward(cache, r)
    return compare(obj, _params_targets(attn.params) + [(keys, dk_), (query, dq_)])


def _check_branch_selection(seed: int, l2: bool) -> float:
    rng = make_rng(seed)
    d, da = int(rng.integers(1, 5)), int(rng.integers(1, 5))
    bs = BranchSelection(d, da, l2, rng)
    _randomize(bs.params, rng)
    x1 = rng.normal(size=(2, d))
    x2 = rng.normal(size=(2, d))
    r = rng.normal(size=(2, d))

    def obj():
        return float(np.sum(r * bs.forward(x1, x2)[0]))

    cache = bs.forward(x1, x2)[2]
    zero_grads(bs.params)
    dx1, dx2 = bs.backward(cache, r)
    return compare(obj, _params_targets(bs.params) + [(x1, dx1), (x2, dx2)])


def check_branch_selection(seed: int) -> float:
    return _check_branch_selection(seed, False)


def check_branch_selection_l2(seed: int) -> float:
    return _check_branch_selection(seed, True)


def check_spatial_attention(seed: int) -> float:
    rng = make_rng(seed)
    k, ch, hl, da = int(rng.integers(1, 4)), int(rng.integers(1, 5)), int(rng.integers(1, 5)), int(rng.integers(1, 5))
    sa = SpatialAttention(ch, hl, da, k, rng)
    _randomize(sa.params, rng)
    fmap = rng.normal(size=(2, k * k, ch))
    lh = rng.uniform(-0.9, 0.9, size=(2, hl))
    r = rng.normal(size=(2, ch))

    def obj():
        return float(np.sum(r * sa.forward(fmap, lh)[0]))

    cache = sa.forward(fmap, lh)[3]
    zero_grads(sa.params)
    dmap, dlh = sa.backward(cache, r)
    return compare(obj, _params_targets(sa.params) + [(fmap, dmap), (lh, dlh)])


def check_spatial_pooling(seed: int) -> float:
    """Spatial attention driven by its GRU across a short sequence."""
    rng = make_rng(seed)
    k, ch, hl, da = 2, int(rng.integers(1, 4)), int(rng.integers(1, 5)), int(rng.integers(1, 5))
    t_len = int(rng.integers(1, 5))
    pool = RecurrentSpatialPooling(k * k * ch, k, hl, da, rng)
    _randomize(pool.params, rng)
    x = rng.normal(size=(2, t_len, k * k * ch))
    r = rng.normal(size=(2, t_len, ch))

    def obj():
        return float(np.sum(r * pool.forward(x)[0]))

    pool.forward(x)
    zero_grads(pool.params)
    dx = pool.backward(r)
    return compare(obj, _params_targets(pool.params) + [(x, dx)])


def check_jna(seed: int) -> float:
    rng = make_rng(seed)
    t_len, dh, dg, da = (int(v) for v in rng.integers(1, 5, size=4))
    jna = JointAttention(dh, dg, da, rng)
    _randomize(jna.params, rng)
    h = rng.uniform(-0.9, 0.9, size=(2, t_len, dh))
    g = rng.uniform(-0.9, 0.9, size=(2, t_len, dg))
    rh = rng.normal(size=(2, t_len, dh))
    rg = rng.normal(size=(2, t_len, dg))

    def obj():
        o_h, o_g, _ = jna.forward(h, g)
        jna._cache = None
        return float(np.sum(rh * o_h) + np.sum(rg * o_g))

    jna.forward(h, g)
    zero_grads(jna.params)
    d_h, d_g = jna.backward(rh, rg)
    return compare(obj, _params_targets(jna.params) + [(h, d_h), (g, d_g)])


def check_fc_fusion(seed: int) -> float:
    rng = make_rng(seed)
    ds, dt, c = int(rng.integers(1, 5)), int(rng.integers(1, 5)), int(rng.integers(2, 5))
    fc = Linear(ds + dt, c, rng, "fc")
    _randomize(fc.params, rng)
    xs = rng.normal(size=(2, ds))
    xt = rng.normal(size=(2, dt))
    labels = rng.integers(0, c, size=2)

    def obj():
        logits = fc.forward(np.concatenate([xs, xt], axis=-1))
        return softmax_cross_entropy(logits, labels)[0]

    logits = fc.forward(np.concatenate([xs, xt], axis=-1))
    _, dlogits = softmax_cross_entropy(logits, labels)
    zero_grads(fc.params)
    dcat = fc.backward(dlogits)
    return compare(obj, _params_targets(fc.params) + [(xs, dcat[:, :ds]), (xt, dcat[:, ds:])])


def check_cross_entropy(seed: int) -> float:
    rng = make_rng(seed)
    c = int(rng.integers(2, 6))
    logits = rng.normal(0, 2, size=(3, c))
    labels = rng.integers(0, c, size=3)

    def obj():
        # naive form, independent of the log-sum-exp route under test
        p = softmax(logits, axis=-1)
        return float(-np.mean(np.log(p[np.arange(3), labels])))

    _, d = softmax_cross_entropy(logits, labels)
    return compare(obj, [(logits, d)])


def check_end_to_end(seed: int, head_type: str = "jna") -> float:
    """Total training loss of a tiny two-branch model (T=3, dims 2, 2 classes)."""
    rng = make_rng(seed)
    dim = 4 if head_type == "spatial_attention" else 2  # 2x2 grid of 1 channel
    spec = ModelSpec(head_type=head_type, stream_dims=(dim, dim), gru_layers=[2, 2], attn_dim=2,
                     num_classes=2, spatial_grid=2)
    model = build_model(spec, rng)
    params = list(model.params.values())
    _randomize(params, rng, 0.6)
    xs = rng.normal(size=(2, 3, dim))
    xt = rng.normal(size=(2, 3, dim))
    labels = rng.integers(0, 2, size=2)

    def obj():
        return model.loss(xs, xt, labels)

    zero_grads(params)
    _, _, (dxs, dxt) = model.loss_and_backward(xs, xt, labels)
    targets = _params_targets(params) + [(xs, dxs.copy()), (xt, dxt.copy())]
    return compare(obj, targets)


def check_end_to_end_fc(seed: int) -> float:
    return check_end_to_end(seed, "fc_fusion")


def check_end_to_end_bs(seed: int) -> float:
    return check_end_to_end(seed, "branch_selection_l2")


def check_end_to_end_spatial(seed: int) -> float:
    return check_end_to_end(seed, "spatial_attention")


@dataclass(frozen=True)
class Suite:
    name: str
    check: Callable[[int], float]
    tolerance: float


SUITES = (
    Suite("gru_step", check_gru_step, 1e-4),
    Suite("bptt", check_bptt, 1e-4),
    Suite("additive_attention", check_additive_attention, 1e-4),
    Suite("branch_selection", check_branch_selection, 1e-4),
    Suite("branch_selection_l2", check_branch_selection_l2, 1e-4),
    Suite("spatial_attention", check_spatial_attention, 1e-4),
    Suite("spatial_attention_recurrent", check_spatial_pooling, 1e-4),
    Suite("jna", check_jna, 1e-4),
    Suite("fc_fusion", check_fc_fusion, 1e-4),
    Suite("cross_entropy", check_cross_entropy, 1e-4),
    Suite("end_to_end_jna", check_end_to_end, 1e-3),
    Suite("end_to_end_fc_fusion", check_end_to_end_fc, 1e-3),
    Suite("end_to_end_branch_selection_l2", check_end_to_end_bs, 1e-3),
    Suite("end_to_end_spatial_attention", check_end_to_end_spatial, 1e-3),
)


@dataclass
class SuiteResult:
    name: str
    max_rel_error: float
    tolerance: float
    seeds: int
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def run_suites(seeds: int = 20, names: list[str] | None = None) -> list[SuiteResult]:
    results = []
    for suite in SUITES:
        if names and suite.name not in names:
            continue
        t0 = time.perf_counter()
        worst = max(suite.check(s) for s in range(seeds))
        results.append(SuiteResult(suite.name, worst, suite.tolerance, seeds, time.perf_counter() - t0))
    return results
