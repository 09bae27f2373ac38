"""Acceptance gate: one test per criterion, each recorded as a PASS/FAIL line
in the terminal summary (and printed, visible with ``-s``)."""

import time

import numpy as np
import pytest

from conftest import ACCEPTANCE
from oracles import jna_double_loop

from jointattn.attention import (
    AdditiveAttention,
    BranchSelection,
    JointAttention,
    SpatialAttention,
    additive_attention,
    branch_selection,
    jna_forward,
    spatial_attention,
)
from jointattn.cli import main as cli_main
from jointattn.experiments import ExperimentConfig, ordering_checks, results_table, run_experiment_matrix, summarize
from jointattn.fusion import ModelSpec, build_model
from jointattn.gradcheck import run_suites
from jointattn.tensor_core import make_rng, zero_grads
from jointattn.training import REFERENCE_JOINT_SCHEDULE, WindowSpec, lr_at, window_indices


def record(n, ok, detail):
    ACCEPTANCE[n] = (bool(ok), detail)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


def in_hull(out, points, tol=1e-12):
    lo, hi = points.min(axis=0), points.max(axis=0)
    return bool(np.all(out >= lo - tol) and np.all(out <= hi + tol))


def randomize(params, rng, scale):
    for p in params:
        p.value[...] = rng.normal(scale=scale, size=p.shape)


def test_1_gradient_oracle_suite():
    t0 = time.perf_counter()
    results = run_suites(seeds=20)
    elapsed = time.perf_counter() - t0
    for r in results:
        print(f"  {r.name:34s} max_rel_err={r.max_rel_error:.2e} tol={r.tolerance:.0e}")
    failing = [r.name for r in results if not r.passed]
    worst = max(results, key=lambda r: r.max_rel_error / r.tolerance)
    record(1, not failing and elapsed < 60.0,
           f"{len(results)} suites x 20 seeds in {elapsed:.1f}s; worst {worst.name} "
           f"{worst.max_rel_error:.2e} (tol {worst.tolerance:.0e}); failing={failing}")


def test_2_stochasticity_and_convexity():
    rng = make_rng(2024)
    violations = 0
    worst_sum = 0.0
    for _ in range(1000):
        t_len, dh, dg, da = (int(x) for x in rng.integers(1, 7, size=4))
        scale = float(rng.choice([0.1, 1.0, 5.0, 25.0]))
        jna = JointAttention(dh, dg, da, rng)
        randomize(jna.params, rng, scale)
        h, g = rng.normal(scale=3.0, size=(t_len, dh)), rng.normal(scale=3.0, size=(t_len, dg))
        o_h, o_g, tr = jna_forward(jna, h, g)
        col = np.abs(tr.alpha.sum(axis=0) - 1.0).max()
        row = np.abs(tr.beta.sum(axis=1) - 1.0).max()
        worst_sum = max(worst_sum, col, row)
        ok = col <= 1e-9 and row <= 1e-9 and np.all(tr.alpha > 0) and np.all(tr.beta > 0)
        ok &= in_hull(o_h, h) and in_hull(o_g, g)

        add = AdditiveAttention(dh, dg, da, rng)
        randomize(add.params, rng, scale)
        ctx, w = additive_attention(add, h, g[0])
        ok &= abs(w.sum() - 1.0) <= 1e-9 and np.all(w > 0) and in_hull(ctx, h)

        bs = BranchSelection(dh, da, bool(rng.integers(2)), rng)
        randomize(bs.params, rng, scale)
        x1, x2 = rng.normal(size=dh), rng.normal(size=dh)
        fused, a = branch_selection(bs, x1, x2)
        pts = np.stack([x1, x2])
        if bs.l2:
            pts = pts / np.linalg.norm(pts, axis=1, keepdims=True)
        ok &= abs(a.sum() - 1.0) <= 1e-9 and np.all(a > 0) and in_hull(fused, pts)

        k = int(rng.integers(1, 4))
        sa = SpatialAttention(dh, dg, da, k, rng)
        randomize(sa.params, rng, scale)
        fmap = rng.normal(size=(k, k, dh))
        pooled, sw = spatial_attention(sa, fmap, g[0])
        ok &= abs(sw.sum() - 1.0) <= 1e-9 and np.all(sw > 0) and in_hull(pooled, fmap.reshape(-1, dh))
        violations += not ok
    record(2, violations == 0, f"1000 random inputs x 4 mechanisms; violations={violations}; "
                               f"max |sum-1|={worst_sum:.1e}")


def test_3_brute_force_equivalence():
    worst = 0.0
    for seed in range(50):
        rng = make_rng(10_000 + seed)
        t_len, dh, dg, da = int(rng.integers(1, 5)), *(int(x) for x in rng.integers(1, 4, size=3))
        p = JointAttention(dh, dg, da, rng)
        randomize(p.params, rng, 0.8)
        h, g = rng.normal(size=(t_len, dh)), rng.normal(size=(t_len, dg))
        o_h, o_g, tr = jna_forward(p, h, g)
        for got, want in zip((o_h, o_g, tr.e, tr.f, tr.alpha, tr.beta), jna_double_loop(p, h, g)):
            denom = np.maximum(np.maximum(np.abs(got), np.abs(want)), np.finfo(float).tiny)
            worst = max(worst, float(np.max(np.abs(got - want) / denom)))
    record(3, worst <= 1e-12, f"50 seeds, T<=4, dims<=3; max elementwise rel err {worst:.2e}")


def temporal_grad_from_spatial_loss(head, seed):
    rng = make_rng(seed)
    spec = ModelSpec(head, (3, 3), [4], 4, 3)
    model = build_model(spec, seed)
    randomize(model.params.values(), rng, 0.5)
    xs, xt = rng.normal(size=(4, 5, 3)), rng.normal(size=(4, 5, 3))
    zero_grads(model.params.values())
    model.loss_and_backward(xs, xt, rng.integers(3, size=4), weights=(1.0, 0.0, 0.0))
    return sum(float(np.sum(p.grad ** 2)) for p in model.branch_params("t"))


def test_4_cross_flow():
    jna = [temporal_grad_from_spatial_loss("jna", s) for s in range(10)]
    sep = [temporal_grad_from_spatial_loss("separate_streams", s) for s in range(10)]
    record(4, min(jna) > 0.0 and max(sep) == 0.0,
           f"min |grad_B(loss_A)|^2 jna={min(jna):.2e} (10 seeds); separate_streams max={max(sep)}")


@pytest.fixture(scope="module")
def matrix():
    config = ExperimentConfig()
    t0 = time.perf_counter()
    results = run_experiment_matrix(["jna", "separate_streams", "fc_fusion"], config, range(5))
    elapsed = time.perf_counter() - t0
    print()
    print(results_table(results))
    return config, results, elapsed


def test_5_salient_frame_recovery(matrix):
    config, results, elapsed = matrix
    task = config.task
    assert (task.num_classes, task.seq_len, task.salient_count, task.noise_sigma) == (5, 16, 4, 1.0)
    recs = [r.salient_recovery for r in results if r.head_type == "jna"]
    jna_time = sum(r.wall_time for r in results if r.head_type == "jna")
    mean = float(np.mean(recs))
    baseline = task.salient_count / task.seq_len
    record(5, mean >= baseline + 0.10 and elapsed < 600,
           f"mean JNA recovery {mean:.3f} vs uniform {baseline:.3f} over 5 seeds "
           f"(per seed {', '.join(f'{r:.3f}' for r in recs)}); JNA {jna_time:.0f}s, matrix {elapsed:.0f}s")


def test_6_relative_ordering(matrix):
    _, results, _ = matrix
    table = results_table(results)
    checks = ordering_checks(results)
    s = summarize(results)
    assert "[PASS]" in table or "[FAIL]" in table
    ok = checks["jna_accuracy_ge_average_fusion"] and checks["fc_dominance_gt_jna"]
    record(6, ok, f"accuracy JNA {s['jna']['accuracy']:.3f} vs average {s['separate_streams']['accuracy']:.3f}; "
                  f"dominance FC {s['fc_fusion']['dominance_ratio']:.3f} vs JNA {s['jna']['dominance_ratio']:.3f}")


def test_7_schedule_and_windows():
    stages = [lr_at(REFERENCE_JOINT_SCHEDULE, i) for i in (0, 25000, 45000, 60000)]
    ends = [lr_at(REFERENCE_JOINT_SCHEDULE, i) for i in (24999, 44999, 59999, 64999)]
    idx = window_indices(76, WindowSpec(16, 5))
    ok = stages == ends == [1e-3, 1e-4, 1e-5, 1e-6] and idx[0].tolist() == list(range(0, 76, 5))
    record(7, ok, f"lr stages {stages}; window {idx[0].tolist()[:3]}...{idx[0].tolist()[-1]}")


def test_8_matrix_determinism(tmp_path, capsys):
    args = ["matrix", "--heads", "jna,separate_streams,fc_fusion", "--seeds", "0,1", "--iters", "40",
            "--pretrain-iters", "10", "--train-size", "60", "--test-size", "30", "--dim-s", "8", "--dim-t", "8",
            "--seq-len", "8", "--salient-count", "2"]
    codes = [cli_main([*args, "--out-table", str(tmp_path / f"{k}.txt"), "--out-csv", str(tmp_path / f"{k}.csv")])
             for k in ("a", "b")]
    capsys.readouterr()
    same = all((tmp_path / f"a{ext}").read_bytes() == (tmp_path / f"b{ext}").read_bytes() for ext in (".txt", ".csv"))
    record(8, codes == [0, 0] and same, f"two `matrix` runs: exit codes {codes}; tables byte-identical={same}")
