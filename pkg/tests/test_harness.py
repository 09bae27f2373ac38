import csv
import json
from dataclasses import replace

import numpy as np
import pytest

from jointattn.attention import AttentionTrace, JointAttention, jna_forward
from jointattn.experiments import (
    ExperimentConfig,
    ExperimentResult,
    ordering_checks,
    results_csv,
    results_table,
    run_cell,
    run_experiment_matrix,
    salient_recovery,
    summarize,
)
from jointattn.fusion import ModelSpec, build_model
from jointattn.synthetic import (
    SyntheticTaskSpec,
    dataset_to_json,
    generate_task,
    load_dataset,
    save_dataset,
    shuffle_labels,
)
from jointattn.tensor_core import ConfigError, make_rng
from jointattn.traces import export_trace, export_traces, frame_summary, load_traces, summary_path
from jointattn.training import TrainSchedule, WindowSpec, evaluate, train

TINY_TASK = SyntheticTaskSpec(num_classes=3, dim_s=4, dim_t=4, seq_len=6, salient_count=2, train_size=40,
                              test_size=20)
TINY = ExperimentConfig(task=TINY_TASK, schedule=TrainSchedule(0.05, (15,), 0.1, 20, 0.9, 16),
                        pretrain=TrainSchedule(0.05, (), 0.1, 5, 0.9, 16), gru_layers=(4,), attn_dim=4,
                        dominance_every=5)


def uniform_trace(t_len):
    u = np.full((t_len, t_len), 1.0 / t_len)
    return AttentionTrace(np.zeros_like(u), np.zeros_like(u), u, u)


class TestGenerateTask:
    def test_noiseless_saturated(self):
        spec = SyntheticTaskSpec(noise_sigma=0.0, salient_count=16, train_size=50, test_size=30)
        train_set, test_set = generate_task(spec)
        protos = {}
        for p in train_set:
            assert np.all(p.seq_s == p.seq_s[0])
            protos[p.label] = p.seq_s[0]
        # nearest-prototype rule on single frames is exact
        labels = sorted(protos)
        centers = np.stack([protos[k] for k in labels])
        for p in test_set:
            frame = p.seq_s[int(np.random.default_rng(0).integers(16))]
            assert labels[int(np.argmin(np.linalg.norm(centers - frame, axis=1)))] == p.label

    def test_rho_one_shares_masks(self):
        _, test = generate_task(SyntheticTaskSpec(cross_stream_rho=1.0, train_size=5, test_size=50))
        assert all(np.array_equal(p.salient_mask, p.salient_mask_t) for p in test)

    def test_rho_zero_mostly_differs(self):
        _, test = generate_task(SyntheticTaskSpec(cross_stream_rho=0.0, train_size=5, test_size=50))
        assert sum(np.array_equal(p.salient_mask, p.salient_mask_t) for p in test) < 5

    def test_mask_counts_and_shapes(self):
        spec = SyntheticTaskSpec(train_size=10, test_size=10)
        train_set, _ = generate_task(spec)
        for p in train_set:
            assert p.seq_s.shape == (16, 32) and p.seq_t.shape == (16, 32)
            assert p.salient_mask.sum() == 4 and p.salient_mask_t.sum() == 4

    def test_sizes_and_disjoint(self):
        train_set, test_set = generate_task(SyntheticTaskSpec(train_size=30, test_size=12))
        assert len(train_set) == 30 and len(test_set) == 12
        seen = {p.seq_s.tobytes() for p in train_set}
        assert not any(p.seq_s.tobytes() in seen for p in test_set)

    def test_same_spec_same_bytes(self, tmp_path):
        spec = SyntheticTaskSpec(train_size=20, test_size=10, seed=42)
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        save_dataset(a, spec, *generate_task(spec))
        save_dataset(b, spec, *generate_task(spec))
        assert a.read_bytes() == b.read_bytes()

    def test_different_seed_different_data(self):
        spec = SyntheticTaskSpec(train_size=5, test_size=5)
        assert dataset_to_json(spec, *generate_task(spec)) != dataset_to_json(spec, *generate_task(spec.with_seed(1)))

    def test_dataset_round_trip(self, tmp_path):
        spec = SyntheticTaskSpec(train_size=4, test_size=3, seed=5)
        train_set, test_set = generate_task(spec)
        save_dataset(tmp_path / "d.json", spec, train_set, test_set)
        spec2, train2, test2 = load_dataset(tmp_path / "d.json")
        assert spec2 == spec
        for p, q in zip(train_set + test_set, train2 + test2):
            np.testing.assert_array_equal(p.seq_s, q.seq_s)
            np.testing.assert_array_equal(p.salient_mask_t, q.salient_mask_t)
            assert p.label == q.label

    def test_load_rejects_other_files(self, tmp_path):
        path = tmp_path / "x.json"
        path.write_text(json.dumps({"format": "other"}))
        with pytest.raises(ConfigError):
            load_dataset(path)

    @pytest.mark.parametrize("kw", [{"salient_count": 17}, {"noise_sigma": -1.0}, {"train_size": 0},
                                    {"cross_stream_rho": 1.5}, {"num_classes": 1}])
    def test_infeasible_specs(self, kw):
        with pytest.raises(ConfigError):
            SyntheticTaskSpec(**kw)

    def test_shuffle_control_is_near_chance(self):
        spec = SyntheticTaskSpec(num_classes=5, dim_s=8, dim_t=8, seq_len=8, train_size=200, test_size=400,
                                 signal_scale=1.0, seed=2)
        train_set, test_set = generate_task(spec)
        shuffled = shuffle_labels(train_set, make_rng(0))
        assert sorted(p.label for p in shuffled) == sorted(p.label for p in train_set)
        model = build_model(ModelSpec("separate_streams", (8, 8), [8], 8, 5), 0)
        train(model, shuffled, TrainSchedule(0.05, (), 0.1, 150, 0.9, 32), WindowSpec(8, 1), make_rng(1))
        acc = evaluate(model, test_set, WindowSpec(8, 1))
        assert abs(acc - 0.2) < 4 * np.sqrt(0.2 * 0.8 / 400)


class TestSalientRecovery:
    def test_uniform_half(self):
        mask = np.array([1, 0, 1, 0, 1, 0], dtype=bool)
        assert salient_recovery(uniform_trace(6), mask) == pytest.approx(0.5)

    def test_uniform_equals_count_over_length_exactly(self):
        mask = np.zeros(16, dtype=bool)
        mask[[1, 5, 9, 12]] = True
        assert salient_recovery(uniform_trace(16), mask) == 4 / 16

    def test_all_mass_on_salient(self):
        mask = np.array([0, 1, 0], dtype=bool)
        a = np.zeros((3, 3))
        a[1, :] = 1.0
        tr = AttentionTrace(a, a, a, a.T.copy())
        assert salient_recovery(tr, mask) == 1.0

    def test_sides_use_their_own_masks(self):
        a = np.zeros((2, 2))
        a[0, :] = 1.0
        tr = AttentionTrace(a, a, a, a.T.copy())
        assert salient_recovery(tr, [True, False], [False, True]) == 0.5

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            salient_recovery(uniform_trace(4), np.ones(5, dtype=bool))


class TestTraces:
    def random_trace(self, t_len=2, seed=0):
        rng = make_rng(seed)
        p = JointAttention(3, 3, 4, rng)
        for q in p.params:
            q.value[...] = rng.normal(size=q.shape)
        _, _, tr = jna_forward(p, rng.normal(size=(t_len, 3)), rng.normal(size=(t_len, 3)))
        return tr

    def test_row_count_and_header(self, tmp_path):
        path = tmp_path / "t.csv"
        export_trace(self.random_trace(2), path)
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert list(rows[0]) == ["sequence_id", "mechanism", "matrix_name", "i", "j", "value"]
        assert len(rows) == 16
        for name in ("e", "f", "alpha", "beta"):
            assert sum(r["matrix_name"] == name for r in rows) == 4

    @pytest.mark.parametrize("suffix", [".csv", ".json"])
    def test_round_trip_keeps_invariants(self, tmp_path, suffix):
        tr = self.random_trace(5, seed=3)
        path = tmp_path / f"t{suffix}"
        export_traces([(7, tr), (8, self.random_trace(5, seed=4))], path)
        loaded = load_traces(path)
        assert set(loaded) == {"7", "8"}
        loaded["7"].check()
        for name in ("e", "f", "alpha", "beta"):
            np.testing.assert_array_equal(getattr(loaded["7"], name), getattr(tr, name))

    def test_summary_flags_negative_frames(self, tmp_path):
        tr = self.random_trace(4, seed=1)
        path = tmp_path / "t.csv"
        export_trace(tr, path, sequence_id=2)
        with open(summary_path(path), newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 8
        spatial = [r for r in rows if r["stream"] == "spatial"]
        for r in spatial:
            mean = tr.e[int(r["frame"])].mean()
            assert float(r["mean_score"]) == mean
            assert r["negative"] == ("1" if mean < 0 else "0")
        temporal = [float(r["mean_score"]) for r in rows if r["stream"] == "temporal"]
        np.testing.assert_array_equal(temporal, tr.f.mean(axis=0))

    def test_frame_summary_flags(self):
        e = np.array([[-1.0, -2.0], [3.0, 1.0]])
        u = np.full((2, 2), 0.5)
        rows = frame_summary(AttentionTrace(e, e, u, u))
        assert rows[0] == ("spatial", 0, -1.5, True)
        assert rows[1] == ("spatial", 1, 2.0, False)
        assert rows[2] == ("temporal", 0, 1.0, False)

    def test_bad_header_rejected(self, tmp_path):
        path = tmp_path / "t.csv"
        path.write_text("a,b\n1,2\n")
        with pytest.raises(ValueError):
            load_traces(path)


class TestExperimentMatrix:
    def test_single_cell_reproducible(self):
        a = run_experiment_matrix(["jna"], TINY, [0])
        b = run_experiment_matrix(["jna"], TINY, [0])
        assert len(a) == 1
        assert a == b
        r = a[0]
        assert 0.0 <= r.accuracy <= 1.0 and r.dominance_ratio >= 1.0
        assert 0.0 <= r.salient_recovery <= 1.0
        assert r.uniform_recovery == 2 / 6

    def test_paired_data_across_heads(self):
        data = generate_task(TINY_TASK.with_seed(3))
        via_matrix = run_experiment_matrix(["separate_streams", "fc_fusion"], TINY, [3])
        direct = [run_cell(h, 3, TINY, data) for h in ("separate_streams", "fc_fusion")]
        assert via_matrix == direct

    def test_parallel_matches_serial(self):
        serial = run_experiment_matrix(["separate_streams", "jna"], TINY, [0, 1])
        parallel = run_experiment_matrix(["separate_streams", "jna"], TINY, [0, 1], jobs=2)
        assert results_csv(serial) == results_csv(parallel)

    def test_unknown_head(self):
        with pytest.raises(ConfigError):
            run_experiment_matrix(["mlp"], TINY, [0])

    def test_table_layout(self):
        results = run_experiment_matrix(["separate_streams", "jna"], TINY, [0])
        table = results_table(results)
        assert "Average" in table and "JNA" in table
        assert "Spatial" in table and "Temporal" in table and "Fusion" in table
        assert "[n/a] fc_dominance_gt_jna" in table
        header = results_csv(results).splitlines()[0].split(",")
        assert header[:3] == ["head_type", "seed", "accuracy"]
        assert "wall_time" not in header


def fake(head, acc, dom, rec=None):
    return ExperimentResult(head, 0, acc, acc, acc, dom, dom, None, None, rec, 0.25)


class TestOrderingChecks:
    def test_all_pass(self):
        res = [fake("jna", 0.9, 1.5, 0.5), fake("separate_streams", 0.8, 1.2), fake("fc_fusion", 0.85, 3.0)]
        assert ordering_checks(res) == {"jna_accuracy_ge_average_fusion": True, "fc_dominance_gt_jna": True,
                                        "jna_recovery_above_uniform_by_0.10": True}

    def test_failures_flagged_in_table(self):
        res = [fake("jna", 0.7, 4.0, 0.3), fake("separate_streams", 0.8, 1.2), fake("fc_fusion", 0.85, 3.0)]
        checks = ordering_checks(res)
        assert not any(checks.values())
        assert "[FAIL] jna_accuracy_ge_average_fusion" in results_table(res)

    def test_summary_means(self):
        res = [fake("jna", 0.8, 1.0, 0.4), replace(fake("jna", 0.6, 3.0, 0.6), seed=1)]
        s = summarize(res)["jna"]
        assert s["n"] == 2
        assert s["accuracy"] == pytest.approx(0.7)
        assert s["salient_recovery"] == pytest.approx(0.5)
