"""Tests for two-stage orchestration, probing, evaluation, and the ablation harness."""

import json

import numpy as np
import pytest

from taillab.afg import build_generation_plan
from taillab.data import EmbeddingDataset, LongTailSpec, assign_groups, synth_gaussian_mixture
from taillab.errors import ConfigError, DivergenceError
from taillab.losses import alpha_at
from taillab.model import DenseLayer, ModelParams, init_params
from taillab.numerics import Rng
from taillab.pipeline import (
    MetricsReport,
    RunConfig,
    ablation_csv_rows,
    dataset_hash,
    evaluate,
    make_benchmark,
    metrics_csv_rows,
    metrics_json,
    probe_features,
    run_ablation,
    run_experiment,
    train_stage1,
    train_stage2,
)

# small but non-trivial settings so pipeline tests stay fast
FAST = dict(
    n_classes=6,
    dim=6,
    n_max=80,
    imbalance=20.0,
    val_per_class=25,
    test_per_class=25,
    hidden=(16, 8),
    stage1_epochs=6,
    stage2_epochs=5,
    probe_epochs=5,
    many_min=40,
    few_max=10,
)


def fast_config(**overrides):
    merged = {**FAST, **overrides}
    return RunConfig(**merged)


class TestRunConfig:
    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError) as err:
            RunConfig.from_dict({"sneaky": 1})
        assert err.value.key == "sneaky"

    def test_roundtrip(self):
        cfg = fast_config(seed=5)
        again = RunConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
        assert again == cfg

    def test_validation(self):
        with pytest.raises(ConfigError):
            fast_config(loss="focal")
        with pytest.raises(ConfigError):
            fast_config(beta_init=1.5)
        with pytest.raises(ConfigError):
            fast_config(stage1_epochs=0)

    def test_baseline_preset(self):
        base = RunConfig.baseline()
        assert base.loss == "ce" and not base.afg and not base.kd and not base.learnable_scale


class TestStage1:
    def test_same_seed_identical_traces(self):
        cfg = fast_config(seed=3)
        bench = make_benchmark(cfg)
        _, rep_a = train_stage1(bench.train, bench.val, cfg)
        _, rep_b = train_stage1(bench.train, bench.val, cfg)
        assert rep_a.loss_trace == rep_b.loss_trace
        assert rep_a.val_acc_trace == rep_b.val_acc_trace

    def test_different_seed_changes_results(self):
        a = run_experiment(fast_config(seed=0), stages="1")
        b = run_experiment(fast_config(seed=1), stages="1")
        assert a.test_m1.overall != b.test_m1.overall

    def test_alpha_trace_follows_schedule(self):
        cfg = fast_config(seed=1, loss="graloss")
        bench = make_benchmark(cfg)
        _, rep = train_stage1(bench.train, bench.val, cfg)
        sched = cfg.schedule(cfg.stage1_epochs)
        expected = [alpha_at(sched, t) for t in range(cfg.stage1_epochs)]
        assert rep.alpha_trace == expected

    def test_ce_has_zero_alpha_trace(self):
        cfg = fast_config(seed=1, loss="ce")
        bench = make_benchmark(cfg)
        _, rep = train_stage1(bench.train, bench.val, cfg)
        assert rep.alpha_trace == [0.0] * cfg.stage1_epochs

    def test_separable_toy_set_reaches_full_train_accuracy(self):
        """A linearly separable balanced 3-class problem trains to 100%."""
        rng = Rng(0)
        means = 1.0 + 6.0 * np.eye(3, 4)  # one orthogonal direction per class

        def draw(per_class):
            feats = np.vstack(
                [means[k] + 0.5 * rng.normals(per_class * 4).reshape(per_class, 4) for k in range(3)]
            )
            labels = np.repeat(np.arange(3), per_class)
            return EmbeddingDataset(np.maximum(feats, 0).astype(np.float32), labels, 3)

        train, val = draw(40), draw(10)
        cfg = RunConfig(
            n_classes=3, dim=4, hidden=(8,), stage1_epochs=40, loss="ce", lr=0.05, batch_size=16
        )
        m1, _ = train_stage1(train, val, cfg)
        groups = assign_groups(train.class_counts(), cfg.many_min, cfg.few_max)
        assert evaluate(m1, train, groups).overall == 1.0

    def test_divergence_raises_with_epoch(self):
        cfg = fast_config(seed=0, lr=1e14, stage1_epochs=3)
        bench = make_benchmark(cfg)
        with pytest.raises(DivergenceError):
            train_stage1(bench.train, bench.val, cfg)


@pytest.fixture(scope="module")
def stage2_setup():
    cfg = fast_config(seed=2)
    bench = make_benchmark(cfg)
    m1, _ = train_stage1(bench.train, bench.val, cfg)
    return cfg, bench, m1


class TestStage2:

    def test_feature_model_frozen_bit_identical(self, stage2_setup):
        cfg, bench, m1 = stage2_setup
        before = m1.feature_bytes()
        m2, _ = train_stage2(m1, bench.train, bench.val, cfg)
        assert m1.feature_bytes() == before
        assert m2.feature_bytes() == before

    def test_generated_counts_match_plan(self, stage2_setup):
        cfg, bench, m1 = stage2_setup
        _, rep = train_stage2(m1, bench.train, bench.val, cfg)
        plan = build_generation_plan(bench.train.class_counts(), cfg.target, cfg.cap)
        assert rep.generated_trace == [plan.total] * cfg.stage2_epochs

    def test_alpha_trace_is_local_schedule(self, stage2_setup):
        cfg, bench, m1 = stage2_setup
        _, rep = train_stage2(m1, bench.train, bench.val, cfg)
        sched = cfg.schedule(cfg.stage2_epochs)
        assert rep.alpha_trace == [alpha_at(sched, t) for t in range(cfg.stage2_epochs)]

    def test_beta_stays_in_unit_interval(self, stage2_setup):
        cfg, bench, m1 = stage2_setup
        _, rep = train_stage2(m1, bench.train, bench.val, cfg)
        trace = np.asarray(rep.beta_trace)
        assert trace.shape == (cfg.stage2_epochs, cfg.n_classes)
        assert np.all((trace >= 0.0) & (trace <= 1.0))

    def test_crt_style_flags(self, stage2_setup):
        """afg off + kd off reduces to plain classifier fine-tuning."""
        cfg, bench, m1 = stage2_setup
        plain = cfg.replaced(afg=False, kd=False, learnable_scale=False)
        m2, rep = train_stage2(m1, bench.train, bench.val, plain)
        assert rep.beta_trace == []
        assert rep.generated_trace == [0] * plain.stage2_epochs
        assert rep.alpha_trace == [0.0] * plain.stage2_epochs
        assert m2.clf_scale is None
        assert m2.feature_power is None

    def test_warm_start_inherits_classifier(self, stage2_setup):
        cfg, bench, m1 = stage2_setup
        cold = cfg.replaced(warm_start=False, stage2_epochs=1)
        warm = cfg.replaced(warm_start=True, stage2_epochs=1)
        m2_cold, _ = train_stage2(m1, bench.train, bench.val, cold)
        m2_warm, _ = train_stage2(m1, bench.train, bench.val, warm)
        assert not np.array_equal(m2_cold.clf_weight, m2_warm.clf_weight)

    def test_stage2_alone_requires_model(self):
        with pytest.raises(ConfigError):
            run_experiment(fast_config(), stages="2")


class TestBaselineEquivalence:
    def test_all_components_off_reproduces_baseline_bitwise(self):
        flags = fast_config(seed=4, loss="ce", afg=False, kd=False, learnable_scale=False)
        preset = RunConfig.baseline(**{**FAST, "seed": 4})
        res_a = run_experiment(flags)
        res_b = run_experiment(preset)
        assert metrics_json(res_a) == metrics_json(res_b)


class TestEvaluate:
    def _identity_model(self, n):
        return ModelParams(
            [DenseLayer(np.eye(n), np.zeros(n), "relu")], np.eye(n), np.zeros(n)
        )

    def test_perfect_predictor(self):
        feats = np.eye(3, dtype=np.float32)[[0, 0, 1, 1, 2, 2]]
        ds = EmbeddingDataset(feats, np.array([0, 0, 1, 1, 2, 2]), 3)
        groups = assign_groups([2, 2, 2], many_min=100, few_max=1)
        rep = evaluate(self._identity_model(3), ds, groups)
        assert rep.overall == 1.0
        assert all(v == 1.0 for v in rep.per_class)
        assert rep.groups == {"medium": 1.0}

    def test_constant_predictor_chance_level(self):
        model = ModelParams(
            [DenseLayer(np.eye(4), np.zeros(4), "relu")],
            np.zeros((4, 4)),
            np.array([1.0, 0.0, 0.0, 0.0]),
        )
        feats = np.abs(Rng(0).normals(80)).reshape(20, 4).astype(np.float32)
        labels = np.repeat(np.arange(4), 5)
        ds = EmbeddingDataset(feats, labels, 4)
        rep = evaluate(model, ds, assign_groups([5, 5, 5, 5]))
        assert rep.overall == 0.25

    def test_hand_counted_confusion(self):
        """6 samples, one flipped per class pair: accuracies counted by hand."""
        # sample features point at the predicted class; labels differ for two rows
        feats = np.eye(3, dtype=np.float32)[[0, 1, 1, 1, 2, 0]]
        labels = np.array([0, 0, 1, 1, 2, 2])
        ds = EmbeddingDataset(feats, labels, 3)
        groups = assign_groups([150, 15, 2], many_min=100, few_max=10)
        rep = evaluate(self._identity_model(3), ds, groups)
        # class 0: 1/2 correct; class 1: 2/2; class 2: 1/2
        assert rep.per_class == [0.5, 1.0, 0.5]
        assert rep.overall == pytest.approx(4 / 6)
        assert rep.groups["many"] == 0.5
        assert rep.groups["medium"] == 1.0
        assert rep.groups["few"] == 0.5

    def test_overall_is_count_weighted_mean(self):
        cfg = fast_config(seed=5)
        res = run_experiment(cfg, stages="1")
        bench = make_benchmark(cfg)
        counts = bench.test.class_counts()
        weighted = sum(c * a for c, a in zip(counts, res.test_m1.per_class)) / counts.sum()
        assert res.test_m1.overall == pytest.approx(weighted, abs=1e-9)

    def test_empty_group_omitted(self):
        feats = np.eye(2, dtype=np.float32)[[0, 1]]
        ds = EmbeddingDataset(feats, np.array([0, 1]), 2)
        groups = assign_groups([500, 400], many_min=100, few_max=10)  # no few classes
        rep = evaluate(self._identity_model(2), ds, groups)
        assert "few" not in rep.groups and "medium" not in rep.groups
        assert rep.groups["many"] == 1.0


@pytest.fixture(scope="module")
def probe_setup():
    cfg = fast_config(seed=6)
    bench = make_benchmark(cfg)
    m1, _ = train_stage1(bench.train, bench.val, cfg)
    return cfg, bench, m1


class TestProbe:

    def test_probe_deterministic(self, probe_setup):
        cfg, bench, m1 = probe_setup
        a = probe_features(m1, bench.val, bench.test, cfg)
        b = probe_features(m1, bench.val, bench.test, cfg)
        assert a.overall == b.overall

    def test_trained_features_beat_random(self, probe_setup):
        cfg, bench, m1 = probe_setup
        random_model = init_params(cfg.dim, cfg.hidden, cfg.n_classes, Rng(777))
        trained = probe_features(m1, bench.val, bench.test, cfg)
        random_score = probe_features(random_model, bench.val, bench.test, cfg)
        assert trained.overall > random_score.overall

    def test_class_count_mismatch_rejected(self, probe_setup):
        cfg, bench, m1 = probe_setup
        other = synth_gaussian_mixture(LongTailSpec(3, 30, 2), cfg.dim, 1.0, Rng(1), 5, 5)
        with pytest.raises(ValueError):
            probe_features(m1, other.val, other.test, cfg)


class TestAblation:
    def test_components_axis_has_seven_rows(self):
        cfg = fast_config(stage1_epochs=2, stage2_epochs=2, probe_epochs=2)
        cells = run_ablation(cfg, "components", seeds=(0,))
        assert len(cells) == 7
        labels = [c.row for c in cells]
        assert len(set(labels)) == 7

    def test_alpha_form_axis_covers_six_forms(self):
        cfg = fast_config(stage1_epochs=2, stage2_epochs=2, probe_epochs=2)
        cells = run_ablation(cfg, "alpha_form", seeds=(0,))
        rows = {c.row for c in cells}
        assert rows == {
            "linear",
            "concave",
            "convex(c=2)",
            "convex(c=4)",
            "convex(c=6)",
            "convex(c=8)",
        }
        assert all(c.probe is not None for c in cells)

    def test_cells_share_dataset_hash_per_seed(self):
        cfg = fast_config(stage1_epochs=2, stage2_epochs=2, probe_epochs=2)
        cells = run_ablation(cfg, "loss_choice", seeds=(0, 1))
        by_seed = {}
        for cell in cells:
            by_seed.setdefault(cell.seed, set()).add(cell.dataset_hash)
        assert all(len(hashes) == 1 for hashes in by_seed.values())
        assert by_seed[0] != by_seed[1]

    def test_unknown_axis_rejected(self):
        with pytest.raises(ConfigError):
            run_ablation(fast_config(), "optimizer")

    def test_csv_rows_flat_format(self):
        cfg = fast_config(stage1_epochs=2, stage2_epochs=2, probe_epochs=2)
        cells = run_ablation(cfg, "alpha_form", seeds=(0,))
        rows = ablation_csv_rows(cells)
        assert {r["split"] for r in rows} == {"test", "probe"}
        assert all(set(r) == {"axis", "row", "seed", "dataset_hash", "split", "group", "accuracy"} for r in rows)


class TestSerialization:
    def test_metrics_json_deterministic(self):
        cfg = fast_config(seed=7)
        assert metrics_json(run_experiment(cfg)) == metrics_json(run_experiment(cfg))

    def test_metrics_json_schema(self):
        cfg = fast_config(seed=8)
        payload = json.loads(metrics_json(run_experiment(cfg)))
        assert set(payload) == {"config", "dataset_hash", "stage1", "test_m1", "stage2", "test_m2"}
        assert payload["config"]["seed"] == 8
        assert len(payload["stage1"]["loss_trace"]) == cfg.stage1_epochs
        assert len(payload["stage2"]["beta_trace"]) == cfg.stage2_epochs

    def test_csv_rows(self):
        res = run_experiment(fast_config(seed=9))
        rows = metrics_csv_rows(res)
        models = {r["model"] for r in rows}
        assert models == {"stage1", "stage2"}
        assert any(r["group"] == "overall" for r in rows)

    def test_wall_clock_not_serialized(self):
        res = run_experiment(fast_config(seed=10), stages="1")
        assert res.stage1.wall_clock > 0
        assert "wall_clock" not in metrics_json(res)


class TestDatasetHash:
    def test_hash_tracks_content(self):
        a = make_benchmark(fast_config(seed=0))
        b = make_benchmark(fast_config(seed=0))
        c = make_benchmark(fast_config(seed=1))
        assert dataset_hash(a) == dataset_hash(b)
        assert dataset_hash(a) != dataset_hash(c)


class TestMetricsReport:
    def test_to_dict_keys(self):
        rep = MetricsReport(overall=0.5)
        keys = set(rep.to_dict())
        assert "wall_clock" not in keys
        assert {"overall", "groups", "per_class", "loss_trace"} <= keys
