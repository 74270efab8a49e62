"""Two-stage training orchestration, feature probing, and the ablation harness.

Stage one trains the feature model end-to-end with a prior-adjusted loss whose
strength grows over epochs.  Stage two freezes the features, augments
under-represented classes with the adaptive generator, and retunes the
classifier with a distillation-regularized loss.  Every run is a pure function
of its config (seed included), so reruns are bit-identical.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import model as mdl
from .afg import (
    BetaState,
    GeneratedBatch,
    build_generation_plan,
    dump_generated,
    estimate_class_stats,
    generate_for_class,
    tukey_transform,
    update_beta,
)
from .data import (
    MANY,
    GROUPS,
    EmbeddingDataset,
    GroupAssignment,
    LongTailSpec,
    SyntheticBenchmark,
    assign_groups,
    class_priors,
    synth_gaussian_mixture,
)
from .errors import ConfigError, DivergenceError
from .losses import (
    ScheduleSpec,
    alpha_at,
    cross_entropy,
    gra_loss,
    logit_adjusted_loss,
    stage2_loss,
)
from .numerics import Rng

LOSSES = ("ce", "logit_adjust", "graloss")


@dataclass
class RunConfig:
    """Everything a run needs; flat so it mirrors the JSON config format."""

    # data synthesis (the desk-scale benchmark)
    seed: int = 0
    n_classes: int = 20
    dim: int = 16
    n_max: int = 500
    imbalance: float = 100.0
    separation: float = 2.0
    val_per_class: int = 100
    test_per_class: int = 100
    # model / optimizer
    hidden: tuple[int, ...] = (64, 32)
    lr: float = 0.1
    eta_min: float = 0.0
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 128
    # stage one
    stage1_epochs: int = 60
    loss: str = "graloss"
    tau: float = 1.0
    alpha_form: str = "convex"
    alpha_s: float = 1.0
    alpha_c: float = 2.0
    # stage two
    stage2_epochs: int = 40
    stage2_lr: float | None = None  # defaults to 0.1 * lr
    afg: bool = True
    kd: bool = True
    kd_temperature: float = 2.0
    warm_start: bool = True
    learnable_scale: bool = True
    balanced_batches: bool = True
    # adaptive generator
    k_support: int = 2
    tukey_lambda: float = 0.5
    gamma: float = 0.1
    beta_init: float = 0.6
    eta_beta: float = 0.05
    target: int | None = None  # defaults to max per-class count
    cap: int | None = None  # unbounded
    stats_on_transformed: bool = True
    dump_generated: bool = False
    # group thresholds
    many_min: int = 100
    few_max: int = 20
    # probe protocol
    probe_epochs: int = 40
    probe_lr: float | None = None  # defaults to the stage-two rate
    # ablation
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)

    def __post_init__(self):
        if self.stage1_epochs < 1 or self.stage2_epochs < 1 or self.probe_epochs < 1:
            raise ConfigError("epoch counts must be at least 1", "stage1_epochs")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1", "batch_size")
        if self.loss not in LOSSES:
            raise ConfigError(f"loss must be one of {LOSSES}", "loss")
        if not 0.0 <= self.beta_init <= 1.0:
            raise ConfigError("beta_init must lie in [0, 1]", "beta_init")
        if self.gamma < 0:
            raise ConfigError("gamma must be non-negative", "gamma")
        if self.tukey_lambda < 0:
            raise ConfigError("tukey_lambda must be non-negative", "tukey_lambda")
        if self.k_support < 1:
            raise ConfigError("k_support must be at least 1", "k_support")
        if self.few_max > self.many_min:
            raise ConfigError("few_max must not exceed many_min", "few_max")
        self.hidden = tuple(int(h) for h in self.hidden)
        self.seeds = tuple(int(s) for s in self.seeds)

    @property
    def stage2_peak_lr(self) -> float:
        return self.stage2_lr if self.stage2_lr is not None else 0.1 * self.lr

    @property
    def probe_peak_lr(self) -> float:
        return self.probe_lr if self.probe_lr is not None else self.stage2_peak_lr

    def schedule(self, t_max: int) -> ScheduleSpec:
        return ScheduleSpec(self.alpha_s, self.alpha_c, self.alpha_form, t_max)

    def replaced(self, **kwargs) -> "RunConfig":
        return dataclasses.replace(self, **kwargs)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["hidden"] = list(self.hidden)
        out["seeds"] = list(self.seeds)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        for key in data:
            if key not in known:
                raise ConfigError(f"unknown config key: {key}", key)
        return cls(**data)

    @classmethod
    def baseline(cls, **overrides) -> "RunConfig":
        """Plain decoupled training: CE stage one, bare classifier retuning."""
        base = dict(loss="ce", afg=False, kd=False, learnable_scale=False)
        base.update(overrides)
        return cls(**base)


@dataclass
class MetricsReport:
    """Accuracies plus per-epoch traces of one training run or evaluation.

    Wall-clock time is kept in memory only; serialized metrics are a pure
    function of config and seed so reruns produce byte-identical files.
    """

    overall: float | None = None
    groups: dict[str, float] = field(default_factory=dict)
    per_class: list[float | None] = field(default_factory=list)
    loss_trace: list[float] = field(default_factory=list)
    alpha_trace: list[float] = field(default_factory=list)
    val_acc_trace: list[float] = field(default_factory=list)
    beta_trace: list[list[float]] = field(default_factory=list)
    generated_trace: list[int] = field(default_factory=list)
    wall_clock: float = 0.0

    def to_dict(self) -> dict:
        return {
            "overall": self.overall,
            "groups": dict(self.groups),
            "per_class": list(self.per_class),
            "loss_trace": list(self.loss_trace),
            "alpha_trace": list(self.alpha_trace),
            "val_acc_trace": list(self.val_acc_trace),
            "beta_trace": [list(b) for b in self.beta_trace],
            "generated_trace": list(self.generated_trace),
        }


def make_benchmark(config: RunConfig) -> SyntheticBenchmark:
    """The synthetic long-tail benchmark for a config; depends only on the seed."""
    spec = LongTailSpec(config.n_classes, config.n_max, config.imbalance)
    rng = Rng(config.seed).spawn(0)
    return synth_gaussian_mixture(
        spec, config.dim, config.separation, rng, config.val_per_class, config.test_per_class
    )


def dataset_hash(bench: SyntheticBenchmark) -> str:
    h = hashlib.sha256()
    for ds in (bench.train, bench.val, bench.test):
        h.update(np.int64(ds.n_samples).tobytes())
        h.update(ds.features.tobytes())
        h.update(ds.labels.tobytes())
    return h.hexdigest()[:16]


def _accuracy_by_class(pred: np.ndarray, labels: np.ndarray, n_classes: int):
    counts = np.bincount(labels, minlength=n_classes)
    correct = np.bincount(labels[pred == labels], minlength=n_classes)
    return counts, correct


def evaluate(params: mdl.ModelParams, ds: EmbeddingDataset, groups: GroupAssignment) -> MetricsReport:
    """Group-wise argmax accuracy; groups with no test samples are omitted."""
    if ds.labels.size and ds.labels.max() >= params.n_classes:
        raise ValueError("dataset labels exceed the model's class count")
    _, logits = mdl.forward(params, ds.features.astype(np.float64))
    pred = np.argmax(logits, axis=1)
    counts, correct = _accuracy_by_class(pred, ds.labels, params.n_classes)
    overall = float(correct.sum() / counts.sum())
    per_class = [
        float(correct[k] / counts[k]) if counts[k] else None for k in range(params.n_classes)
    ]
    group_acc: dict[str, float] = {}
    for name in GROUPS:
        cls = groups.classes(name)
        total = counts[cls].sum() if cls.size else 0
        if total:
            group_acc[name] = float(correct[cls].sum() / total)
    return MetricsReport(overall=overall, groups=group_acc, per_class=per_class)


def _classifier_accuracy(head: mdl.ModelParams, feats: np.ndarray, labels: np.ndarray, n_classes: int):
    pred = np.argmax(mdl.classifier_logits(head, feats), axis=1)
    counts, correct = _accuracy_by_class(pred, labels, n_classes)
    return counts, correct


def _batch_slices(order: np.ndarray, batch_size: int):
    for start in range(0, len(order), batch_size):
        yield order[start : start + batch_size]


def train_stage1(
    train: EmbeddingDataset, val: EmbeddingDataset, config: RunConfig
) -> tuple[mdl.ModelParams, MetricsReport]:
    """Representation learning on the long-tail split with plain shuffling."""
    t0 = time.perf_counter()
    rng = Rng(config.seed)
    init_rng, shuffle_rng = rng.spawn(1), rng.spawn(2)
    params = mdl.init_params(train.dim, config.hidden, train.n_classes, init_rng)
    opt = mdl.make_opt_state(params, config.momentum, config.weight_decay, "all")
    priors = class_priors(train.class_counts())
    sched = config.schedule(config.stage1_epochs)
    X = train.features.astype(np.float64)
    y = train.labels
    val_X = val.features.astype(np.float64)
    n = train.n_samples
    report = MetricsReport()
    for epoch in range(config.stage1_epochs):
        if config.loss == "graloss":
            alpha = alpha_at(sched, epoch)
        elif config.loss == "logit_adjust":
            alpha = config.tau
        else:
            alpha = 0.0
        lr_t = mdl.cosine_lr(epoch, config.stage1_epochs, config.lr, config.eta_min)
        order = shuffle_rng.permutation(n)
        epoch_loss = 0.0
        for batch in _batch_slices(order, config.batch_size):
            # overflow on the way to a non-finite loss is the divergence signal
            with np.errstate(over="ignore", invalid="ignore"):
                cache = mdl.forward_cached(params, X[batch])
                if config.loss == "ce":
                    loss, grad = cross_entropy(cache.logits, y[batch])
                elif config.loss == "logit_adjust":
                    loss, grad = logit_adjusted_loss(cache.logits, y[batch], priors, config.tau)
                else:
                    loss, grad = gra_loss(cache.logits, y[batch], priors, alpha)
                batch_loss = float(loss.mean())
                if not np.isfinite(batch_loss):
                    raise DivergenceError("stage-one loss is not finite", epoch)
                grads = mdl.backward(params, cache, grad / len(batch))
            mdl.apply_sgd(params, opt, grads, lr_t, "all")
            epoch_loss += float(loss.sum())
        report.loss_trace.append(epoch_loss / n)
        report.alpha_trace.append(float(alpha))
        _, val_logits = mdl.forward(params, val_X)
        val_pred = np.argmax(val_logits, axis=1)
        report.val_acc_trace.append(float(np.mean(val_pred == val.labels)))
    groups = assign_groups(train.class_counts(), config.many_min, config.few_max)
    final_val = evaluate(params, val, groups)
    report.overall = final_val.overall
    report.groups = final_val.groups
    report.per_class = final_val.per_class
    report.wall_clock = time.perf_counter() - t0
    return params, report


def _balanced_selection(
    pools: list[np.ndarray], target: int, rng: Rng
) -> np.ndarray:
    """Per class, draw `target` row indices from its pool (with replacement
    only when the pool is short), then mix classes together."""
    picks = []
    for pool in pools:
        if len(pool) >= target:
            picks.append(pool[rng.permutation(len(pool))[:target]])
        else:
            picks.append(pool[rng.integers(len(pool), target)])
    chosen = np.concatenate(picks)
    return chosen[rng.permutation(len(chosen))]


def train_stage2(
    m1: mdl.ModelParams,
    train: EmbeddingDataset,
    val: EmbeddingDataset,
    config: RunConfig,
    dump_dir: str | Path | None = None,
) -> tuple[mdl.ModelParams, MetricsReport]:
    """Classifier rebalancing on frozen features with adaptive generation.

    Each epoch regenerates synthetic features from the current confidence
    state, mixes them with the real pool (class-balanced when configured),
    and tunes the warm-started classifier with the CE + distillation loss;
    distillation only touches real samples of well-represented classes.
    """
    t0 = time.perf_counter()
    L = train.n_classes
    counts = train.class_counts()
    groups = assign_groups(counts, config.many_min, config.few_max)
    many_class = groups.mask(MANY)
    rng = Rng(config.seed)
    gen_root, shuffle_rng, init_rng = rng.spawn(3), rng.spawn(4), rng.spawn(5)

    X = train.features.astype(np.float64)
    y = train.labels
    feats_raw = mdl.features(m1, X)
    use_transform = config.afg and config.stats_on_transformed
    space = tukey_transform(feats_raw, config.tukey_lambda) if use_transform else feats_raw
    val_feats = mdl.features(m1, val.features.astype(np.float64))
    val_space = (
        tukey_transform(val_feats, config.tukey_lambda) if use_transform else val_feats
    )

    plan = build_generation_plan(counts, config.target, config.cap)
    beta = None
    stats = None
    if config.afg:
        stats = estimate_class_stats(space, y, L)
        beta = BetaState.initial(
            L, config.beta_init, config.eta_beta, counts < plan.target
        )

    m2 = m1.copy()
    m2.feature_power = config.tukey_lambda if use_transform else None
    if not config.warm_start:
        m2.clf_weight, m2.clf_bias = mdl.init_classifier(m2.feature_dim, L, init_rng)
    if config.learnable_scale:
        m2.clf_scale = np.ones(L)
    opt = mdl.make_opt_state(m2, config.momentum, config.weight_decay, "classifier")
    sched2 = config.schedule(config.stage2_epochs)

    class_rows = [np.flatnonzero(y == k) for k in range(L)]
    n_real = train.n_samples
    report = MetricsReport()
    last_batches: list[GeneratedBatch] = []
    for epoch in range(config.stage2_epochs):
        alpha2 = alpha_at(sched2, epoch) if config.kd else 0.0
        lr_t = mdl.cosine_lr(epoch, config.stage2_epochs, config.stage2_peak_lr, config.eta_min)
        # Teacher logits recomputed each epoch through the frozen stage-one model.
        teacher_real = mdl.classifier_logits(m1, feats_raw)

        gen_batches: list[GeneratedBatch] = []
        if config.afg:
            epoch_rng = gen_root.spawn(epoch)
            for k in range(L):
                if plan.generate[k] == 0:
                    continue
                batch = generate_for_class(
                    k,
                    plan,
                    space[class_rows[k]],
                    stats,
                    float(beta.beta[k]),
                    config.gamma,
                    config.k_support,
                    epoch_rng.spawn(k),
                )
                if len(batch.features):
                    gen_batches.append(batch)
        last_batches = gen_batches

        parts_f = [space] + [b.features for b in gen_batches]
        parts_y = [y] + [
            np.full(len(b.features), b.class_id, dtype=np.int64) for b in gen_batches
        ]
        n_gen = sum(len(b.features) for b in gen_batches)
        report.generated_trace.append(n_gen)
        all_f = np.concatenate(parts_f) if n_gen else space
        all_y = np.concatenate(parts_y) if n_gen else y
        all_teacher = np.zeros((len(all_y), L))
        all_teacher[:n_real] = teacher_real
        # Distillation applies to real samples of well-represented classes only.
        all_head = np.zeros(len(all_y), dtype=bool)
        all_head[:n_real] = many_class[y]

        if config.balanced_batches:
            pools = [np.flatnonzero(all_y == k) for k in range(L)]
            order = _balanced_selection(pools, plan.target, shuffle_rng)
        else:
            order = shuffle_rng.permutation(len(all_y))

        epoch_loss = 0.0
        for batch in _batch_slices(order, config.batch_size):
            with np.errstate(over="ignore", invalid="ignore"):
                logits = mdl.classifier_logits(m2, all_f[batch])
                loss, grad = stage2_loss(
                    logits,
                    all_y[batch],
                    all_teacher[batch],
                    alpha2,
                    all_head[batch],
                    config.kd_temperature,
                )
                batch_loss = float(loss.mean())
                if not np.isfinite(batch_loss):
                    raise DivergenceError("stage-two loss is not finite", epoch)
                grads = mdl.classifier_backward(m2, all_f[batch], grad / len(batch))
            mdl.apply_sgd(m2, opt, grads, lr_t, "classifier")
            epoch_loss += float(loss.sum())
        report.loss_trace.append(epoch_loss / len(order))
        report.alpha_trace.append(float(alpha2))

        val_counts, val_correct = _classifier_accuracy(m2, val_space, val.labels, L)
        report.val_acc_trace.append(float(val_correct.sum() / val_counts.sum()))
        if config.afg:
            with np.errstate(invalid="ignore"):
                val_acc = np.where(val_counts > 0, val_correct / np.maximum(val_counts, 1), 0.0)
            beta = update_beta(beta, val_acc)
            report.beta_trace.append([float(b) for b in beta.beta])

    if dump_dir is not None and config.dump_generated:
        dump_generated(dump_dir, last_batches, m2.feature_dim, L)
    final_val = evaluate(m2, val, groups)
    report.overall = final_val.overall
    report.groups = final_val.groups
    report.per_class = final_val.per_class
    report.wall_clock = time.perf_counter() - t0
    return m2, report


def probe_features(
    m: mdl.ModelParams,
    balanced_train: EmbeddingDataset,
    test: EmbeddingDataset,
    config: RunConfig,
    groups: GroupAssignment | None = None,
) -> MetricsReport:
    """Feature-quality probe: freeze features, retrain a fresh classifier.

    The classifier is reinitialized from scratch and trained with plain
    cross-entropy on the balanced split; the returned metrics score the
    frozen feature model on the test split.
    """
    if balanced_train.n_classes != m.n_classes:
        raise ValueError("balanced split and model disagree on class count")
    t0 = time.perf_counter()
    rng = Rng(config.seed)
    init_rng, shuffle_rng = rng.spawn(7), rng.spawn(8)
    feats = mdl.features(m, balanced_train.features.astype(np.float64))
    test_feats = mdl.features(m, test.features.astype(np.float64))
    w, b = mdl.init_classifier(m.feature_dim, m.n_classes, init_rng)
    head = mdl.ModelParams([], w, b)
    opt = mdl.make_opt_state(head, config.momentum, config.weight_decay, "classifier")
    y = balanced_train.labels
    n = balanced_train.n_samples
    report = MetricsReport()
    for epoch in range(config.probe_epochs):
        lr_t = mdl.cosine_lr(epoch, config.probe_epochs, config.probe_peak_lr, config.eta_min)
        order = shuffle_rng.permutation(n)
        epoch_loss = 0.0
        for batch in _batch_slices(order, config.batch_size):
            with np.errstate(over="ignore", invalid="ignore"):
                logits = mdl.classifier_logits(head, feats[batch])
                loss, grad = cross_entropy(logits, y[batch])
                batch_loss = float(loss.mean())
                if not np.isfinite(batch_loss):
                    raise DivergenceError("probe loss is not finite", epoch)
                grads = mdl.classifier_backward(head, feats[batch], grad / len(batch))
            mdl.apply_sgd(head, opt, grads, lr_t, "classifier")
            epoch_loss += float(loss.sum())
        report.loss_trace.append(epoch_loss / n)
    pred = np.argmax(mdl.classifier_logits(head, test_feats), axis=1)
    counts, correct = _accuracy_by_class(pred, test.labels, m.n_classes)
    report.overall = float(correct.sum() / counts.sum())
    report.per_class = [
        float(correct[k] / counts[k]) if counts[k] else None for k in range(m.n_classes)
    ]
    if groups is not None:
        for name in GROUPS:
            cls = groups.classes(name)
            total = counts[cls].sum() if cls.size else 0
            if total:
                report.groups[name] = float(correct[cls].sum() / total)
    report.wall_clock = time.perf_counter() - t0
    return report


@dataclass
class ExperimentResult:
    """Everything a full run produces, ready for serialization."""

    config: RunConfig
    dataset_hash: str
    m1: mdl.ModelParams
    stage1: MetricsReport
    test_m1: MetricsReport
    m2: mdl.ModelParams | None = None
    stage2: MetricsReport | None = None
    test_m2: MetricsReport | None = None

    def to_dict(self) -> dict:
        out = {
            "config": self.config.to_dict(),
            "dataset_hash": self.dataset_hash,
            "stage1": self.stage1.to_dict(),
            "test_m1": self.test_m1.to_dict(),
        }
        if self.m2 is not None:
            out["stage2"] = self.stage2.to_dict()
            out["test_m2"] = self.test_m2.to_dict()
        return out


def run_experiment(
    config: RunConfig,
    bench: SyntheticBenchmark | None = None,
    stages: str = "both",
    m1: mdl.ModelParams | None = None,
    dump_dir: str | Path | None = None,
) -> ExperimentResult:
    """Synthesize (or accept) a benchmark and run the requested stages."""
    if stages not in ("1", "2", "both"):
        raise ConfigError("stages must be '1', '2', or 'both'", "stage")
    if bench is None:
        bench = make_benchmark(config)
    groups = assign_groups(bench.train.class_counts(), config.many_min, config.few_max)
    if stages in ("1", "both"):
        m1, stage1 = train_stage1(bench.train, bench.val, config)
    else:
        if m1 is None:
            raise ConfigError("stage 2 alone needs a stage-one model", "stage")
        stage1 = MetricsReport()
    test_m1 = evaluate(m1, bench.test, groups)
    result = ExperimentResult(config, dataset_hash(bench), m1, stage1, test_m1)
    if stages in ("2", "both"):
        m2, stage2 = train_stage2(m1, bench.train, bench.val, config, dump_dir=dump_dir)
        result.m2 = m2
        result.stage2 = stage2
        result.test_m2 = evaluate(m2, bench.test, groups)
    return result


# --- ablation harness ---


@dataclass
class AblationCell:
    axis: str
    row: str
    seed: int
    dataset_hash: str
    test: MetricsReport
    probe: MetricsReport | None = None

    def to_dict(self) -> dict:
        out = {
            "axis": self.axis,
            "row": self.row,
            "seed": self.seed,
            "dataset_hash": self.dataset_hash,
            "test": self.test.to_dict(),
        }
        if self.probe is not None:
            out["probe"] = self.probe.to_dict()
        return out


def _axis_rows(axis: str) -> list[tuple[str, dict]]:
    if axis == "alpha_form":
        return [
            ("linear", {"loss": "graloss", "alpha_form": "linear"}),
            ("concave", {"loss": "graloss", "alpha_form": "concave"}),
            ("convex(c=4)", {"loss": "graloss", "alpha_form": "convex", "alpha_c": 4.0}),
            ("convex(c=6)", {"loss": "graloss", "alpha_form": "convex", "alpha_c": 6.0}),
            ("convex(c=8)", {"loss": "graloss", "alpha_form": "convex", "alpha_c": 8.0}),
            ("convex(c=2)", {"loss": "graloss", "alpha_form": "convex", "alpha_c": 2.0}),
        ]
    if axis == "loss_choice":
        rows = []
        for loss in LOSSES:
            for method, scale in (("crt", False), ("lws", True)):
                rows.append(
                    (
                        f"{loss}+{method}",
                        {
                            "loss": loss,
                            "afg": False,
                            "kd": False,
                            "learnable_scale": scale,
                        },
                    )
                )
        return rows
    if axis == "components":
        stage1_only = {"__stage1_only__": True}
        return [
            ("ce", {"loss": "ce", **stage1_only}),
            ("graloss", {"loss": "graloss", **stage1_only}),
            ("logit_adjust", {"loss": "logit_adjust", **stage1_only}),
            ("graloss+afg", {"loss": "graloss", "afg": True, "kd": False}),
            ("logit_adjust+afg+kd", {"loss": "logit_adjust", "afg": True, "kd": True}),
            ("ce+afg+kd", {"loss": "ce", "afg": True, "kd": True}),
            ("graloss+afg+kd", {"loss": "graloss", "afg": True, "kd": True}),
        ]
    raise ConfigError(f"unknown ablation axis: {axis}", "axis")


def _run_cell(args: tuple[RunConfig, str, str, dict, int]) -> AblationCell:
    base, axis, row, overrides, seed = args
    overrides = dict(overrides)
    stage1_only = overrides.pop("__stage1_only__", False)
    config = base.replaced(seed=seed, **overrides)
    bench = make_benchmark(config)
    groups = assign_groups(bench.train.class_counts(), config.many_min, config.few_max)
    if axis == "alpha_form":
        m1, _ = train_stage1(bench.train, bench.val, config)
        probe = probe_features(m1, bench.val, bench.test, config, groups)
        test = evaluate(m1, bench.test, groups)
        return AblationCell(axis, row, seed, dataset_hash(bench), test, probe)
    stages = "1" if stage1_only else "both"
    result = run_experiment(config, bench=bench, stages=stages)
    test = result.test_m2 if result.m2 is not None else result.test_m1
    return AblationCell(axis, row, seed, result.dataset_hash, test)


def run_ablation(
    config: RunConfig,
    axis: str,
    seeds: tuple[int, ...] | None = None,
    workers: int = 1,
) -> list[AblationCell]:
    """Cross-product of one axis's settings with a shared seed set.

    Cells sharing a seed share their dataset bitwise; cells are independent
    and may fan out to a process pool.
    """
    seeds = tuple(seeds) if seeds is not None else config.seeds
    rows = _axis_rows(axis)
    tasks = [(config, axis, row, overrides, seed) for row, overrides in rows for seed in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            cells = list(pool.map(_run_cell, tasks))
    else:
        cells = [_run_cell(t) for t in tasks]
    return cells


# --- serialization ---


def metrics_json(result: ExperimentResult) -> str:
    return json.dumps(result.to_dict(), indent=2, sort_keys=True)


def metrics_csv_rows(result: ExperimentResult) -> list[dict]:
    """Flat rows (one per model x group) for plotting tools."""
    rows = []

    def add(stage: str, report: MetricsReport):
        rows.append(
            {
                "seed": result.config.seed,
                "dataset_hash": result.dataset_hash,
                "model": stage,
                "group": "overall",
                "accuracy": report.overall,
            }
        )
        for g, acc in report.groups.items():
            rows.append(
                {
                    "seed": result.config.seed,
                    "dataset_hash": result.dataset_hash,
                    "model": stage,
                    "group": g,
                    "accuracy": acc,
                }
            )

    add("stage1", result.test_m1)
    if result.test_m2 is not None:
        add("stage2", result.test_m2)
    return rows


def ablation_csv_rows(cells: list[AblationCell]) -> list[dict]:
    rows = []
    for cell in cells:
        splits = [("test", cell.test)]
        if cell.probe is not None:
            splits.append(("probe", cell.probe))
        for split, report in splits:
            rows.append(
                {
                    "axis": cell.axis,
                    "row": cell.row,
                    "seed": cell.seed,
                    "dataset_hash": cell.dataset_hash,
                    "split": split,
                    "group": "overall",
                    "accuracy": report.overall,
                }
            )
            for g, acc in report.groups.items():
                rows.append(
                    {
                        "axis": cell.axis,
                        "row": cell.row,
                        "seed": cell.seed,
                        "dataset_hash": cell.dataset_hash,
                        "split": split,
                        "group": g,
                        "accuracy": acc,
                    }
                )
    return rows


def write_csv(path: str | Path, rows: list[dict]) -> None:
    import csv as _csv

    if not rows:
        Path(path).write_text("")
        return
    with open(path, "w", newline="") as fh:
        writer = _csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
