"""Adaptive feature generation for under-represented classes.

The generator models each class as a Gaussian in (power-transformed) feature
space, borrows first and second moments from nearby better-represented
classes to calibrate a distribution around every tail sample, and draws
synthetic features from it.  A per-class confidence score controls how far
the calibration moves toward the support classes and adapts to validation
accuracy.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import EmbeddingDataset, save_embeddings
from .numerics import Rng, cholesky_psd_batch

_MIN_DISTANCE = 1e-9
_LOG_EPS = 1e-6


def tukey_transform(x: np.ndarray, lam: float) -> np.ndarray:
    """Ladder-of-powers transform: x^lam for lam > 0, log(x + 1e-6) at lam = 0.

    Inputs must be non-negative; skew shrinks as lam decreases, making a
    Gaussian fit more faithful.
    """
    if lam < 0:
        raise ValueError("lam must be non-negative")
    x = np.asarray(x, dtype=np.float64)
    bad = np.flatnonzero(x < 0)
    if bad.size:
        raise ValueError(f"negative entry at flat index {bad[0]}: {x.flat[bad[0]]}")
    if lam == 0:
        return np.log(x + _LOG_EPS)
    return np.power(x, lam)


@dataclass
class ClassStats:
    """Per-class Gaussian moments: mean, unbiased covariance, sample count.

    Classes with a single sample cannot support a covariance estimate; they
    receive the pooled diagonal fallback (average per-dimension variance over
    classes with >= 2 samples) and are flagged.
    """

    means: np.ndarray  # (L, F)
    covs: np.ndarray  # (L, F, F)
    counts: np.ndarray  # (L,)
    pooled_fallback: np.ndarray  # (L,) bool

    @property
    def n_classes(self) -> int:
        return self.means.shape[0]


def estimate_class_stats(features: np.ndarray, labels: np.ndarray, n_classes: int) -> ClassStats:
    """Empirical per-class mean and unbiased covariance of feature vectors."""
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    dim = x.shape[1]
    counts = np.bincount(y, minlength=n_classes)
    if np.any(counts == 0):
        raise ValueError(f"class {int(np.flatnonzero(counts == 0)[0])} has no samples")
    means = np.zeros((n_classes, dim))
    covs = np.zeros((n_classes, dim, dim))
    fallback = counts == 1
    diag_sum = np.zeros(dim)
    n_diag = 0
    for k in range(n_classes):
        rows = x[y == k]
        means[k] = rows.mean(axis=0)
        if counts[k] >= 2:
            centered = rows - means[k]
            c = centered.T @ centered / (counts[k] - 1)
            covs[k] = 0.5 * (c + c.T)
            diag_sum += np.diag(covs[k])
            n_diag += 1
    if np.any(fallback):
        if n_diag == 0:
            raise ValueError("cannot pool a fallback covariance: no class has >= 2 samples")
        covs[fallback] = np.diag(diag_sum / n_diag)
    return ClassStats(means, covs, counts.astype(np.int64), fallback)


def support_set(x_hat: np.ndarray, class_id: int, stats: ClassStats, k_support: int) -> np.ndarray:
    """The k nearest classes holding strictly more samples than x_hat's class.

    Distances are Euclidean to the class means; ties break toward the smaller
    class index.  Returns an empty array when no class is eligible (the caller
    skips calibration then).
    """
    if k_support < 1:
        raise ValueError("k_support must be at least 1")
    eligible = np.flatnonzero(stats.counts > stats.counts[class_id])
    if eligible.size == 0:
        return eligible
    d = np.linalg.norm(stats.means[eligible] - np.asarray(x_hat, dtype=np.float64), axis=1)
    order = np.argsort(d, kind="stable")  # stable: equal distances keep index order
    return eligible[order[: min(k_support, eligible.size)]]


@dataclass
class CalibratedDistribution:
    """Gaussian calibrated around one tail sample, ready to sample from."""

    mean: np.ndarray
    cov: np.ndarray
    source_id: int
    support: tuple[int, ...]


def calibrate(
    x_hat: np.ndarray,
    own_cov: np.ndarray,
    support: np.ndarray,
    stats: ClassStats,
    beta: float,
    gamma: float,
    source_id: int = -1,
) -> CalibratedDistribution:
    """Blend a tail sample with its support classes' moments.

    With weights w_j = N_j / d_j (more samples and smaller distance mean more
    influence):

        mean = (1-b) x_hat + b * sum(w_j mu_j) / sum(w_j)
        cov  = (1-b)^2 own + b^2 * sum(w_j S_j) / sum(w_j) + gamma I

    b = 0 keeps the sample's own distribution; b = 1 fully adopts the support
    mixture.  The result is symmetrized; PSD is enforced at factorization time.
    """
    support = np.asarray(support, dtype=np.int64)
    if support.size == 0:
        raise ValueError("support set must be non-empty")
    if not 0.0 <= beta <= 1.0:
        raise ValueError("beta must lie in [0, 1]")
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    x = np.asarray(x_hat, dtype=np.float64)
    d = np.linalg.norm(stats.means[support] - x, axis=1)
    if np.any(d == 0):
        warnings.warn("tail sample coincides with a support mean; clamping distance")
        d = np.maximum(d, _MIN_DISTANCE)
    w = stats.counts[support] / d
    wn = w / w.sum()
    mean = (1.0 - beta) * x + beta * (wn @ stats.means[support])
    cov = (
        (1.0 - beta) ** 2 * np.asarray(own_cov, dtype=np.float64)
        + beta**2 * np.tensordot(wn, stats.covs[support], axes=1)
        + gamma * np.eye(x.size)
    )
    cov = 0.5 * (cov + cov.T)
    return CalibratedDistribution(mean, cov, source_id, tuple(int(j) for j in support))


@dataclass
class GenerationPlan:
    """How many synthetic features each class receives to reach the target."""

    counts: np.ndarray  # real per-class counts
    target: int
    cap: int | None
    generate: np.ndarray  # per-class synthetic count

    @property
    def total(self) -> int:
        return int(self.generate.sum())


def build_generation_plan(
    counts: np.ndarray, target: int | None = None, cap: int | None = None
) -> GenerationPlan:
    """Fill each class's gap to the target, clipped at the cap.

    Classes at or above the target generate nothing; they participate in
    balanced batches via oversampling of their real pool instead.
    """
    counts = np.asarray(counts, dtype=np.int64)
    if target is None:
        target = int(counts.max())
    if target < 1:
        raise ValueError("target must be positive")
    if cap is not None and cap < 0:
        raise ValueError("cap must be non-negative")
    gap = np.maximum(target - counts, 0)
    if cap is not None:
        gap = np.minimum(gap, cap)
    return GenerationPlan(counts, int(target), cap, gap.astype(np.int64))


@dataclass
class GeneratedBatch:
    """Synthetic features for one class plus their provenance."""

    class_id: int
    features: np.ndarray  # (G, F), clamped at zero
    source_rows: np.ndarray  # (G,) index into the class's real samples
    supports: list[tuple[int, ...]]  # per real row, the support set used
    beta: float


def generate_for_class(
    class_id: int,
    plan: GenerationPlan,
    class_features: np.ndarray,
    stats: ClassStats,
    beta: float,
    gamma: float,
    k_support: int,
    rng: Rng,
) -> GeneratedBatch:
    """Draw the planned number of synthetic features for one class.

    Cycles round-robin over the class's real (transformed) features; each real
    sample is calibrated once and then sampled as many times as the cycle
    assigns it.  Samples are clamped at zero from below, matching the
    non-negative feature space.
    """
    n_gen = int(plan.generate[class_id])
    x = np.asarray(class_features, dtype=np.float64)
    n_real, dim = x.shape
    empty = GeneratedBatch(
        class_id, np.empty((0, dim)), np.empty(0, dtype=np.int64), [], beta
    )
    if n_gen == 0:
        return empty
    eligible = np.flatnonzero(stats.counts > stats.counts[class_id])
    if eligible.size == 0:
        warnings.warn(
            f"class {class_id}: no larger class to borrow from; generating nothing"
        )
        return empty
    k_eff = min(k_support, eligible.size)
    # Distances from every real sample to every eligible class mean.
    d = np.linalg.norm(x[:, None, :] - stats.means[eligible][None, :, :], axis=2)
    if np.any(d == 0):
        warnings.warn("tail sample coincides with a support mean; clamping distance")
        d = np.maximum(d, _MIN_DISTANCE)
    order = np.argsort(d, axis=1, kind="stable")[:, :k_eff]
    sel = eligible[order]  # (n_real, k_eff) class ids
    d_sel = np.take_along_axis(d, order, axis=1)
    w = stats.counts[sel] / d_sel
    wn = w / w.sum(axis=1, keepdims=True)
    cal_mean = (1.0 - beta) * x + beta * np.einsum("nk,nkf->nf", wn, stats.means[sel])
    cal_cov = (
        (1.0 - beta) ** 2 * stats.covs[class_id][None, :, :]
        + beta**2 * np.einsum("nk,nkab->nab", wn, stats.covs[sel])
        + gamma * np.eye(dim)[None, :, :]
    )
    cal_cov = 0.5 * (cal_cov + cal_cov.transpose(0, 2, 1))
    factors, _ = cholesky_psd_batch(cal_cov)
    rows = np.arange(n_gen, dtype=np.int64) % n_real
    u = rng.normals(n_gen * dim).reshape(n_gen, dim)
    draws = cal_mean[rows] + np.einsum("gab,gb->ga", factors[rows], u)
    supports = [tuple(int(j) for j in sel[i]) for i in range(n_real)]
    return GeneratedBatch(class_id, np.maximum(draws, 0.0), rows, supports, beta)


@dataclass(frozen=True)
class BetaState:
    """Per-class calibration confidence, adapted from validation accuracy.

    Confidence rises by one step when a tail class's validation accuracy
    improves, falls by one step when it worsens, and stays put otherwise,
    clamped to [0, 1].  Non-tail classes never move.
    """

    beta: np.ndarray  # (L,) in [0, 1]
    step: float
    tail_mask: np.ndarray  # (L,) bool: which classes adapt
    last_acc: np.ndarray | None = None  # previous per-class validation accuracy

    def __post_init__(self):
        b = np.asarray(self.beta, dtype=np.float64)
        if np.any((b < 0) | (b > 1)):
            raise ValueError("beta values must lie in [0, 1]")
        object.__setattr__(self, "beta", b)

    @classmethod
    def initial(cls, n_classes: int, beta_init: float, step: float, tail_mask: np.ndarray) -> "BetaState":
        return cls(np.full(n_classes, beta_init), step, np.asarray(tail_mask, dtype=bool))


def update_beta(state: BetaState, accuracy: np.ndarray) -> BetaState:
    """One adaptation step from fresh per-class validation accuracies."""
    acc = np.asarray(accuracy, dtype=np.float64)
    if acc.shape != state.beta.shape:
        raise ValueError("one accuracy per class required")
    if np.any((acc < 0) | (acc > 1)):
        raise ValueError("accuracies must lie in [0, 1]")
    if state.last_acc is None:
        return BetaState(state.beta.copy(), state.step, state.tail_mask, acc.copy())
    beta = state.beta.copy()
    up = state.tail_mask & (acc > state.last_acc)
    down = state.tail_mask & (acc < state.last_acc)
    beta[up] = np.minimum(1.0, beta[up] + state.step)
    beta[down] = np.maximum(0.0, beta[down] - state.step)
    return BetaState(beta, state.step, state.tail_mask, acc.copy())


def dump_generated(
    out_dir: str | Path,
    batches: list[GeneratedBatch],
    dim: int,
    n_classes: int,
    basename: str = "generated",
) -> tuple[Path, Path]:
    """Write generated features in the embedding format plus a provenance sidecar."""
    out_dir = Path(out_dir)
    feats = [b.features for b in batches if b.features.size]
    labels = [np.full(len(b.features), b.class_id, dtype=np.int64) for b in batches if b.features.size]
    if feats:
        features = np.concatenate(feats).astype(np.float32)
        labels = np.concatenate(labels)
    else:
        features = np.empty((0, dim), dtype=np.float32)
        labels = np.empty(0, dtype=np.int64)
    emb_path = out_dir / f"{basename}.emb"
    save_embeddings(emb_path, EmbeddingDataset(features, labels, n_classes))
    sidecar = out_dir / f"{basename}_sidecar.tsv"
    with open(sidecar, "w") as fh:
        fh.write("sample_id\tsource_class\tsupport_set\tbeta\n")
        i = 0
        for b in batches:
            for row in b.source_rows:
                sup = ",".join(str(s) for s in b.supports[int(row)])
                fh.write(f"{i}\t{b.class_id}\t{sup}\t{b.beta!r}\n")
                i += 1
    return emb_path, sidecar
