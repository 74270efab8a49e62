"""Loss functions and the adjustment-strength schedule.

Every loss returns per-sample values and per-sample gradients with respect to
the logits; trainers reduce to a batch mean themselves.  Inputs may be a
single logit vector (L,) or a batch (B, L).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import log_softmax, softmax

FORMS = ("convex", "linear", "concave")


@dataclass(frozen=True)
class ScheduleSpec:
    """Parameters of the gradually increasing adjustment strength.

    All three forms share the endpoints alpha(0) = 0 and
    alpha(t_max) = scale * (curvature - 1) and are non-decreasing in between.
    """

    scale: float = 1.0  # s
    curvature: float = 2.0  # c
    form: str = "convex"
    t_max: int = 1

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError("scale must be positive")
        if self.curvature <= 1:
            raise ValueError("curvature must exceed 1")
        if self.form not in FORMS:
            raise ValueError(f"form must be one of {FORMS}")
        if self.t_max < 1:
            raise ValueError("t_max must be at least 1")

    @property
    def terminal(self) -> float:
        return self.scale * (self.curvature - 1.0)


def alpha_at(spec: ScheduleSpec, t: float) -> float:
    """Adjustment strength at epoch t of spec.t_max."""
    if not 0 <= t <= spec.t_max:
        raise ValueError(f"epoch {t} outside [0, {spec.t_max}]")
    frac = t / spec.t_max
    s, c = spec.scale, spec.curvature
    if spec.form == "convex":
        return s * (c**frac - 1.0)
    if spec.form == "linear":
        return s * (c - 1.0) * frac
    # concave: log-shaped curve with the same endpoints
    return s * (c - 1.0) * np.log1p((c - 1.0) * frac) / np.log(c)


@dataclass(frozen=True)
class LossConfig:
    """Shared ingredients for prior-adjusted and distillation losses."""

    priors: np.ndarray  # (L,) label distribution, sums to 1
    tau: float = 1.0  # fixed adjustment for the logit-adjust baseline
    kd_temperature: float = 2.0
    head_classes: tuple[int, ...] = ()  # classes whose samples get distilled

    def __post_init__(self):
        p = np.asarray(self.priors, dtype=np.float64)
        if abs(p.sum() - 1.0) > 1e-9:
            raise ValueError("priors must sum to 1")
        if self.kd_temperature <= 0:
            raise ValueError("temperature must be positive")
        object.__setattr__(self, "priors", p)


def _check_labels(logits: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray, bool]:
    z = np.asarray(logits, dtype=np.float64)
    squeeze = z.ndim == 1
    if squeeze:
        z = z[None, :]
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if y.shape != (z.shape[0],):
        raise ValueError("one label per logit row required")
    if y.size and (y.min() < 0 or y.max() >= z.shape[1]):
        raise ValueError("label out of range")
    return z, y, squeeze


def cross_entropy(logits: np.ndarray, labels) -> tuple[np.ndarray, np.ndarray]:
    """Softmax cross-entropy; grad = softmax(z) - onehot(y)."""
    z, y, squeeze = _check_labels(logits, labels)
    logp = log_softmax(z)
    rows = np.arange(z.shape[0])
    loss = -logp[rows, y]
    grad = np.exp(logp)
    grad[rows, y] -= 1.0
    if squeeze:
        return loss[0], grad[0]
    return loss, grad


def gra_loss(
    logits: np.ndarray, labels, priors: np.ndarray, alpha: float
) -> tuple[np.ndarray, np.ndarray]:
    """Prior-adjusted cross-entropy with strength alpha.

    Loss = CE(z + alpha * log p, y); the gradient w.r.t. z is
    softmax(z + alpha log p) - onehot(y).  A constant offset cannot change a
    softmax, so alpha = 0 and uniform priors take the plain cross-entropy
    path exactly (bit-for-bit).
    """
    p = np.asarray(priors, dtype=np.float64)
    if np.any(p <= 0):
        raise ValueError("priors must be strictly positive")
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    if alpha == 0:
        return cross_entropy(logits, labels)
    offset = alpha * np.log(p)
    if np.ptp(offset) == 0.0:
        return cross_entropy(logits, labels)
    z, y, squeeze = _check_labels(logits, labels)
    if p.shape != (z.shape[1],):
        raise ValueError("one prior per class required")
    loss, grad = cross_entropy(z + offset, y)
    if squeeze:
        return loss[0], grad[0]
    return loss, grad


def logit_adjusted_loss(
    logits: np.ndarray, labels, priors: np.ndarray, tau: float
) -> tuple[np.ndarray, np.ndarray]:
    """Fixed-strength prior adjustment: the tau-offset baseline."""
    return gra_loss(logits, labels, priors, tau)


def kd_loss(
    student_logits: np.ndarray, teacher_logits: np.ndarray, temperature: float = 2.0
) -> tuple[np.ndarray, np.ndarray]:
    """Temperature-scaled distillation: T^2 KL(teacher || student).

    Gradient w.r.t. the student is T (softmax(student/T) - softmax(teacher/T)).
    Zero iff the two softened distributions coincide.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    zs = np.asarray(student_logits, dtype=np.float64)
    zt = np.asarray(teacher_logits, dtype=np.float64)
    if zs.shape != zt.shape:
        raise ValueError(f"student shape {zs.shape} != teacher shape {zt.shape}")
    squeeze = zs.ndim == 1
    if squeeze:
        zs, zt = zs[None, :], zt[None, :]
    t = float(temperature)
    log_ps = log_softmax(zs / t)
    log_pt = log_softmax(zt / t)
    pt = np.exp(log_pt)
    loss = t * t * np.sum(pt * (log_pt - log_ps), axis=-1)
    grad = t * (np.exp(log_ps) - pt)
    if squeeze:
        return loss[0], grad[0]
    return loss, grad


def stage2_loss(
    logits: np.ndarray,
    labels,
    teacher_logits: np.ndarray,
    alpha: float,
    head_mask,
    temperature: float = 2.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Classifier-stage composite: CE plus distillation on head-class samples.

    Per sample: CE(z, y) + alpha * 1[head] * KD(z, teacher).  Teacher logits
    are only consulted where the mask is set.
    """
    z, y, squeeze = _check_labels(logits, labels)
    mask = np.atleast_1d(np.asarray(head_mask, dtype=bool))
    if mask.shape != (z.shape[0],):
        raise ValueError("one head flag per sample required")
    loss, grad = cross_entropy(z, y)
    if alpha != 0.0 and mask.any():
        zt = np.asarray(teacher_logits, dtype=np.float64)
        if zt.ndim == 1:
            zt = zt[None, :]
        if zt.shape != z.shape:
            raise ValueError("teacher logits must match student logits in shape")
        if not np.all(np.isfinite(zt[mask])):
            raise ValueError("teacher logits required for every head-masked sample")
        kd_l, kd_g = kd_loss(z[mask], zt[mask], temperature)
        loss[mask] += alpha * kd_l
        grad[mask] += alpha * kd_g
    if squeeze:
        return loss[0], grad[0]
    return loss, grad
