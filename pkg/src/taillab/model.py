"""MLP feature model + linear classifier with analytic backprop and SGD.

The decoupled architecture mirrors what the two-stage pipeline needs: a small
feature extractor whose last layer is ReLU (features are non-negative, so a
fractional power transform downstream is well-defined) and a linear head with
optional per-class scale factors for learnable-weight-scaling mode.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .numerics import Rng

_RELU = "relu"
_NONE = "none"


@dataclass
class DenseLayer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = _RELU


@dataclass
class ModelParams:
    """Feature-model layers plus the linear classifier.

    ``clf_scale`` holds per-class positive scale factors when learnable
    scaling is enabled, else None.  ``feature_power`` is an optional power
    transform applied to the (non-negative) features on the classifier path
    only; stage two sets it when the head was trained in transformed space.
    """

    layers: list[DenseLayer]
    clf_weight: np.ndarray  # (L, F)
    clf_bias: np.ndarray  # (L,)
    clf_scale: np.ndarray | None = None
    feature_power: float | None = None

    @property
    def n_classes(self) -> int:
        return self.clf_weight.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.clf_weight.shape[1]

    @property
    def input_dim(self) -> int:
        return self.layers[0].weight.shape[1]

    def copy(self) -> "ModelParams":
        return ModelParams(
            [DenseLayer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers],
            self.clf_weight.copy(),
            self.clf_bias.copy(),
            None if self.clf_scale is None else self.clf_scale.copy(),
            self.feature_power,
        )

    def feature_bytes(self) -> bytes:
        """Concatenated raw bytes of all feature-model tensors (freeze checks)."""
        return b"".join([l.weight.tobytes() + l.bias.tobytes() for l in self.layers])


@dataclass
class Gradients:
    layers: list[tuple[np.ndarray, np.ndarray]]  # (dW, db) per layer
    clf_weight: np.ndarray
    clf_bias: np.ndarray
    clf_scale: np.ndarray | None = None


def init_params(
    dim: int,
    hidden: tuple[int, ...],
    n_classes: int,
    rng: Rng,
    with_scale: bool = False,
) -> ModelParams:
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) weights, zero biases."""
    layers = []
    fan_in = dim
    for width in hidden:
        a = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-a, a, width * fan_in).reshape(width, fan_in)
        layers.append(DenseLayer(w, np.zeros(width), _RELU))
        fan_in = width
    clf_w, clf_b = init_classifier(fan_in, n_classes, rng)
    scale = np.ones(n_classes) if with_scale else None
    return ModelParams(layers, clf_w, clf_b, scale)


def init_classifier(feature_dim: int, n_classes: int, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
    a = 1.0 / np.sqrt(feature_dim)
    w = rng.uniform(-a, a, n_classes * feature_dim).reshape(n_classes, feature_dim)
    return w, np.zeros(n_classes)


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return x[None, :], True
    return x, False


def features(params: ModelParams, x: np.ndarray) -> np.ndarray:
    """Feature-model output (before any classifier-path power transform)."""
    h, squeeze = _as_batch(x)
    if h.shape[1] != params.input_dim:
        raise ValueError(f"input dim {h.shape[1]} != model dim {params.input_dim}")
    for layer in params.layers:
        h = h @ layer.weight.T + layer.bias
        if layer.activation == _RELU:
            h = np.maximum(h, 0.0)
    return h[0] if squeeze else h


def classifier_logits(params: ModelParams, feats: np.ndarray) -> np.ndarray:
    """Head logits from classifier-space features: scale * (W f) + b."""
    f, squeeze = _as_batch(feats)
    u = f @ params.clf_weight.T
    if params.clf_scale is not None:
        u = u * params.clf_scale
    z = u + params.clf_bias
    return z[0] if squeeze else z


def forward(params: ModelParams, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Full pass: returns (features, logits).

    The returned features are the raw feature-model output; ``feature_power``
    (when set) is applied on the classifier path only.
    """
    f = features(params, x)
    g = f if params.feature_power is None else np.power(f, params.feature_power)
    return f, classifier_logits(params, g)


@dataclass
class ForwardCache:
    x: np.ndarray
    pre: list[np.ndarray]  # pre-activation per layer
    post: list[np.ndarray]  # post-activation per layer
    logits: np.ndarray


def forward_cached(params: ModelParams, x: np.ndarray) -> ForwardCache:
    if params.feature_power is not None:
        raise ValueError("full backprop is only supported without a feature power transform")
    h, _ = _as_batch(x)
    x0 = h
    pre, post = [], []
    for layer in params.layers:
        p = h @ layer.weight.T + layer.bias
        h = np.maximum(p, 0.0) if layer.activation == _RELU else p
        pre.append(p)
        post.append(h)
    return ForwardCache(x0, pre, post, classifier_logits(params, h))


def backward(params: ModelParams, cache: ForwardCache, grad_logits: np.ndarray) -> Gradients:
    """Gradients of sum_b <grad_logits[b], logits[b]> w.r.t. every parameter."""
    g = np.asarray(grad_logits, dtype=np.float64)
    if g.ndim == 1:
        g = g[None, :]
    if g.shape != cache.logits.shape:
        raise ValueError(f"grad shape {g.shape} != logits shape {cache.logits.shape}")
    f = cache.post[-1] if params.layers else cache.x
    u = f @ params.clf_weight.T
    if params.clf_scale is not None:
        d_scale = np.sum(g * u, axis=0)
        du = g * params.clf_scale
    else:
        d_scale = None
        du = g
    d_clf_w = du.T @ f
    d_clf_b = np.sum(g, axis=0)
    dh = du @ params.clf_weight
    layer_grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(params.layers)
    for i in range(len(params.layers) - 1, -1, -1):
        layer = params.layers[i]
        dp = dh * (cache.pre[i] > 0) if layer.activation == _RELU else dh
        below = cache.post[i - 1] if i > 0 else cache.x
        layer_grads[i] = (dp.T @ below, np.sum(dp, axis=0))
        if i > 0:
            dh = dp @ layer.weight
    return Gradients(layer_grads, d_clf_w, d_clf_b, d_scale)


def classifier_backward(
    params: ModelParams, feats: np.ndarray, grad_logits: np.ndarray
) -> Gradients:
    """Head-only gradients given classifier-space features (stage two)."""
    f, _ = _as_batch(feats)
    g = np.asarray(grad_logits, dtype=np.float64)
    if g.ndim == 1:
        g = g[None, :]
    u = f @ params.clf_weight.T
    if params.clf_scale is not None:
        d_scale = np.sum(g * u, axis=0)
        du = g * params.clf_scale
    else:
        d_scale = None
        du = g
    return Gradients([], du.T @ f, np.sum(g, axis=0), d_scale)


class OptState:
    """SGD-with-momentum state: one velocity buffer per parameter tensor."""

    def __init__(self, tensors: list[np.ndarray], momentum: float = 0.9, weight_decay: float = 0.0):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocities = [np.zeros_like(t) for t in tensors]


def _param_tensors(params: ModelParams, trainable: str) -> list[np.ndarray]:
    if trainable == "all":
        tensors = []
        for layer in params.layers:
            tensors.extend([layer.weight, layer.bias])
    elif trainable == "classifier":
        tensors = []
    else:
        raise ValueError(f"unknown trainable selection {trainable!r}")
    tensors.extend([params.clf_weight, params.clf_bias])
    if params.clf_scale is not None:
        tensors.append(params.clf_scale)
    return tensors


def _grad_tensors(grads: Gradients) -> list[np.ndarray]:
    tensors = []
    for dw, db in grads.layers:
        tensors.extend([dw, db])
    tensors.extend([grads.clf_weight, grads.clf_bias])
    if grads.clf_scale is not None:
        tensors.append(grads.clf_scale)
    return tensors


def make_opt_state(
    params: ModelParams, momentum: float, weight_decay: float, trainable: str = "all"
) -> OptState:
    return OptState(_param_tensors(params, trainable), momentum, weight_decay)


def sgd_step(params_tensors: list[np.ndarray], opt: OptState, grads: list[np.ndarray], lr: float) -> None:
    """v <- mu v + g + wd p;  p <- p - lr v  (in place, coupled weight decay)."""
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    if len(params_tensors) != len(grads):
        raise ValueError("parameter/gradient structure mismatch")
    for p, v, g in zip(params_tensors, opt.velocities, grads):
        if not np.all(np.isfinite(g)):
            raise ValueError("non-finite gradient")
        v *= opt.momentum
        v += g
        if opt.weight_decay:
            v += opt.weight_decay * p
        p -= lr * v


def apply_sgd(params: ModelParams, opt: OptState, grads: Gradients, lr: float, trainable: str = "all") -> None:
    sgd_step(_param_tensors(params, trainable), opt, _grad_tensors(grads), lr)


def cosine_lr(t: float, t_max: int, eta_max: float, eta_min: float = 0.0) -> float:
    """Cosine annealing from eta_max at t=0 to eta_min at t=t_max."""
    if t_max <= 0:
        raise ValueError("t_max must be positive")
    if not 0 <= t <= t_max:
        raise ValueError(f"epoch {t} outside [0, {t_max}]")
    return eta_min + 0.5 * (eta_max - eta_min) * (1.0 + np.cos(np.pi * t / t_max))


# --- checkpoint container (versioned, bit-exact round trip) ---

_CKPT_MAGIC = b"MDL1"
_CKPT_VERSION = 1
_ACT_CODE = {_NONE: 0, _RELU: 1}
_ACT_NAME = {v: k for k, v in _ACT_CODE.items()}


def save_checkpoint(path: str | Path, params: ModelParams) -> None:
    chunks = [_CKPT_MAGIC, struct.pack("<II", _CKPT_VERSION, len(params.layers))]
    for layer in params.layers:
        out_dim, in_dim = layer.weight.shape
        chunks.append(struct.pack("<BII", _ACT_CODE[layer.activation], out_dim, in_dim))
        chunks.append(np.ascontiguousarray(layer.weight, dtype="<f8").tobytes())
        chunks.append(np.ascontiguousarray(layer.bias, dtype="<f8").tobytes())
    n_cls, feat = params.clf_weight.shape
    chunks.append(struct.pack("<II", n_cls, feat))
    chunks.append(np.ascontiguousarray(params.clf_weight, dtype="<f8").tobytes())
    chunks.append(np.ascontiguousarray(params.clf_bias, dtype="<f8").tobytes())
    if params.clf_scale is not None:
        chunks.append(struct.pack("<B", 1))
        chunks.append(np.ascontiguousarray(params.clf_scale, dtype="<f8").tobytes())
    else:
        chunks.append(struct.pack("<B", 0))
    if params.feature_power is not None:
        chunks.append(struct.pack("<Bd", 1, params.feature_power))
    else:
        chunks.append(struct.pack("<B", 0))
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, blob: bytes, path: Path):
        self.blob = blob
        self.path = path
        self.offset = 0

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.blob):
            raise CheckpointError(f"{self.path}: truncated at byte {self.offset}")
        out = self.blob[self.offset : self.offset + n]
        self.offset += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, shape: tuple[int, ...]) -> np.ndarray:
        n = int(np.prod(shape))
        return np.frombuffer(self.take(8 * n), dtype="<f8").reshape(shape).copy()


def load_checkpoint(path: str | Path) -> ModelParams:
    path = Path(path)
    r = _Reader(path.read_bytes(), path)
    if r.take(4) != _CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a model checkpoint (bad magic)")
    version, n_layers = r.unpack("<II")
    if version != _CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    layers = []
    for _ in range(n_layers):
        act, out_dim, in_dim = r.unpack("<BII")
        if act not in _ACT_NAME:
            raise CheckpointError(f"{path}: unknown activation code {act}")
        w = r.array((out_dim, in_dim))
        b = r.array((out_dim,))
        layers.append(DenseLayer(w, b, _ACT_NAME[act]))
    n_cls, feat = r.unpack("<II")
    clf_w = r.array((n_cls, feat))
    clf_b = r.array((n_cls,))
    (has_scale,) = r.unpack("<B")
    scale = r.array((n_cls,)) if has_scale else None
    (has_power,) = r.unpack("<B")
    power = r.unpack("<d")[0] if has_power else None
    if r.offset != len(r.blob):
        raise CheckpointError(f"{path}: trailing bytes at {r.offset}")
    params = ModelParams(layers, clf_w, clf_b, scale, power)
    if layers:
        chain_ok = all(
            layers[i].weight.shape[0] == layers[i + 1].weight.shape[1]
            for i in range(len(layers) - 1)
        ) and layers[-1].weight.shape[0] == feat
        if not chain_ok:
            raise CheckpointError(f"{path}: layer dimensions do not chain")
    return params
