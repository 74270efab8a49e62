"""Dense linear-algebra helpers, a counter-based RNG, and Gaussian sampling.

Everything downstream (dataset synthesis, training, feature generation)
draws its randomness from :class:`Rng`, a counter-based generator built on
the splitmix64 finalizer.  The stream is a pure function of (seed, position),
so identical seeds give bit-identical streams on every platform and child
streams can be split off without touching the parent.
"""

from __future__ import annotations

import numpy as np

from .errors import NotPositiveSemidefiniteError

# splitmix64 increment and finalizer constants (Steele et al.).
_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX_A = np.uint64(0xBF58476D1CE4E5B9)
_MIX_B = np.uint64(0x94D049BB133111EB)
# Distinct odd constant so spawned child seeds are decoupled from the
# parent's output stream.
_SPAWN = np.uint64(0xD2B74407B1CE6E93)

_U64_MASK = (1 << 64) - 1
_INV_2_53 = float(2.0**-53)


def _mix(z: np.ndarray) -> np.ndarray:
    """splitmix64 finalizer on uint64 values (vectorized, wrapping)."""
    with np.errstate(over="ignore"):
        z = z ^ (z >> np.uint64(30))
        z = z * _MIX_A
        z = z ^ (z >> np.uint64(27))
        z = z * _MIX_B
        return z ^ (z >> np.uint64(31))


class Rng:
    """Deterministic counter-based random stream.

    Output i of a generator with seed ``s`` is ``mix(s + (i+1) * gamma)``,
    i.e. splitmix64 indexed by position.  Blocks of any size can therefore
    be produced vectorized without changing the stream.  A generator is
    single-owner: split per-worker streams with :meth:`spawn` instead of
    sharing one.
    """

    def __init__(self, seed: int):
        self._seed = np.uint64(int(seed) & _U64_MASK)
        self._pos = 0

    @property
    def seed(self) -> int:
        return int(self._seed)

    def spawn(self, key: int) -> "Rng":
        """Derive an independent child generator from (seed, key)."""
        with np.errstate(over="ignore"):
            k = np.uint64((int(key) + 1) & _U64_MASK) * _SPAWN
        child = _mix(self._seed ^ _mix(k))
        return Rng(int(child))

    def _next_u64(self, n: int) -> np.ndarray:
        idx = np.arange(self._pos + 1, self._pos + n + 1, dtype=np.uint64)
        self._pos += n
        with np.errstate(over="ignore"):
            return _mix(self._seed + idx * _GAMMA)

    def uniforms(self, n: int) -> np.ndarray:
        """n doubles uniform on [0, 1), from the top 53 bits of each word."""
        if n == 0:
            return np.empty(0)
        return (self._next_u64(n) >> np.uint64(11)).astype(np.float64) * _INV_2_53

    def uniform(self, low: float, high: float, n: int) -> np.ndarray:
        return low + (high - low) * self.uniforms(n)

    def normals(self, n: int) -> np.ndarray:
        """n standard normals via Box-Muller.

        Consumes 2*ceil(n/2) uniforms, pair-interleaved, so normals(a) followed
        by normals(b) equals normals(a+b) whenever a is even.
        """
        if n == 0:
            return np.empty(0)
        m = (n + 1) // 2
        u = self.uniforms(2 * m)
        r = np.sqrt(-2.0 * np.log1p(-u[0::2]))
        theta = (2.0 * np.pi) * u[1::2]
        out = np.empty(2 * m)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        return out[:n]

    def integers(self, high: int, n: int) -> np.ndarray:
        """n integers uniform on [0, high)."""
        if high <= 0:
            raise ValueError("high must be positive")
        return np.floor(self.uniforms(n) * high).astype(np.int64)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniforms(n), kind="stable")


def softmax(logits: np.ndarray) -> np.ndarray:
    """Probabilities along the last axis; shift-invariant (max subtracted)."""
    z = np.asarray(logits, dtype=np.float64)
    if z.shape[-1] == 0:
        raise ValueError("softmax of an empty logit vector")
    if not np.all(np.isfinite(z)):
        raise ValueError("softmax requires finite logits")
    e = np.exp(z - np.max(z, axis=-1, keepdims=True))
    return e / np.sum(e, axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    if z.shape[-1] == 0:
        raise ValueError("log_softmax of an empty logit vector")
    shifted = z - np.max(z, axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


#: Escalating diagonal jitter tried when a covariance is numerically singular.
JITTER_LADDER = (1e-10, 1e-8, 1e-6, 1e-4)


def cholesky_psd(m: np.ndarray, symmetry_tol: float = 1e-9) -> tuple[np.ndarray, float]:
    """Lower-triangular factor of a symmetric PSD matrix.

    Returns ``(L, jitter)`` with ``L @ L.T`` reconstructing ``m + jitter * I``.
    A plain factorization is attempted first; on failure the jitter ladder
    escalates.  The all-zero matrix factors exactly to zero (degenerate
    distributions stay degenerate).

    Raises :class:`NotPositiveSemidefiniteError` if the largest jitter still
    fails.
    """
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix entries must be finite")
    if np.max(np.abs(a - a.T), initial=0.0) > symmetry_tol:
        raise ValueError(f"matrix is not symmetric within {symmetry_tol}")
    if not a.any():
        return np.zeros_like(a), 0.0
    a = 0.5 * (a + a.T)
    try:
        return np.linalg.cholesky(a), 0.0
    except np.linalg.LinAlgError:
        pass
    eye = np.eye(a.shape[0])
    for eps in JITTER_LADDER:
        try:
            return np.linalg.cholesky(a + eps * eye), eps
        except np.linalg.LinAlgError:
            continue
    raise NotPositiveSemidefiniteError(
        f"matrix is not positive semidefinite (jitter up to {JITTER_LADDER[-1]} failed)"
    )


def cholesky_psd_batch(mats: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Factor a stack of covariances, falling back per-matrix on failure.

    The fast path factors the whole (n, d, d) stack in one LAPACK call; if any
    matrix is singular the slow path applies :func:`cholesky_psd` (and its
    jitter ladder) matrix by matrix.
    """
    mats = np.asarray(mats, dtype=np.float64)
    n = mats.shape[0]
    try:
        return np.linalg.cholesky(mats), np.zeros(n)
    except np.linalg.LinAlgError:
        factors = np.empty_like(mats)
        jitters = np.empty(n)
        for i in range(n):
            factors[i], jitters[i] = cholesky_psd(mats[i])
        return factors, jitters


def gaussian_sample(mean: np.ndarray, chol_factor: np.ndarray, rng: Rng) -> np.ndarray:
    """One draw from N(mean, L L^T): mean + L u with u standard normal."""
    mean = np.asarray(mean, dtype=np.float64)
    chol = np.asarray(chol_factor, dtype=np.float64)
    if mean.ndim != 1 or chol.shape != (mean.size, mean.size):
        raise ValueError(
            f"dimension mismatch: mean {mean.shape}, factor {chol.shape}"
        )
    return mean + chol @ rng.normals(mean.size)
