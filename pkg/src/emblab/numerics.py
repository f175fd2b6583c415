"""Dense linear algebra helpers, seeded randomness, stable softmax math,
the Adam optimizer, and a central-finite-difference gradient checker.

Everything computes in 64-bit floats. The random generator is fully
deterministic: the same seed reproduces the same draws bit for bit on any
platform, which every experiment in this package relies on.
"""

from __future__ import annotations

import math
from typing import Callable, Dict, Tuple

import numpy as np

__all__ = [
    "Rng",
    "matmul",
    "logsumexp",
    "log_softmax",
    "cosine",
    "exact_mean",
    "grad_check",
    "Adam",
]

# splitmix64 constants (Steele et al.), used both for seeding and for
# deriving child seeds.
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_MASK = 0xFFFFFFFFFFFFFFFF

# Number of interleaved xoshiro lanes. Keeping many lanes lets a draw of n
# values advance all lane states with a handful of vectorized uint64 ops
# instead of n Python-level steps. The lane count is part of the stream
# definition and must never change.
_LANES = 1024


def _splitmix64_stream(seed: int, n: int) -> np.ndarray:
    """First n outputs of splitmix64 started at ``seed``, as uint64."""
    steps = np.arange(1, n + 1, dtype=np.uint64)
    z = np.uint64(seed & _MASK) + steps * np.uint64(_GOLDEN)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
    return z ^ (z >> np.uint64(31))


def _mix64(x: int) -> int:
    """Scalar splitmix64 finalizer for deriving child seeds."""
    z = (x + _GOLDEN) & _MASK
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK
    return z ^ (z >> 31)


def _rotl(x: np.ndarray, k: int) -> np.ndarray:
    return (x << np.uint64(k)) | (x >> np.uint64(64 - k))


class Rng:
    """xoshiro256++ generator, splitmix64-seeded.

    State is ``_LANES`` parallel xoshiro256++ streams whose 256-bit states
    are filled from one splitmix64 run over the seed. Outputs interleave
    the lanes in fixed order, so the produced sequence is a pure function
    of the seed.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK
        words = _splitmix64_stream(self.seed, 4 * _LANES)
        # lane j gets words [4j, 4j+1, 4j+2, 4j+3] as s0..s3
        self._s = words.reshape(_LANES, 4).T.copy()

    def _next_block(self) -> np.ndarray:
        """Advance every lane once; returns _LANES uint64 outputs."""
        s = self._s
        out = _rotl(s[0] + s[3], 23) + s[0]
        t = s[1] << np.uint64(17)
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = _rotl(s[3], 45)
        return out

    def u64(self, n: int) -> np.ndarray:
        """n raw uint64 draws."""
        if n < 0:
            raise ValueError("draw count must be non-negative")
        blocks = -(-n // _LANES)
        if blocks == 0:
            return np.empty(0, dtype=np.uint64)
        out = np.concatenate([self._next_block() for _ in range(blocks)])
        return out[:n]

    def uniform(self, n: int) -> np.ndarray:
        """n doubles uniform on [0, 1), 53-bit resolution."""
        return (self.u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def normal(self, n: int) -> np.ndarray:
        """n standard normal draws via Box-Muller."""
        m = -(-n // 2)
        # u1 in (0, 1] so the log is finite
        u1 = ((self.u64(m) >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53
        u2 = self.uniform(m)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * math.pi * u2
        out = np.empty(2 * m, dtype=np.float64)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        return out[:n]

    def integers(self, low: int, high: int, n: int) -> np.ndarray:
        """n ints uniform on [low, high)."""
        if high <= low:
            raise ValueError("integers() needs high > low")
        span = high - low
        draws = np.floor(self.uniform(n) * span).astype(np.int64)
        return low + np.minimum(draws, span - 1)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")

    def choice(self, n: int, k: int) -> np.ndarray:
        """k distinct indices from range(n)."""
        if k > n:
            raise ValueError("cannot choose more items than available")
        return self.permutation(n)[:k]

    def spawn(self, tag: int) -> "Rng":
        """Independent child generator derived from (seed, tag)."""
        return Rng(_mix64(self.seed ^ _mix64(tag & _MASK)))


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with explicit shape validation."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul needs 2-d operands, got {a.ndim}-d and {b.ndim}-d")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def logsumexp(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Shift-stable log(sum(exp(x))) along ``axis``."""
    x = np.asarray(x, dtype=np.float64)
    m = np.max(x, axis=axis, keepdims=True)
    out = m.squeeze(axis) + np.log(np.sum(np.exp(x - m), axis=axis))
    return out


def log_softmax(v: np.ndarray, axis: int = -1) -> np.ndarray:
    """log of the softmax of v, computed with max-subtraction."""
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ValueError("log_softmax input must be finite")
    m = np.max(v, axis=axis, keepdims=True)
    shifted = v - m
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def exact_mean(x: np.ndarray) -> float:
    """Mean via centered summation.

    Summing deviations from the first element keeps the mean of a constant
    array exact (the deviations are all zero) and reduces cancellation error
    in general.
    """
    arr = np.asarray(x, dtype=np.float64).ravel()
    if arr.size == 0:
        raise ValueError("mean of empty array")
    anchor = float(arr[0])
    return anchor + float(np.sum(arr - anchor)) / arr.size


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    """Cosine similarity of two vectors, in [-1, 1]."""
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise ValueError(f"vector lengths differ: {u.shape[0]} vs {v.shape[0]}")
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        raise ValueError("cosine undefined for zero-norm input")
    return float(np.clip(float(u @ v) / (nu * nv), -1.0, 1.0))


GradFn = Callable[[Dict[str, np.ndarray]], Tuple[float, Dict[str, np.ndarray]]]


def grad_check(f: GradFn, params: Dict[str, np.ndarray], h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f(params)`` must return ``(loss, grads)``. A parameter absent from
    ``grads`` is taken to have zero gradient (the finite differences still
    verify that). Relative error per component is
    ``|analytic - fd| / max(1, |analytic|)``.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    base_loss, grads = f(params)
    if not math.isfinite(base_loss):
        raise ValueError("loss is not finite at the given parameters")
    worst = 0.0
    for name, value in params.items():
        analytic = np.asarray(
            grads.get(name, np.zeros_like(value)), dtype=np.float64
        )
        flat = value.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up, _ = f(params)
            flat[i] = orig - h
            down, _ = f(params)
            flat[i] = orig
            if not (math.isfinite(up) and math.isfinite(down)):
                raise ValueError(f"loss not finite while probing {name}[{i}]")
            fd = (up - down) / (2.0 * h)
            a = analytic.reshape(-1)[i]
            err = abs(a - fd) / max(1.0, abs(a))
            if err > worst:
                worst = err
    return worst


class Adam:
    """Adam with bias correction (beta1=0.9, beta2=0.999, eps=1e-8)."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m: Dict[str, np.ndarray] = {}
        self._v: Dict[str, np.ndarray] = {}

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> None:
        """Update ``params`` in place from ``grads`` (same keys)."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, g in grads.items():
            if name not in self._m:
                self._m[name] = np.zeros_like(params[name])
                self._v[name] = np.zeros_like(params[name])
            m = self._m[name]
            v = self._v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * np.square(g)
            params[name] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
