"""Dense float32 tensor primitives and a portable seeded RNG.

Storage is float32 throughout (matching the F32 container format); matmul and
reductions accumulate in float64 and round once at the end so results are
reproducible across implementations.  Elementwise ops (add, scaling) are plain
single-rounded float32 so that algebraically equal compositions stay
bit-identical.  All operations are pure: inputs are never mutated.
"""

from __future__ import annotations

import math

import numpy as np

F32 = np.float32

_MASK64 = (1 << 64) - 1
_SPLITMIX_GAMMA = 0x9E3779B97F4A7C15
_XORSHIFT_MULT = 0x2545F4914F6CDD1D
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible; message names both shapes."""


def _splitmix64(x: int) -> int:
    x = (x + _SPLITMIX_GAMMA) & _MASK64
    z = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def derive_seed(seed: int, *tokens: object) -> int:
    """Derive an independent 64-bit stream seed from a base seed and tokens.

    Each token is rendered with str(), folded with FNV-1a (offset
    0xCBF29CE484222325, prime 0x100000001B3), and mixed into the running
    value with the splitmix64 finalizer.  Deterministic and portable.
    """
    h = seed & _MASK64
    for tok in tokens:
        acc = _FNV_OFFSET
        for byte in str(tok).encode("utf-8"):
            acc = ((acc ^ byte) * _FNV_PRIME) & _MASK64
        h = _splitmix64(h ^ acc)
    return h


class Rng:
    """xorshift64* generator (shifts 12/25/27, multiplier 0x2545F4914F6CDD1D).

    The seed is passed through splitmix64 once so that small consecutive seeds
    give unrelated streams and state 0 (the xorshift fixed point) is avoided.
    uniform() yields 53-bit doubles in [0, 1); gaussian() is Box-Muller and
    consumes exactly two uniforms per draw, so streams are reproducible.
    """

    def __init__(self, seed: int):
        state = _splitmix64(seed & _MASK64)
        if state == 0:
            state = _SPLITMIX_GAMMA
        self._state = state

    def next_u64(self) -> int:
        x = self._state
        x ^= x >> 12
        x = (x ^ (x << 25)) & _MASK64
        x ^= x >> 27
        self._state = x
        return (x * _XORSHIFT_MULT) & _MASK64

    def uniform(self) -> float:
        return (self.next_u64() >> 11) * (2.0 ** -53)

    def gaussian(self) -> float:
        u1 = 1.0 - self.uniform()  # (0, 1]: keeps log() finite
        u2 = self.uniform()
        return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)

    def uniform_array(self, shape: tuple[int, ...], lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
        n = int(np.prod(shape)) if shape else 1
        vals = [lo + (hi - lo) * self.uniform() for _ in range(n)]
        return np.array(vals, dtype=np.float64).reshape(shape).astype(F32)

    def gaussian_array(self, shape: tuple[int, ...], mu: float = 0.0, sigma: float = 1.0) -> np.ndarray:
        n = int(np.prod(shape)) if shape else 1
        vals = [mu + sigma * self.gaussian() for _ in range(n)]
        return np.array(vals, dtype=np.float64).reshape(shape).astype(F32)

    def choice(self, n: int) -> int:
        """Uniform integer in [0, n) by rejection (no modulo bias)."""
        if n <= 0:
            raise ValueError(f"choice() needs n >= 1, got {n}")
        limit = (_MASK64 + 1) - ((_MASK64 + 1) % n)
        while True:
            x = self.next_u64()
            if x < limit:
                return x % n


def as_f32(x) -> np.ndarray:
    return np.asarray(x, dtype=F32)


def zeros(shape: tuple[int, ...]) -> np.ndarray:
    return np.zeros(shape, dtype=F32)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix/vector product with float64 accumulation, rounded to float32.

    Accepts 2-D x 2-D, 2-D x 1-D, and 1-D x 2-D operand shapes.
    """
    a = as_f32(a)
    b = as_f32(b)
    a_inner = a.shape[-1]
    b_inner = b.shape[0]
    if a_inner != b_inner:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = a.astype(np.float64) @ b.astype(np.float64)
    return out.astype(F32)


def col_scale(m: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Scale column j of w by m[j] (single-rounded float32 products)."""
    m = as_f32(m)
    w = as_f32(w)
    if m.ndim != 1 or w.ndim != 2 or m.shape[0] != w.shape[1]:
        raise ShapeError(f"col_scale needs (n,) against (m, n): {m.shape} vs {w.shape}")
    return w * m[np.newaxis, :]


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise sum; shapes must match or b may be a (k,) bias for (n, k) a."""
    a = as_f32(a)
    b = as_f32(b)
    if a.shape != b.shape:
        bias_ok = a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]
        if not bias_ok:
            raise ShapeError(f"add shapes differ: {a.shape} vs {b.shape}")
    return a + b


def scale(c: float, a: np.ndarray) -> np.ndarray:
    return as_f32(a) * F32(c)


def relu(a: np.ndarray) -> np.ndarray:
    return np.maximum(as_f32(a), F32(0.0))


def softmax(v: np.ndarray) -> np.ndarray:
    """Stable softmax of a 1-D vector (float64 internally, float32 out)."""
    v = as_f32(v)
    if v.ndim != 1:
        raise ShapeError(f"softmax expects a vector, got {v.shape}")
    x = v.astype(np.float64)
    x = x - x.max()
    e = np.exp(x)
    return (e / e.sum()).astype(F32)


def dot(x: np.ndarray, y: np.ndarray) -> float:
    """Sum-product of two same-shape arrays, accumulated in float64."""
    x = as_f32(x)
    y = as_f32(y)
    if x.shape != y.shape:
        raise ShapeError(f"dot shapes differ: {x.shape} vs {y.shape}")
    return float(np.sum(x.astype(np.float64) * y.astype(np.float64)))


def absdot(x: np.ndarray, y: np.ndarray) -> float:
    return abs(dot(x, y))


def l2_norm(x: np.ndarray) -> float:
    """Euclidean norm of the flattened array (float64 accumulation)."""
    x = as_f32(x).astype(np.float64)
    return float(math.sqrt(np.sum(x * x)))
