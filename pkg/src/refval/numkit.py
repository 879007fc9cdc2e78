"""Dense float64 vector helpers and splittable, deterministic RNG streams.

Everything here is 64-bit and bit-reproducible: the same inputs (and the
same RngState) give the same outputs on every platform. Randomness comes
from counter-based Philox keyed by (seed, stream), so independent parts of
an experiment (batch sampler, corruption injector, pool draw, ...) can each
own a stream derived from one master seed without ever sharing state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, NumericError, ParameterError

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def _mix64(x: int) -> int:
    """splitmix64 finalizer; full-period bijection on 64-bit ints."""
    x &= _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


@dataclass(frozen=True)
class RngState:
    """Value-type RNG state: a 64-bit seed plus a 64-bit stream id.

    States are immutable; `derive(key)` spawns a statistically independent
    sub-stream, and `generator()` builds a fresh numpy Generator, so calling
    an operation twice with the same state repeats its draws exactly.
    """

    seed: int
    stream: int = 0

    def derive(self, key: int) -> "RngState":
        new_stream = _mix64((self.stream + _GOLDEN) ^ _mix64(key + 1))
        return RngState(self.seed & _MASK64, new_stream)

    def generator(self) -> np.random.Generator:
        key = np.array([self.seed & _MASK64, self.stream & _MASK64], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))


def as_vector(x) -> np.ndarray:
    """Coerce to a 1-D float64 array (copies only if needed)."""
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        v = v.reshape(-1)
    return v


def axpy(alpha: float, x, y) -> np.ndarray:
    """Return alpha*x + y elementwise."""
    xv, yv = as_vector(x), as_vector(y)
    if xv.shape[0] != yv.shape[0]:
        raise DimensionError(f"axpy length mismatch: {xv.shape[0]} vs {yv.shape[0]}")
    return alpha * xv + yv


def norm2(x) -> float:
    """Euclidean norm; raises on empty or non-finite input."""
    v = as_vector(x)
    if v.size == 0:
        raise DimensionError("norm2 of an empty vector")
    if not np.all(np.isfinite(v)):
        raise NumericError("norm2 input contains NaN/Inf")
    return float(np.sqrt(np.dot(v, v)))


def gaussian_draw(rng: RngState, n: int, sigma: float) -> np.ndarray:
    """n i.i.d. N(0, sigma^2) draws, deterministic in rng.

    Uses Box-Muller on Philox uniforms rather than the generator's native
    ziggurat sampler so the draw sequence is pinned down by this module
    alone (same doubles everywhere, independent of numpy's sampler choice).
    """
    if n <= 0:
        raise ParameterError(f"gaussian_draw needs n > 0, got {n}")
    if sigma < 0:
        raise ParameterError(f"gaussian_draw needs sigma >= 0, got {sigma}")
    g = rng.generator()
    m = (n + 1) // 2
    u1 = g.random(m)
    u2 = g.random(m)
    # u1 in [0,1) so 1-u1 in (0,1]: log1p(-u1) is finite, radius >= 0
    r = np.sqrt(-2.0 * np.log1p(-u1))
    z = np.empty(2 * m, dtype=np.float64)
    z[0::2] = r * np.cos(2.0 * np.pi * u2)
    z[1::2] = r * np.sin(2.0 * np.pi * u2)
    return sigma * z[:n]
