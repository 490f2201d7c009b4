"""Deterministic numeric primitives: seeded RNG, softmax, cosine similarity.

Conventions used across the package:

* Dense numeric data is carried by ``numpy.ndarray``. Persistent arrays
  (images, latents, model parameters) are stored as 32-bit floats;
  reductions (sums, dot products) are accumulated in 64-bit.
* All randomness flows through :class:`SeededRng`, a counter-based
  generator built on the SplitMix64 finalizer. The bit stream is a pure
  function of (seed, counter), so identical seeds reproduce identical
  draws on every platform and numpy version.
"""

from __future__ import annotations

import numpy as np
from scipy.special import betaincinv

__all__ = [
    "NonFiniteError",
    "SeededRng",
    "cosine_similarity",
    "gaussian",
    "require_finite",
    "softmax",
]


class NonFiniteError(ArithmeticError):
    """A tensor contained NaN or Inf where finite values are required."""


def require_finite(name: str, arr: np.ndarray) -> np.ndarray:
    """Raise :class:`NonFiniteError` unless every element of ``arr`` is finite."""
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{name} contains non-finite values")
    return arr


# SplitMix64 constants (Steele, Lea & Flood 2014). The generator output for
# counter i is splitmix_finalize(seed + (i+1) * GOLDEN), all mod 2^64.
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX_A = np.uint64(0xBF58476D1CE4E5B9)
_MIX_B = np.uint64(0x94D049BB133111EB)
_U64_MASK = (1 << 64) - 1


def _mix64(x: np.ndarray) -> np.ndarray:
    """SplitMix64 finalizer, vectorized over a uint64 array (wrapping mod 2^64)."""
    with np.errstate(over="ignore"):
        z = x.copy()
        z ^= z >> np.uint64(30)
        z *= _MIX_A
        z ^= z >> np.uint64(27)
        z *= _MIX_B
        z ^= z >> np.uint64(31)
    return z


def _mix64_int(x: int) -> int:
    return int(_mix64(np.array([x & _U64_MASK], dtype=np.uint64))[0])


class SeededRng:
    """Counter-based deterministic RNG (SplitMix64 stream).

    The raw stream is ``mix(seed + (counter+i) * GOLDEN)`` for i = 1, 2, ...;
    every derived quantity (uniforms, normals via Box-Muller, integers,
    Beta draws via the inverse regularized incomplete beta function) consumes
    a documented number of raw words, so sequences are bit-exact across
    platforms. Instances are single-owner mutable state; use :meth:`spawn`
    to derive independent child streams for parallel work.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _U64_MASK
        self._counter = 0

    def __repr__(self) -> str:
        return f"SeededRng(seed={self.seed}, counter={self._counter})"

    def spawn(self, *keys: int) -> "SeededRng":
        """Derive an independent child stream from integer keys.

        Pure in (seed, keys): spawning never consumes from this stream and
        the same keys always yield the same child. Distinct key tuples give
        (statistically) independent streams.
        """
        h = self.seed
        for k in keys:
            h = _mix64_int((h + int(_GOLDEN)) ^ _mix64_int(int(k)))
        return SeededRng(h)

    def raw_u64(self, n: int) -> np.ndarray:
        """Next ``n`` raw 64-bit words of the stream."""
        n = int(n)
        if n < 0:
            raise ValueError("n must be non-negative")
        start = (self._counter + 1) & _U64_MASK
        idx = np.arange(n, dtype=np.uint64) + np.uint64(start)
        self._counter += n
        with np.errstate(over="ignore"):
            x = np.uint64(self.seed) + idx * _GOLDEN
        return _mix64(x)

    def uniform(self, n: int) -> np.ndarray:
        """``n`` float64 uniforms in [0, 1), one raw word each (53-bit mantissa)."""
        return (self.raw_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def _uniform_open_closed(self, n: int) -> np.ndarray:
        """Uniforms in (0, 1], safe as log arguments."""
        return ((self.raw_u64(n) >> np.uint64(11)) + np.uint64(1)).astype(
            np.float64
        ) * 2.0**-53

    def normal(self, shape) -> np.ndarray:
        """i.i.d. standard normal draws via Box-Muller, returned as float32.

        Consumes 2 * ceil(size/2) raw words: a block of (0,1] uniforms for the
        radius, then a block of [0,1) uniforms for the angle.
        """
        shape = (shape,) if isinstance(shape, int) else tuple(int(s) for s in shape)
        size = int(np.prod(shape)) if shape else 1
        pairs = (size + 1) // 2
        if pairs == 0:
            return np.zeros(shape, dtype=np.float32)
        u1 = self._uniform_open_closed(pairs)
        u2 = self.uniform(pairs)
        r = np.sqrt(-2.0 * np.log(u1))
        ang = 2.0 * np.pi * u2
        z = np.concatenate([r * np.cos(ang), r * np.sin(ang)])[:size]
        return z.reshape(shape).astype(np.float32)

    def integers(self, high: int, n: int | None = None, low: int = 0):
        """Integers uniform in [low, high); modulo reduction of raw words.

        The modulo bias is bounded by span / 2^64 and is negligible for the
        span sizes used here (< 2^32).
        """
        span = int(high) - int(low)
        if span <= 0:
            raise ValueError("high must exceed low")
        raw = self.raw_u64(1 if n is None else n) % np.uint64(span)
        out = raw.astype(np.int64) + low
        return int(out[0]) if n is None else out

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of arange(n); consumes n-1 raw words for n > 1."""
        perm = np.arange(n, dtype=np.int64)
        if n > 1:
            draws = self.raw_u64(n - 1)
            for i in range(n - 1, 0, -1):
                j = int(draws[n - 1 - i] % np.uint64(i + 1))
                perm[i], perm[j] = perm[j], perm[i]
        return perm

    def beta_symmetric(self, alpha: float, n: int | None = None):
        """Beta(alpha, alpha) draws by inverse-CDF on one uniform each."""
        if alpha <= 0:
            raise ValueError("alpha must be positive")
        u = self.uniform(1 if n is None else n)
        vals = betaincinv(alpha, alpha, u)
        return float(vals[0]) if n is None else vals


def gaussian(rng: SeededRng, shape) -> np.ndarray:
    """Standard-normal tensor of the given shape, advancing ``rng``."""
    return rng.normal(shape)


def softmax(logits) -> np.ndarray:
    """Numerically stable softmax (max-subtraction), float64 accumulation.

    Raises ValueError on empty input; output entries lie in (0, 1] and sum
    to 1 within 1e-6.
    """
    x = np.asarray(logits, dtype=np.float64).ravel()
    if x.size == 0:
        raise ValueError("softmax requires a non-empty logit vector")
    require_finite("logits", x)
    e = np.exp(x - x.max())
    return e / e.sum()


def cosine_similarity(u, v) -> float:
    """Cosine of the angle between two equal-length vectors.

    Zero-norm inputs yield 0.0 (the neutral contribution for cumulative
    similarity scores) rather than an error.
    """
    a = np.asarray(u, dtype=np.float64).ravel()
    b = np.asarray(v, dtype=np.float64).ravel()
    if a.size != b.size:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    if a.size == 0:
        raise ValueError("vectors must have at least one dimension")
    require_finite("u", a)
    require_finite("v", b)
    na = np.sqrt(a @ a)
    nb = np.sqrt(b @ b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float((a @ b) / (na * nb))
