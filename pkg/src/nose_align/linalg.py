"""Dense vector math, stable reductions, and a portable seeded RNG.

All public operations work on float64 numpy arrays (matrices are row-major
2-D arrays) even though the on-disk interchange format is float32; the extra
precision is what lets finite-difference gradient checks resolve 1e-4
relative error.

Conventions used everywhere else in the package:

* cosine of a near-zero vector (norm < 1e-12) is 0, not an error;
* row-wise reductions subtract the row max before exponentiating.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import NumericError

DEGENERATE_NORM = 1e-12

_U64 = (1 << 64) - 1


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _U64


class Rng:
    """xoshiro256** stream seeded through splitmix64.

    The 64-bit integer stream is bit-identical for a given seed on every
    platform. Floating-point draws (uniform, normal) are deterministic for a
    fixed platform; they additionally depend on the platform's libm rounding
    of log/cos/sin, which is identical in practice on IEEE-754 systems.

    Normal variates are produced with Box-Muller in pairs (two uniforms per
    pair); an odd-length request discards the second variate of its final
    pair, so the stream position depends only on the number of pairs drawn.
    """

    def __init__(self, seed: int):
        self.seed = seed & _U64
        s = self.seed
        state = []
        for _ in range(4):
            s = (s + 0x9E3779B97F4A7C15) & _U64
            z = s
            z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _U64
            z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _U64
            state.append(z ^ (z >> 31))
        self._s = state

    def next_u64(self) -> int:
        s = self._s
        result = (_rotl((s[1] * 5) & _U64, 7) * 9) & _U64
        t = (s[1] << 17) & _U64
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = _rotl(s[3], 45)
        return result

    def uniform(self) -> float:
        """One draw from [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * 2.0**-53

    def _uniform_pos(self) -> float:
        # (0, 1]; safe as a log argument.
        return ((self.next_u64() >> 11) + 1) * 2.0**-53

    def randbelow(self, n: int) -> int:
        """Unbiased integer in [0, n) via top-bits rejection."""
        if n <= 0:
            raise ValueError(f"randbelow needs n >= 1, got {n}")
        k = (n - 1).bit_length()
        if k == 0:
            return 0
        while True:
            r = self.next_u64() >> (64 - k)
            if r < n:
                return r

    def shuffle(self, seq: list) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(seq) - 1, 0, -1):
            j = self.randbelow(i + 1)
            seq[i], seq[j] = seq[j], seq[i]

    def sample_indices(self, n: int, k: int) -> list[int]:
        """k distinct indices from range(n), order randomized."""
        if k > n:
            raise ValueError(f"cannot sample {k} of {n} without replacement")
        pool = list(range(n))
        for i in range(k):
            j = i + self.randbelow(n - i)
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:k]

    def normal(self, n: int, sigma: float = 1.0) -> np.ndarray:
        """n i.i.d. draws from N(0, sigma^2) via Box-Muller."""
        if n < 1:
            raise ValueError(f"need n >= 1, got {n}")
        if sigma <= 0:
            raise ValueError(f"need sigma > 0, got {sigma}")
        out = np.empty(n, dtype=np.float64)
        for i in range(0, n, 2):
            u1 = self._uniform_pos()
            u2 = self.uniform()
            r = math.sqrt(-2.0 * math.log(u1))
            theta = 2.0 * math.pi * u2
            out[i] = r * math.cos(theta)
            if i + 1 < n:
                out[i + 1] = r * math.sin(theta)
        return out * sigma

    def normal_matrix(self, rows: int, cols: int, sigma: float = 1.0) -> np.ndarray:
        return self.normal(rows * cols, sigma).reshape(rows, cols)


def gaussian_sample(rng: Rng, n: int, sigma: float) -> np.ndarray:
    """n i.i.d. N(0, sigma^2) draws; deterministic given the rng state."""
    return rng.normal(n, sigma)


def check_finite(name: str, arr: np.ndarray) -> np.ndarray:
    """Raise NumericError if arr contains NaN/Inf."""
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {name}")
    return arr


def as_matrix(x) -> np.ndarray:
    """Coerce to a float64 2-D array without copying when possible."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {a.shape}")
    return a


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between two vectors, in [-1, 1].

    Either vector with norm < 1e-12 yields 0 by convention.
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise ValueError("empty vectors")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na < DEGENERATE_NORM or nb < DEGENERATE_NORM:
        return 0.0
    return float(np.clip(float(a @ b) / (na * nb), -1.0, 1.0))


def normalize_rows(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rows scaled to unit norm; degenerate rows become zero rows.

    Returns (normalized, norms); norms keeps the raw row norms so callers can
    run the backward pass of the normalization.
    """
    x = as_matrix(x)
    norms = np.linalg.norm(x, axis=1)
    safe = np.where(norms < DEGENERATE_NORM, 1.0, norms)
    out = x / safe[:, None]
    out[norms < DEGENERATE_NORM] = 0.0
    return out, norms


def normalize_rows_backward(grad_out: np.ndarray, x_normed: np.ndarray,
                            norms: np.ndarray) -> np.ndarray:
    """Gradient of normalize_rows: project out the radial component."""
    radial = np.sum(grad_out * x_normed, axis=1, keepdims=True)
    safe = np.where(norms < DEGENERATE_NORM, 1.0, norms)
    dx = (grad_out - radial * x_normed) / safe[:, None]
    dx[norms < DEGENERATE_NORM] = 0.0
    return dx


def pairwise_similarity(a, b) -> np.ndarray:
    """n x m matrix of cosine similarities between rows of a and rows of b."""
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    an, _ = normalize_rows(a)
    bn, _ = normalize_rows(b)
    sims = np.clip(an @ bn.T, -1.0, 1.0)
    return check_finite("pairwise_similarity", sims)


def log_softmax_row(x, temperature: float = 1.0) -> np.ndarray:
    """log softmax(x / temperature), computed with max subtraction."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.size == 0:
        raise ValueError("empty vector")
    if temperature <= 0:
        raise ValueError(f"need temperature > 0, got {temperature}")
    z = x / temperature
    z = z - z.max()
    return z - math.log(float(np.exp(z).sum()))


def log_softmax_rows(s: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Row-wise log_softmax_row over a matrix."""
    s = as_matrix(s)
    if temperature <= 0:
        raise ValueError(f"need temperature > 0, got {temperature}")
    z = s / temperature
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))
