"""Small numeric kernel shared by every other module.

Everything here is float64.  Reductions go through numpy with a fixed
operand order, so a re-run on the same machine is bit-identical.
"""

from __future__ import annotations

import numpy as np
from scipy import special

__all__ = [
    "Rng",
    "normal_cdf",
    "normal_pdf",
    "dot",
    "axpy",
    "matvec",
    "mean_reduce",
    "as_vec",
]

_INV_SQRT_2PI = 0.3989422804014327


def normal_cdf(z):
    """Standard normal CDF; scalar in, float out, array in, array out."""
    out = special.ndtr(np.asarray(z, dtype=np.float64))
    return float(out) if np.ndim(out) == 0 else out


def normal_pdf(z):
    z = np.asarray(z, dtype=np.float64)
    out = _INV_SQRT_2PI * np.exp(-0.5 * z * z)
    return float(out) if np.ndim(out) == 0 else out


def as_vec(v) -> np.ndarray:
    a = np.ascontiguousarray(v, dtype=np.float64)
    if a.ndim != 1:
        raise ValueError(f"expected a 1-d vector, got shape {a.shape}")
    return a


def _check_len(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"{what}: dimension mismatch {a.shape[0]} vs {b.shape[0]}")


def dot(a, b) -> float:
    a, b = as_vec(a), as_vec(b)
    _check_len(a, b, "dot")
    return float(a @ b)


def axpy(alpha: float, x, y) -> np.ndarray:
    """Return ``alpha * x + y`` as a new vector."""
    x, y = as_vec(x), as_vec(y)
    _check_len(x, y, "axpy")
    return alpha * x + y


def matvec(m, v) -> np.ndarray:
    m = np.ascontiguousarray(m, dtype=np.float64)
    v = as_vec(v)
    if m.ndim != 2 or m.shape[1] != v.shape[0]:
        raise ValueError(f"matvec: matrix {m.shape} incompatible with vector ({v.shape[0]},)")
    return m @ v


def mean_reduce(v) -> float:
    v = as_vec(v)
    if v.shape[0] == 0:
        raise ValueError("mean_reduce: empty vector")
    return float(np.sum(v) / v.shape[0])


class Rng:
    """Seeded random stream derived from ``(master_seed, stream_id)``.

    Equal pairs give identical sequences.  Sub-streams are derived with
    :meth:`child`, so a worker keyed by ``(round, client)`` never shares
    state with another one.
    """

    def __init__(self, master_seed: int, stream_id: int | tuple[int, ...] = 0):
        key = (stream_id,) if isinstance(stream_id, int) else tuple(stream_id)
        if any(k < 0 for k in key) or master_seed < 0:
            raise ValueError("seed and stream ids must be non-negative")
        self.master_seed = int(master_seed)
        self.stream_id = tuple(int(k) for k in key)
        seq = np.random.SeedSequence(entropy=self.master_seed, spawn_key=self.stream_id)
        self.generator = np.random.Generator(np.random.PCG64(seq))

    def child(self, *keys: int) -> "Rng":
        return Rng(self.master_seed, self.stream_id + tuple(keys))

    def __repr__(self) -> str:
        return f"Rng(master_seed={self.master_seed}, stream_id={self.stream_id})"

    # thin pass-throughs used across the package
    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def random(self, size=None):
        return self.generator.random(size)

    def permutation(self, n):
        return self.generator.permutation(n)

    def beta(self, a, b, size=None):
        return self.generator.beta(a, b, size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)
