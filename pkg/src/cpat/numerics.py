"""Seeded randomness, probability sampling, and numerical checking utilities.

All floating point is double precision. Randomness flows through RngStream,
a splittable counter-based PRNG wrapper: every stream is identified by a
root seed plus a path of split labels, so any pipeline stage can be rerun
in isolation and reproduce its draws bit-exactly.
"""

from __future__ import annotations

import hashlib
from typing import Callable

import numpy as np

PROB_TOL = 1e-12


class RngStream:
    """Deterministic random stream keyed by (root seed, split lineage).

    The generator is Philox (counter-based, 128-bit key derived via SHA-256
    of the seed/lineage path). Splitting never consumes parent state: a
    child depends only on the parent's lineage and the label, so streams
    for different pipeline stages are independent and order-insensitive.
    """

    __slots__ = ("seed", "lineage", "_gen")

    def __init__(self, seed: int, lineage: tuple[str, ...] = ()):
        if not isinstance(seed, (int, np.integer)):
            raise TypeError(f"seed must be an integer, got {type(seed).__name__}")
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.lineage = tuple(lineage)
        key = _derive_key(self.seed, self.lineage)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def split(self, label: str) -> "RngStream":
        """Child stream for `label`; parent state is untouched."""
        if not isinstance(label, str) or label == "":
            raise ValueError("split label must be a non-empty string")
        return RngStream(self.seed, self.lineage + (label,))

    def child_seed(self, label: str) -> int:
        """A 63-bit integer seed derived from a child stream (for handoff
        to components that take plain integer seeds)."""
        return int(self.split(label)._gen.integers(0, 2**63, dtype=np.int64))

    # Raw draw primitives. Consuming draws advances the stream state.
    def normal(self, size=None) -> np.ndarray:
        return self._gen.standard_normal(size)

    def uniform(self, size=None) -> np.ndarray:
        return self._gen.random(size)

    def standard_gamma(self, shape_param: float, size=None) -> np.ndarray:
        return self._gen.standard_gamma(shape_param, size)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, lineage={list(self.lineage)})"


def _derive_key(seed: int, lineage: tuple[str, ...]) -> int:
    h = hashlib.sha256()
    h.update(seed.to_bytes(8, "little"))
    for label in lineage:
        raw = label.encode("utf-8")
        h.update(len(raw).to_bytes(4, "little"))
        h.update(raw)
    return int.from_bytes(h.digest()[:16], "little")


def rng_new(seed: int) -> RngStream:
    """Root stream for a 64-bit seed (seed 0 is fine)."""
    return RngStream(seed)


def rng_split(rng: RngStream, label: str) -> RngStream:
    return rng.split(label)


def gaussian_vector(rng: RngStream, n: int) -> np.ndarray:
    """n i.i.d. standard normal entries."""
    if n < 1:
        raise ValueError(f"gaussian_vector needs n >= 1, got {n}")
    return rng.normal(n)


def dirichlet_row(rng: RngStream, concentration: float, m: int) -> np.ndarray:
    """Symmetric Dirichlet(concentration) draw on the m-simplex.

    Sampled as m independent Gamma(concentration, 1) variates normalized by
    their sum; the result sums to 1 within floating-point rounding.
    """
    if concentration <= 0:
        raise ValueError(f"concentration must be > 0, got {concentration}")
    if m < 2:
        raise ValueError(f"dirichlet_row needs m >= 2, got {m}")
    g = rng.standard_gamma(concentration, m)
    s = g.sum()
    while s == 0.0:  # astronomically unlikely underflow guard
        g = rng.standard_gamma(concentration, m)
        s = g.sum()
    p = g / s
    check_prob_vector(p)
    return p


def categorical_sample(rng: RngStream, probs: np.ndarray) -> int:
    """One draw from a categorical distribution given by a probability vector."""
    probs = np.asarray(probs, dtype=np.float64)
    check_prob_vector(probs)
    u = rng.uniform()
    idx = int(np.searchsorted(np.cumsum(probs), u, side="right"))
    return min(idx, probs.shape[0] - 1)


def categorical_rows(prob_rows: np.ndarray, uniforms: np.ndarray) -> np.ndarray:
    """Vectorized inverse-CDF sampling: one index per row of `prob_rows`.

    `uniforms` supplies the u ~ U[0,1) draws so the caller controls the
    draw order; rows must each sum to ~1.
    """
    cum = np.cumsum(prob_rows, axis=1)
    idx = (uniforms[:, None] >= cum).sum(axis=1)
    return np.minimum(idx, prob_rows.shape[1] - 1)


def check_prob_vector(p: np.ndarray, tol: float = PROB_TOL) -> None:
    """Raise unless p is a probability vector (entries >= 0, sums to 1 within tol)."""
    p = np.asarray(p)
    if p.ndim != 1:
        raise ValueError(f"probability vector must be 1-D, got shape {p.shape}")
    if np.any(p < 0):
        raise ValueError("probability vector has negative entries")
    s = p.sum()
    if not np.isfinite(s) or abs(s - 1.0) > tol:
        raise ValueError(f"probability vector sums to {s!r}, expected 1 within {tol}")


def check_transition_matrix(m: np.ndarray, tol: float = 1e-9) -> None:
    """Raise unless every row of m is a probability vector within tol."""
    m = np.asarray(m)
    if m.ndim != 2:
        raise ValueError(f"transition matrix must be 2-D, got shape {m.shape}")
    if np.any(m < 0):
        raise ValueError("transition matrix has negative entries")
    sums = m.sum(axis=1)
    bad = np.flatnonzero(np.abs(sums - 1.0) > tol)
    if bad.size:
        raise ValueError(f"rows {bad[:5].tolist()} sum to {sums[bad[:5]].tolist()}, expected 1 within {tol}")


def softmax(logits: np.ndarray) -> np.ndarray:
    """Numerically stable softmax of a single logit vector."""
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 1:
        raise ValueError(f"softmax expects a vector, got shape {z.shape}")
    if not np.all(np.isfinite(z)):
        raise ValueError("softmax: logits contain NaN or Inf")
    e = np.exp(z - z.max())
    return e / e.sum()


def log_softmax(logits: np.ndarray) -> np.ndarray:
    """log(softmax(logits)) computed via max-subtraction (safe at extreme logits)."""
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValueError("log_softmax: logits contain NaN or Inf")
    shifted = z - z.max()
    return shifted - np.log(np.exp(shifted).sum())


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    """Row-wise stable softmax; hot path, no validation."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def grad_check(
    f: Callable[[np.ndarray], tuple[float, np.ndarray]],
    x: np.ndarray,
    eps: float,
) -> float:
    """Max relative error between f's analytic gradient and central differences.

    f maps a flat parameter vector to (value, gradient). The error at
    coordinate i is |analytic_i - central_i| / max(1, |central_i|); the
    maximum over coordinates is returned.
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    x = np.asarray(x, dtype=np.float64)
    value, analytic = f(x)
    analytic = np.asarray(analytic, dtype=np.float64)
    if not np.isfinite(value) or not np.all(np.isfinite(analytic)):
        raise FloatingPointError("grad_check: f returned non-finite value or gradient")
    if analytic.shape != x.shape:
        raise ValueError(f"gradient shape {analytic.shape} != parameter shape {x.shape}")
    worst = 0.0
    for i in range(x.size):
        xp = x.copy()
        xp[i] += eps
        xm = x.copy()
        xm[i] -= eps
        fp = f(xp)[0]
        fm = f(xm)[0]
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"grad_check: non-finite f at coordinate {i}")
        central = (fp - fm) / (2.0 * eps)
        err = abs(analytic[i] - central) / max(1.0, abs(central))
        if err > worst:
            worst = err
    return worst
