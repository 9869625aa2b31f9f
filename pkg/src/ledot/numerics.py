"""Dense numeric primitives shared by every other module.

All math runs in 64-bit floats regardless of how data is stored on disk;
gradient checks at 1e-4 relative tolerance are not reliable in single
precision.  Randomness flows through :class:`RngState`, a thin wrapper
around numpy's counter-based Philox generator, so that every number an
experiment produces is a pure function of one integer seed.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import DegenerateVectorError, DomainError, InvalidInputError

RNG_ALGORITHM = "philox4x64"


@dataclass
class RngState:
    """Seeded random source with a fixed, named generator.

    Identical seeds reproduce identical sample sequences across runs (and
    across platforms for a fixed numpy version).  A state is single-owner:
    pass it around explicitly, never share one between concurrent
    consumers.  Independent substreams are derived with :meth:`child`.
    """

    seed: int
    algorithm: str = RNG_ALGORITHM
    _gen: np.random.Generator | None = field(default=None, repr=False, compare=False)

    def generator(self) -> np.random.Generator:
        if self.algorithm != RNG_ALGORITHM:
            raise DomainError(f"unknown rng algorithm {self.algorithm!r}")
        if self._gen is None:
            self._gen = np.random.Generator(np.random.Philox(self.seed))
        return self._gen

    def child(self, tag: str) -> "RngState":
        """Derive an independent stream; stable across platforms."""
        digest = hashlib.sha256(f"{self.seed}:{tag}".encode()).digest()
        return RngState(int.from_bytes(digest[:8], "little"))


def as_f64(x, name: str = "input") -> np.ndarray:
    """Upcast to a float64 array, rejecting NaN/Inf."""
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains non-finite entries")
    return arr


def softmax(v, tau: float = 1.0) -> np.ndarray:
    """Temperature softmax with max-subtraction.

    Computed as ``softmax(v / tau)`` so that ``softmax(v, t)`` and
    ``softmax(v / t, 1)`` follow the identical floating-point path.
    """
    if not (np.isfinite(tau) and tau > 0):
        raise DomainError(f"tau must be positive, got {tau}")
    w = as_f64(v, "softmax input") / tau
    w = w - np.max(w, axis=-1, keepdims=True)
    e = np.exp(w)
    return e / np.sum(e, axis=-1, keepdims=True)


def log_softmax(v, tau: float = 1.0) -> np.ndarray:
    if not (np.isfinite(tau) and tau > 0):
        raise DomainError(f"tau must be positive, got {tau}")
    w = as_f64(v, "log_softmax input") / tau
    w = w - np.max(w, axis=-1, keepdims=True)
    return w - np.log(np.sum(np.exp(w), axis=-1, keepdims=True))


def cosine(a, b) -> float:
    """Cosine similarity of two nonzero vectors.

    Zero-norm input raises: a zero embedding is an initialization bug and
    silently returning 0 would mask it.
    """
    av = as_f64(a, "cosine lhs")
    bv = as_f64(b, "cosine rhs")
    na = float(np.linalg.norm(av))
    nb = float(np.linalg.norm(bv))
    if na == 0.0 or nb == 0.0:
        raise DegenerateVectorError("cosine of a zero-norm vector")
    return float(np.dot(av, bv) / (na * nb))


def gaussian_sample(mu, sigma_diag, n: int, rng: RngState) -> np.ndarray:
    """Draw ``n`` samples from a diagonal Gaussian, one row per sample.

    ``sigma_diag`` holds per-dimension variances (not standard
    deviations); zeros are allowed and reproduce ``mu`` exactly.
    """
    mean = as_f64(mu, "mu")
    var = as_f64(sigma_diag, "sigma_diag")
    if mean.shape != var.shape or mean.ndim != 1:
        raise DomainError("mu and sigma_diag must be 1-d vectors of equal length")
    if np.any(var < 0):
        raise DomainError("negative variance")
    z = rng.generator().standard_normal((n, mean.size))
    return mean[None, :] + z * np.sqrt(var)[None, :]


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient oracle: (f(x+h e_i) - f(x-h e_i)) / 2h."""
    if h <= 0:
        raise DomainError("h must be positive")
    x0 = as_f64(x, "x").copy()
    grad = np.empty_like(x0)
    for i in range(x0.size):
        xi = x0[i]
        x0[i] = xi + h
        fp = float(f(x0))
        x0[i] = xi - h
        fm = float(f(x0))
        x0[i] = xi
        grad[i] = (fp - fm) / (2.0 * h)
    return grad


def rel_err(approx, exact) -> float:
    """Max relative error, guarded against tiny denominators."""
    a = np.asarray(approx, dtype=np.float64).ravel()
    e = np.asarray(exact, dtype=np.float64).ravel()
    scale = np.maximum(np.abs(e), 1e-8)
    return float(np.max(np.abs(a - e) / scale)) if a.size else 0.0
