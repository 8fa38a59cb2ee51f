"""Floating-point kernel: deterministic RNG and finite-difference primitives.

Everything downstream (gradient checks, Hessian-trace oracles, Monte-Carlo
estimators) is built on the two ingredients in this module:

* :class:`Rng` -- a counter-based Philox generator behind numpy's
  ``SeedSequence`` spawning machinery.  Identical seeds give identical
  streams on every platform, and ``child(...)`` derives independent
  sub-streams from hashable path components, so per-trial / per-example
  streams never overlap.
* central finite differences at fixed step sizes (1e-5 for first
  derivatives, 1e-4 for second differences), which balance truncation
  against rounding error in 64-bit arithmetic.

All arrays are float64 throughout the package.
"""

from __future__ import annotations

import numpy as np

# Default steps: h**2 truncation vs eps/h rounding cross over near these
# values for float64 and O(1) function values.
GRAD_STEP = 1e-5
HESS_STEP = 1e-4

# ReLU pre-activations closer to zero than this make central differences
# meaningless (the kink sits inside the stencil); oracle callers reject or
# resample such points.
SMOOTH_TOL = 1e-3


class OracleError(RuntimeError):
    """A finite-difference oracle hit a non-finite evaluation."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class Rng:
    """Deterministic, splittable random stream.

    Wraps ``numpy.random.Generator`` over the Philox counter-based bit
    generator.  Sub-streams are derived with :meth:`child`, which feeds the
    path through ``SeedSequence`` spawn keys; distinct paths give
    statistically independent streams with period far beyond 2**32 draws.
    """

    def __init__(self, seed: int, _seq: np.random.SeedSequence | None = None):
        self.seed = int(seed)
        self._seq = _seq if _seq is not None else np.random.SeedSequence(self.seed)
        self._gen = np.random.Generator(np.random.Philox(self._seq))

    def child(self, *path) -> "Rng":
        """Independent sub-stream addressed by a tuple of ints/strings."""
        key = tuple(_path_component(p) for p in path)
        seq = np.random.SeedSequence(entropy=self._seq.entropy,
                                     spawn_key=self._seq.spawn_key + key)
        return Rng(self.seed, _seq=seq)

    # thin pass-throughs
    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


def _path_component(p) -> int:
    if isinstance(p, (int, np.integer)):
        if p < 0:
            raise ValueError("rng path components must be non-negative")
        return int(p)
    if isinstance(p, str):
        # stable 32-bit hash, platform independent
        h = 2166136261
        for b in p.encode("utf-8"):
            h = ((h ^ b) * 16777619) & 0xFFFFFFFF
        return h
    raise TypeError(f"unsupported rng path component: {p!r}")


def rademacher_vector(n: int, rng: Rng) -> np.ndarray:
    """Vector of n entries drawn +/-1 with equal probability."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return rng.integers(0, 2, size=n).astype(np.float64) * 2.0 - 1.0


def finite_diff_gradient(f, w: np.ndarray, h: float = GRAD_STEP) -> np.ndarray:
    """Central-difference gradient of a scalar function of a weight vector.

    Entry i is ``(f(w + h e_i) - f(w - h e_i)) / (2h)``.  Exact to rounding
    on polynomials of degree <= 2.  Raises :class:`OracleError` with the
    offending index if an evaluation comes back non-finite.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    w = np.asarray(w, dtype=np.float64)
    grad = np.empty_like(w)
    for i in range(w.size):
        wp = w.copy()
        wm = w.copy()
        wp[i] += h
        wm[i] -= h
        fp = f(wp)
        fm = f(wm)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise OracleError(f"non-finite evaluation at index {i}", index=i)
        grad[i] = (fp - fm) / (2.0 * h)
    return grad


def finite_diff_hessian_diag(grad, w: np.ndarray, h: float = HESS_STEP) -> np.ndarray:
    """Hessian diagonal from central differences of an analytic gradient.

    Entry i is ``(grad(w + h e_i)_i - grad(w - h e_i)_i) / (2h)``; the sum
    of the result is the Hessian-trace oracle used throughout the package.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    w = np.asarray(w, dtype=np.float64)
    diag = np.empty_like(w)
    for i in range(w.size):
        wp = w.copy()
        wm = w.copy()
        wp[i] += h
        wm[i] -= h
        gp = grad(wp)
        gm = grad(wm)
        if not (np.isfinite(gp[i]) and np.isfinite(gm[i])):
            raise OracleError(f"non-finite gradient at index {i}", index=i)
        diag[i] = (gp[i] - gm[i]) / (2.0 * h)
    return diag


def assert_all_finite(arr: np.ndarray, what: str = "array") -> np.ndarray:
    """Raise OracleError unless every entry of arr is finite."""
    arr = np.asarray(arr)
    if not np.all(np.isfinite(arr)):
        bad = int(np.flatnonzero(~np.isfinite(arr.ravel()))[0])
        raise OracleError(f"non-finite value in {what} at flat index {bad}", index=bad)
    return arr
