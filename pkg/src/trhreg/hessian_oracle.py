"""Ground-truth Hessian traces: exact finite-difference diagonals,
stochastic Rademacher-probe estimation, and eigenvalue summary statistics.

Two independent routes are kept deliberately separate from the closed
forms in :mod:`trhreg.trh` and :mod:`trhreg.layer_traces`:

* ``exact_trace`` sums central differences of an analytic gradient over a
  parameter subset -- the cross-validation oracle for every closed-form
  trace in the package;
* ``hutchinson_trace`` / ``hutchinson_trace_sq`` average Rademacher
  quadratic forms ``v^T H v`` and curvature norms ``||H v||^2``, unbiased
  for Tr(H) and Tr(H^2) respectively.  For a diagonal Hessian a single
  probe is already exact since the probe entries square to one.

Eigenvalue mean/std follow from (Tr H, Tr H^2, n) without materializing any
Hessian.  Quadratic forms use second differences of objective values at a
wider step (second differences are noisier than first), Hessian-vector
products use central differences of gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import trh as trh_module
from .network import (MlpNetwork, flat_index_slices, gradient_vector, lift,
                      unflatten_weights)
from .numerics import HESS_STEP, OracleError, Rng, rademacher_vector

QUAD_STEP = 1e-3  # second differences of values need a wider stencil


def hessian_diag_subset(grad_fn, w0: np.ndarray, indices, h: float = HESS_STEP) -> np.ndarray:
    """Central differences of grad entries over a parameter subset."""
    w0 = np.asarray(w0, dtype=np.float64)
    indices = np.asarray(indices, dtype=np.int64)
    out = np.empty(indices.size)
    for j, i in enumerate(indices):
        wp = w0.copy()
        wm = w0.copy()
        wp[i] += h
        wm[i] -= h
        gp = grad_fn(wp)
        gm = grad_fn(wm)
        if not (np.isfinite(gp[i]) and np.isfinite(gm[i])):
            raise OracleError(f"non-finite gradient at index {int(i)}", index=int(i))
        out[j] = (gp[i] - gm[i]) / (2.0 * h)
    return out


def exact_trace(grad_fn, w0: np.ndarray, indices=None, h: float = HESS_STEP) -> float:
    """Sum of finite-difference second derivatives over a parameter subset.

    `indices` selects the diagonal entries (default: all).  Intended for
    desk-scale subsets; cost is two gradient evaluations per entry.
    """
    w0 = np.asarray(w0, dtype=np.float64)
    if indices is None:
        indices = np.arange(w0.size)
    return float(hessian_diag_subset(grad_fn, w0, indices, h=h).sum())


# -- stochastic estimators ---------------------------------------------


def _mean_se(samples: np.ndarray):
    mean = float(np.mean(samples))
    if samples.size < 2:
        return mean, 0.0
    return mean, float(np.std(samples, ddof=1) / np.sqrt(samples.size))


def hutchinson_trace(quad_form, dim: int, probes: int, rng: Rng,
                     indices=None):
    """Rademacher estimate of Tr(H) from a quadratic form v -> v^T H v.

    Returns ``(estimate, standard_error)``.  With `indices` given, probes
    are supported on that subset only, estimating the trace of the
    corresponding diagonal block.
    """
    if probes < 1:
        raise ValueError("probes must be >= 1")
    vals = np.empty(probes)
    for p in range(probes):
        v = _probe(dim, rng, indices)
        vals[p] = quad_form(v)
    return _mean_se(vals)


def hutchinson_trace_sq(hvp, dim: int, probes: int, rng: Rng, indices=None):
    """Rademacher estimate of Tr(H^2) from a Hessian-vector product.

    Averages ``||H v||^2``; with `indices`, probes and products are
    restricted to the subset, estimating Tr(B^2) for the diagonal block B.
    """
    if probes < 1:
        raise ValueError("probes must be >= 1")
    vals = np.empty(probes)
    for p in range(probes):
        v = _probe(dim, rng, indices)
        hv = hvp(v)
        if indices is not None:
            hv = hv[indices]
        vals[p] = float(np.dot(hv, hv))
    return _mean_se(vals)


def _probe(dim: int, rng: Rng, indices) -> np.ndarray:
    if indices is None:
        return rademacher_vector(dim, rng)
    v = np.zeros(dim)
    v[np.asarray(indices, dtype=np.int64)] = rademacher_vector(len(indices), rng)
    return v


def quad_form_from_values(value_fn, w0: np.ndarray, h: float = QUAD_STEP):
    """v -> v^T H v via the second central difference of objective values.

    The stencil displaces every weight by +/- h at once, so ReLU
    pre-activations need margins comfortably above ``h`` times the typical
    activation scale or kink crossings bleed into the measurement; callers
    comparing against per-coordinate oracles should filter inputs
    accordingly.
    """
    w0 = np.asarray(w0, dtype=np.float64)
    f0 = value_fn(w0)

    def quad(v):
        fp = value_fn(w0 + h * v)
        fm = value_fn(w0 - h * v)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise OracleError("non-finite value in quadratic form")
        return (fp - 2.0 * f0 + fm) / (h * h)

    return quad


def hvp_from_grad(grad_fn, w0: np.ndarray, h: float = HESS_STEP):
    """v -> H v via the central difference of analytic gradients."""
    w0 = np.asarray(w0, dtype=np.float64)

    def hvp(v):
        return (grad_fn(w0 + h * v) - grad_fn(w0 - h * v)) / (2.0 * h)

    return hvp


def eigen_stats(trace: float, trace_sq: float, n: int):
    """Eigenvalue mean and standard deviation from Tr(H) and Tr(H^2)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    mean = trace / n
    var = trace_sq / n - mean * mean
    return mean, float(np.sqrt(max(0.0, var)))


@dataclass
class LayerHessianReport:
    layer: int  # 0 denotes the whole network
    trace: float
    trace_sq: float
    eig_mean: float
    eig_std: float
    param_count: int

    @classmethod
    def from_traces(cls, layer, trace, trace_sq, n):
        mean, std = eigen_stats(trace, trace_sq, n)
        return cls(layer=layer, trace=trace, trace_sq=trace_sq,
                   eig_mean=mean, eig_std=std, param_count=n)


# -- objective plumbing over the flat weight vector ---------------------


def frozen_objective_fns(net: MlpNetwork, X, X_adv, y, kind,
                         lam: float = 0.0, gamma: float = 0.0,
                         stop_grad_clean: bool = True):
    """(value_fn, grad_fn) of the robust objective over the flat weights.

    Stop-gradient constants (clean softmax, runner-up class, KL weight)
    are captured once at the *current* weights of `net` and held fixed, so
    finite differences of `value_fn` recover exactly the gradients that
    backprop reports under the stop-gradient semantics, and second
    differences recover the Hessian the closed forms describe.  The
    adversarial batch is a constant by convention.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    X_adv = np.atleast_2d(np.asarray(X_adv, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    frozen = trh_module.capture_frozen(net, X, X_adv, y, kind)

    def build(w):
        return unflatten_weights(net, w)

    def value_fn(w):
        node = trh_module.objective_nodes(
            lift(build(w)), X, X_adv, y, kind, lam, gamma,
            stop_grad_clean=stop_grad_clean, frozen=frozen)
        return float(node.value)

    def grad_fn(w):
        _, grad = gradient_vector(build(w), lambda lifted: trh_module.objective_nodes(
            lifted, X, X_adv, y, kind, lam, gamma,
            stop_grad_clean=stop_grad_clean, frozen=frozen))
        return grad

    return value_fn, grad_fn


def weight_indices(net: MlpNetwork, layer: int | None = None,
                   include_bias: bool = False) -> np.ndarray:
    """Flat-vector indices of weight entries (optionally one layer only)."""
    slices = flat_index_slices(net)
    chunks = []
    for i, (ws, bs) in enumerate(slices):
        if layer is not None and i != layer:
            continue
        chunks.append(np.arange(ws.start, ws.stop))
        if include_bias and bs is not None:
            chunks.append(np.arange(bs.start, bs.stop))
    return np.concatenate(chunks)


def top_layer_indices(net: MlpNetwork) -> np.ndarray:
    return weight_indices(net, layer=net.depth - 1)
