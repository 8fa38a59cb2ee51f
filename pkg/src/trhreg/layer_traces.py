"""Layer-wise Hessian traces of the cross-entropy loss for ReLU nets.

Indexing convention, used everywhere in this module: *level* ``i`` is the
activation entering weight layer ``i`` (0-based), so level 0 is the raw
input, level ``i`` for hidden layers is a ReLU output, and level ``L``
(= ``net.depth``) is the logits.  Weight matrix ``W_i`` maps level ``i`` to
the pre-activation of level ``i+1``.

Two related quantities live here.  The tensor

    H[k, d] = (d logits_k / d level_d)^2 * h_k

with the active set ``P = {d : level_d > 0}`` is the object of the
consecutive-level bound

    max H(level i) <= max H(level i+1) * ||W_i||_1^2

exposed as a checkable predicate.  The *exact* CE Hessian trace over the
entries of weight matrix ``W_i`` is

    trace(W_i) = ||level_i||^2 * sum_{d in P(level_{i+1})} J_d^T Phi J_d

where ``J_d = d logits / d level_{i+1}[d]`` and ``Phi`` is the softmax
Jacobian; summing only the diagonal of ``Phi`` would give
``sum_{k, d in P} H[k, d]``, which coincides with the exact trace at the
top layer (where J is the identity and the trace reduces to
``||z||^2 * 1^T h``) but drops the softmax cross terms below it.  The
finite-difference oracle pins the exact version down, which is what
``trh_ce_layer`` computes; the per-column quadratic form simplifies to
``sum_k s_k J_kd^2 - (sum_k s_k J_kd)^2``.

At the logits level there is no ReLU above the weights, so its active set
is every index.  Biases are excluded throughout (traces are over
weight-matrix entries only).  Inputs within ``SMOOTH_TOL`` of a ReLU kink
are rejected for the oracle-facing entry points because the
second-derivative convention (ReLU'' = 0) only holds away from kinks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tape
from .losses import softmax
from .network import MlpNetwork, forward, forward_nodes
from .numerics import SMOOTH_TOL


class NonSmoothInput(RuntimeError):
    """A pre-activation sits too close to a ReLU kink for exact formulas."""


@dataclass
class LayerHTensor:
    level: int
    values: np.ndarray        # (K, D) squared logit Jacobian times h
    positive_set: np.ndarray  # indices of active units at this level


def _check_smooth(net: MlpNetwork, x: np.ndarray, tol: float) -> None:
    tr = forward(net, x)
    for pre in tr.preacts[:-1]:
        if np.min(np.abs(pre)) < tol:
            raise NonSmoothInput(
                f"pre-activation within {tol} of a ReLU kink; resample the input")


def _level_activations(net: MlpNetwork, x: np.ndarray):
    tr = forward(net, x)
    return tr.layer_inputs + [tr.logits], tr


def logits_jacobian(net: MlpNetwork, x: np.ndarray, level: int) -> np.ndarray:
    """d logits / d level activations, shape (K, D_level)."""
    levels, tr = _level_activations(net, x)
    depth = net.depth
    if not 0 <= level <= depth:
        raise ValueError(f"level must be in [0, {depth}]")
    k = net.num_classes
    jac = np.eye(k)
    for i in range(depth - 1, level - 1, -1):
        jac = jac @ net.layers[i].weights.T
        if i > level:
            jac = jac * (tr.preacts[i - 1] > 0)
    return jac


def layer_h_tensor(net: MlpNetwork, x: np.ndarray, level: int,
                   tol: float = SMOOTH_TOL) -> LayerHTensor:
    """Squared-Jacobian-times-h tensor and active set at an activation level."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("layer_h_tensor takes a single input vector")
    _check_smooth(net, x, tol)
    levels, tr = _level_activations(net, x)
    act = levels[level]
    if level == net.depth:
        positive = np.arange(act.size)  # no ReLU above the top weights
    else:
        positive = np.flatnonzero(act > 0)
        if level == 0 and positive.size == 0 and np.all(act == 0):
            raise NonSmoothInput("zero input is degenerate for a bias-free net")
    jac = logits_jacobian(net, x, level)
    h = softmax(tr.logits) * (1.0 - softmax(tr.logits))
    return LayerHTensor(level=level, values=jac ** 2 * h[:, None],
                        positive_set=positive)


def trh_ce_layer(net: MlpNetwork, x: np.ndarray, layer: int,
                 tol: float = SMOOTH_TOL) -> float:
    """Exact CE Hessian trace over the entries of weight matrix `layer`."""
    if not 0 <= layer < net.depth:
        raise ValueError(f"layer must be in [0, {net.depth})")
    x = np.asarray(x, dtype=np.float64)
    _check_smooth(net, x, tol)
    levels, tr = _level_activations(net, x)
    below = levels[layer]
    level = layer + 1
    act = levels[level]
    if level == net.depth:
        positive = np.arange(act.size)
    else:
        positive = np.flatnonzero(act > 0)
    jac = logits_jacobian(net, x, level)[:, positive]  # (K, |P|)
    s = softmax(tr.logits)
    quad = s @ (jac ** 2) - (s @ jac) ** 2  # J_d^T Phi J_d per column
    return float(np.dot(below, below)) * float(quad.sum())


def full_ce_trace(net: MlpNetwork, x: np.ndarray, tol: float = SMOOTH_TOL) -> float:
    """CE Hessian trace over all weight matrices (biases excluded)."""
    return sum(trh_ce_layer(net, x, i, tol=tol) for i in range(net.depth))


def l1_operator_norm(w: np.ndarray) -> float:
    """Maximum absolute row sum of a weight matrix."""
    w = np.asarray(w, dtype=np.float64)
    if w.size == 0:
        raise ValueError("matrix must be nonempty")
    return float(np.max(np.abs(w).sum(axis=1)))


@dataclass
class LayerInequality:
    lhs: float
    rhs: float
    holds: bool


def check_layer_inequality(net: MlpNetwork, x: np.ndarray, level: int,
                           slack: float = 1e-9) -> LayerInequality:
    """Consecutive-level bound: max H(level) <= max H(level+1) * ||W||_1^2."""
    if not 0 <= level < net.depth:
        raise ValueError(f"level must be in [0, {net.depth})")
    lower = layer_h_tensor(net, x, level)
    upper = layer_h_tensor(net, x, level + 1)
    lhs = float(lower.values.max())
    rhs = float(upper.values.max()) * l1_operator_norm(net.layers[level].weights) ** 2
    return LayerInequality(lhs=lhs, rhs=rhs, holds=lhs <= rhs + slack)


# -- batched / differentiable versions ---------------------------------


def layer_trace_rows(net: MlpNetwork, X: np.ndarray) -> np.ndarray:
    """Per-example CE layer traces, shape (m, depth); plain numpy, no
    smoothness check (intended for bulk measurement, not oracle duty)."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    tr = forward(net, X)
    depth = net.depth
    m = X.shape[0]
    k = net.num_classes
    s = softmax(tr.logits)
    levels = tr.layer_inputs + [tr.logits]
    masks = [(p > 0).astype(np.float64) for p in tr.preacts[:-1]]  # per hidden level
    out = np.zeros((m, depth))
    # V[c] = d logits_c / d level, accumulated from the top down
    v = [np.tile(np.eye(k)[c], (m, 1)) for c in range(k)]
    gate = np.ones((m, k))
    for i in range(depth - 1, -1, -1):
        below = levels[i]
        r2 = np.sum(below * below, axis=1)
        # per unit d: s^T (V_:d)^2 - (s^T V_:d)^2, summed over active units
        a = np.zeros_like(v[0])
        b = np.zeros_like(v[0])
        for c in range(k):
            a += s[:, c:c + 1] * v[c] ** 2
            b += s[:, c:c + 1] * v[c]
        out[:, i] = r2 * np.sum((a - b ** 2) * gate, axis=1)
        if i > 0:
            v = [(vc * gate) @ net.layers[i].weights.T for vc in v]
            gate = masks[i - 1]
    return out


def full_ce_trace_rows_nodes(lifted, X: np.ndarray) -> tape.Node:
    """Differentiable per-example all-layer CE trace, shape (m,).

    Activation patterns (ReLU gates and active sets) are held constant at
    their forward values, matching the zero-second-derivative convention;
    everything else is a live function of the parameters, so this node can
    serve as a trainable whole-network curvature regularizer.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    layer_inputs, preacts = forward_nodes(lifted, X)
    depth = len(lifted)
    k = lifted[-1][0].value.shape[1]
    m = X.shape[0]
    logits = preacts[-1]
    logs = tape.log_softmax(logits)
    s = tape.exp(logs)
    levels = list(layer_inputs) + [logits]
    gates = [tape.constant((p.value > 0).astype(np.float64)) for p in preacts[:-1]]

    s_cols = [tape.row_sum(s * tape.constant(np.eye(k)[c]), keepdims=True)
              for c in range(k)]
    v = [tape.constant(np.tile(np.eye(k)[c], (m, 1))) for c in range(k)]
    gate = tape.constant(np.ones((m, k)))
    total = None
    for i in range(depth - 1, -1, -1):
        below = levels[i]
        r2 = tape.row_sum(below * below)
        a = b = None  # per unit: sum_c s_c V_c^2 and sum_c s_c V_c
        for c in range(k):
            ta = s_cols[c] * (v[c] * v[c])
            tb = s_cols[c] * v[c]
            a = ta if a is None else a + ta
            b = tb if b is None else b + tb
        rows = r2 * tape.row_sum((a - b * b) * gate)
        total = rows if total is None else total + rows
        if i > 0:
            v = [(vc * gate) @ _transpose_node(lifted[i][0]) for vc in v]
            gate = gates[i - 1]
    return total


def _transpose_node(w: tape.Node) -> tape.Node:
    value = w.value.T
    return tape.Node(value, ((w, lambda g: g.T),))
