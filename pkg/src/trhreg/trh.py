"""Closed-form top-layer Hessian traces and the regularized training objective.

For a network ``g = W_top^T z`` with penultimate feature ``z``, the trace of
the Hessian of the robust loss over the entries of ``W_top`` has an exact
expression built from softmax derivatives.  The base cases:

* adversarial cross entropy:              ``||z'||^2 * 1^T h'``
* clean/adversarial KL, clean side frozen: ``||z'||^2 * 1^T h'``
  (for any constant left argument), so the TRADES trace is the weighted sum
  of clean and adversarial cross-entropy shapes.

When the clean logits are *not* frozen inside the KL term there is an extra
contribution ``G``; the expression implemented here was re-derived from the
identity ``d Phi[i,k]/d g[k] = Phi[i,k] (1 - 2 s[k])`` and validated against
the finite-difference oracle (see tests), which is the acceptance authority
for every formula in this module.  The same applies to the pairing trace of
the logit-pairing loss and to the margin trace of the margin-boosted loss,
whose textbook write-ups are easy to get wrong in the cross terms.

The weighted-KL trace keeps its ``(1 - s_y)`` factor: the weight is a
constant under the frozen-clean convention, but a constant factor still
scales the trace.

Adversarial inputs are always treated as constants when differentiating
(the inner maximizer is held fixed at the current weights).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tape
from .losses import RobustLossKind, log_softmax, softmax, softmax_derivs
from .network import ForwardTrace, MlpNetwork, forward, forward_nodes, lift

_SCHEDULES = ("constant", "linear", "multistep")


@dataclass(frozen=True)
class TrHConfig:
    """Penalty strength and schedule for the curvature regularizer.

    Under the bound reparameterization, ``lam`` equals half the prior
    variance.  ``stop_grad_clean`` selects the frozen-clean-logits variant
    of the TRADES trace (the default; the full variant adds the G term).
    """

    lam: float = 0.0
    schedule: str = "constant"
    stop_grad_clean: bool = True

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.schedule not in _SCHEDULES:
            raise ValueError(f"unknown schedule {self.schedule!r}")


@dataclass
class TradesFullTerms:
    """Ingredients of the unfrozen TRADES trace, exposed for inspection.

    ``psi[k]`` / ``psi_prime[k]`` are the k-th row of the clean log-softmax
    Jacobian dotted with log s / log s'; ``omega[k]`` / ``omega_prime[k]``
    are column dot products of the softmax Jacobians (both collapse to h
    analytically, an identity the tests pin down); ``g_term`` is the extra
    trace contribution from differentiating through the clean logits.
    """

    psi: np.ndarray
    psi_prime: np.ndarray
    omega: np.ndarray
    omega_prime: np.ndarray
    g_term: float


def _feature_sq(trace: ForwardTrace) -> float:
    z = trace.features
    if z.ndim != 1:
        raise ValueError("trh formulas take single-example traces")
    return float(np.dot(z, z))


def trh_at(trace_adv: ForwardTrace) -> float:
    """Top-layer trace of the adversarial cross-entropy loss."""
    d = softmax_derivs(trace_adv.logits)
    return _feature_sq(trace_adv) * float(d.h.sum())


def trh_trades(trace_clean: ForwardTrace, trace_adv: ForwardTrace,
               lambda_t: float) -> float:
    """Top-layer TRADES trace with the clean logits frozen inside the KL."""
    if lambda_t < 0:
        raise ValueError("lambda_t must be >= 0")
    d = softmax_derivs(trace_clean.logits)
    dp = softmax_derivs(trace_adv.logits)
    return (_feature_sq(trace_clean) * float(d.h.sum())
            + lambda_t * _feature_sq(trace_adv) * float(dp.h.sum()))


def trh_trades_full(trace_clean: ForwardTrace, trace_adv: ForwardTrace,
                    lambda_t: float):
    """Top-layer TRADES trace with gradient kept on the clean logits.

    Returns ``(value, TradesFullTerms)``.  The extra term is

        G = ||z||^2 ( sum_k s_k (1 - 2 s_k) (psi_k - psi'_k) + 1^T omega )
            - (z . z') ( 1^T omega' + 1^T h )

    where the ``s (1 - 2 s)`` weight (not h) comes from the corrected
    Jacobian-of-Jacobian identity in :mod:`trhreg.losses`.
    """
    if lambda_t < 0:
        raise ValueError("lambda_t must be >= 0")
    d = softmax_derivs(trace_clean.logits)
    dp = softmax_derivs(trace_adv.logits)
    log_s = np.log(d.s)
    log_sp = np.log(dp.s)
    psi = d.psi @ log_s
    psi_prime = d.psi @ log_sp
    omega = np.einsum("ik,ik->k", d.phi, d.psi)
    omega_prime = np.einsum("ik,ik->k", d.phi, dp.psi)
    z = trace_clean.features
    zp = trace_adv.features
    g_term = (float(np.dot(z, z)) * (float(np.sum(d.s * (1 - 2 * d.s) * (psi - psi_prime)))
                                     + float(omega.sum()))
              - float(np.dot(z, zp)) * (float(omega_prime.sum()) + float(d.h.sum())))
    value = (_feature_sq(trace_clean) * float(d.h.sum())
             + lambda_t * (_feature_sq(trace_adv) * float(dp.h.sum()) + g_term))
    return value, TradesFullTerms(psi=psi, psi_prime=psi_prime, omega=omega,
                                  omega_prime=omega_prime, g_term=g_term)


def trh_alp(trace_clean: ForwardTrace, trace_adv: ForwardTrace,
            lambda_a: float) -> float:
    """Top-layer trace of the logit-pairing loss (clean side frozen).

    Adversarial-CE trace plus ``lambda_a`` times the pairing trace

        2 ||z'||^2 sum_k ( ||Phi'_col_k||^2
                           - (1 - 2 s'_k) (s - s')^T Phi'_col_k ).
    """
    if lambda_a < 0:
        raise ValueError("lambda_a must be >= 0")
    d = softmax_derivs(trace_clean.logits)
    dp = softmax_derivs(trace_adv.logits)
    diff = d.s - dp.s
    pair = 0.0
    for k in range(dp.s.size):
        col = dp.phi[:, k]
        pair += float(np.dot(col, col)) - (1 - 2 * dp.s[k]) * float(np.dot(diff, col))
    return (_feature_sq(trace_adv) * float(dp.h.sum())
            + lambda_a * 2.0 * _feature_sq(trace_adv) * pair)


def trh_mart(trace_clean: ForwardTrace, trace_adv: ForwardTrace, y: int,
             lambda_m: float) -> float:
    """Top-layer trace of the margin-boosted robust loss.

    Clean-CE trace, plus the margin-term trace on the runner-up class of
    the adversarial point, plus ``lambda_m`` times the weighted-KL trace
    (clean side frozen, so the ``(1 - s_y)`` weight is a constant factor).
    """
    if lambda_m < 0:
        raise ValueError("lambda_m must be >= 0")
    d = softmax_derivs(trace_clean.logits)
    dp = softmax_derivs(trace_adv.logits)
    y = int(y)
    masked = dp.s.copy()
    masked[y] = -np.inf
    ks = int(np.argmax(masked))
    denom = 1.0 - dp.s[ks]
    row = dp.phi[ks, :]
    margin = float(np.sum(row * (1 - 2 * dp.s) / denom + row ** 2 / denom ** 2))
    return (_feature_sq(trace_clean) * float(d.h.sum())
            + _feature_sq(trace_adv) * margin
            + lambda_m * (1.0 - d.s[y]) * _feature_sq(trace_adv) * float(dp.h.sum()))


def analytic_trh(trace_clean: ForwardTrace, trace_adv: ForwardTrace, y: int,
                 kind: RobustLossKind, stop_grad_clean: bool = True) -> float:
    """Dispatch to the matching closed form for a loss kind."""
    if kind.variant == "at":
        return trh_at(trace_adv)
    if kind.variant == "trades":
        if stop_grad_clean:
            return trh_trades(trace_clean, trace_adv, kind.penalty)
        return trh_trades_full(trace_clean, trace_adv, kind.penalty)[0]
    if kind.variant == "alp":
        return trh_alp(trace_clean, trace_adv, kind.penalty)
    if kind.variant == "mart":
        return trh_mart(trace_clean, trace_adv, y, kind.penalty)
    raise ValueError(f"unknown loss variant {kind.variant!r}")


# -- batched objective on the tape -------------------------------------


def capture_frozen(net: MlpNetwork, X: np.ndarray, X_adv: np.ndarray,
                   y: np.ndarray, kind: RobustLossKind) -> dict:
    """Constants a stop-gradient objective holds fixed, captured at `net`.

    The returned dict parameterizes :func:`objective_nodes` so the same
    expression can be (a) trained, with constants refreshed every step, and
    (b) finite-differenced, with constants pinned at the reference weights.
    """
    frozen: dict = {}
    tr = forward(net, np.atleast_2d(X))
    tr_adv = forward(net, np.atleast_2d(X_adv))
    s_clean = softmax(tr.logits)
    frozen["s_clean"] = s_clean
    frozen["log_s_clean"] = log_softmax(tr.logits)
    if kind.variant == "mart":
        s_adv = softmax(tr_adv.logits)
        masked = s_adv.copy()
        masked[np.arange(len(y)), np.asarray(y, dtype=np.int64)] = -np.inf
        frozen["kappa_star"] = np.argmax(masked, axis=1)
        frozen["wkl_weight"] = 1.0 - s_clean[np.arange(len(y)), np.asarray(y, dtype=np.int64)]
    return frozen


def objective_nodes(lifted, X, X_adv, y, kind: RobustLossKind,
                    lam: float, gamma: float, stop_grad_clean: bool = True,
                    frozen: dict | None = None) -> tape.Node:
    """Scalar tape node: mean robust loss + lam * mean trace + gamma ||theta||^2.

    Freezing convention: the *loss* terms honor the stop-gradient choices
    (clean side of KL / pairing / weighted-KL held constant), while the
    closed-form trace terms are differentiated as ordinary expressions.
    When ``frozen`` is None the constants are captured from the current
    parameter values, which leaves the value unchanged and realizes the
    stop-gradient semantics exactly.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    X_adv = np.atleast_2d(np.asarray(X_adv, dtype=np.float64))
    y = np.asarray(y, dtype=np.int64)
    m, k_cls = X.shape[0], lifted[-1][0].value.shape[1]
    y_onehot = np.zeros((m, k_cls))
    y_onehot[np.arange(m), y] = 1.0
    Y = tape.constant(y_onehot)

    layer_inputs_adv, preacts_adv = forward_nodes(lifted, X_adv)
    zp = layer_inputs_adv[-1]
    logs_adv = tape.log_softmax(preacts_adv[-1])
    s_adv = tape.exp(logs_adv)

    need_clean = kind.variant in ("trades", "alp", "mart")
    z = logs = s = None
    if need_clean:
        layer_inputs, preacts = forward_nodes(lifted, X)
        z = layer_inputs[-1]
        logs = tape.log_softmax(preacts[-1])
        s = tape.exp(logs)

    ce_adv = -tape.row_sum(logs_adv * Y)

    E = None  # one-hot of the runner-up class (margin-boosted loss only)
    loss_rows: tape.Node
    if kind.variant == "at":
        loss_rows = ce_adv
    elif kind.variant == "trades":
        ce_clean = -tape.row_sum(logs * Y)
        if stop_grad_clean:
            if frozen is None:
                s_c, logs_c = s.value, logs.value
            else:
                s_c, logs_c = frozen["s_clean"], frozen["log_s_clean"]
            kl_rows = tape.row_sum(tape.constant(s_c) *
                                   (tape.constant(logs_c) - logs_adv))
        else:
            kl_rows = tape.row_sum(s * (logs - logs_adv))
        loss_rows = ce_clean + kind.penalty * kl_rows
    elif kind.variant == "alp":
        s_c = s.value if frozen is None else frozen["s_clean"]
        diff = tape.constant(s_c) - s_adv
        loss_rows = ce_adv + kind.penalty * tape.row_sum(diff * diff)
    elif kind.variant == "mart":
        ce_clean = -tape.row_sum(logs * Y)
        if frozen is None:
            s_c, logs_c = s.value, logs.value
            masked = s_adv.value.copy()
            masked[np.arange(m), y] = -np.inf
            kappa = np.argmax(masked, axis=1)
            weight = 1.0 - s_c[np.arange(m), y]
        else:
            s_c, logs_c = frozen["s_clean"], frozen["log_s_clean"]
            kappa = frozen["kappa_star"]
            weight = frozen["wkl_weight"]
        E = np.zeros((m, k_cls))
        E[np.arange(m), kappa] = 1.0
        u = tape.row_sum(s_adv * tape.constant(E))  # s'_{kappa*}
        margin = -tape.log(1.0 - u)
        kl_rows = tape.row_sum(tape.constant(s_c) *
                               (tape.constant(logs_c) - logs_adv))
        loss_rows = ce_clean + margin + kind.penalty * (tape.constant(weight) * kl_rows)
    else:
        raise ValueError(f"unknown loss variant {kind.variant!r}")

    if lam > 0:
        r2_adv = tape.row_sum(zp * zp)
        hsum_adv = 1.0 - tape.row_sum(s_adv * s_adv)
        if kind.variant == "at":
            trh_rows = r2_adv * hsum_adv
        elif kind.variant == "trades":
            r2 = tape.row_sum(z * z)
            hsum = 1.0 - tape.row_sum(s * s)
            trh_rows = r2 * hsum + kind.penalty * (r2_adv * hsum_adv)
            if not stop_grad_clean:
                logdiff = logs - logs_adv
                klr = tape.row_sum(s * logdiff, keepdims=True)
                psidiff = logdiff - klr
                lead = tape.row_sum(s * (1.0 - 2.0 * s) * psidiff)
                dot_zzp = tape.row_sum(z * zp)
                g_rows = r2 * (lead + hsum) - dot_zzp * (2.0 * hsum)
                trh_rows = trh_rows + kind.penalty * g_rows
        elif kind.variant == "alp":
            sq_adv = s_adv * s_adv
            s2_adv = tape.row_sum(sq_adv, keepdims=True)
            col_norms = tape.row_sum(sq_adv * (1.0 - 2.0 * s_adv)) + \
                tape.row_sum(sq_adv * s2_adv)
            c = tape.row_sum(s * s_adv, keepdims=True) - s2_adv
            cross = tape.row_sum((1.0 - 2.0 * s_adv) * s_adv * ((s - s_adv) - c))
            trh_rows = r2_adv * hsum_adv + kind.penalty * (2.0 * r2_adv * (col_norms - cross))
        elif kind.variant == "mart":
            r2 = tape.row_sum(z * z)
            hsum = 1.0 - tape.row_sum(s * s)
            u2 = tape.row_sum(s_adv * tape.constant(E), keepdims=True)
            phi_row = u2 * (tape.constant(E) - s_adv)  # Phi'[kappa*, :]
            denom = 1.0 - u2
            margin_tr = tape.row_sum(phi_row * (1.0 - 2.0 * s_adv) / denom
                                     + phi_row * phi_row / (denom * denom))
            s_y = tape.row_sum(s * Y)
            trh_rows = r2 * hsum + r2_adv * margin_tr \
                + kind.penalty * ((1.0 - s_y) * (r2_adv * hsum_adv))
        total_rows = loss_rows + lam * trh_rows
    else:
        total_rows = loss_rows

    out = tape.mean(total_rows)
    if gamma != 0.0:
        sq = None
        for w, b in lifted:
            term = tape.nsum(w * w)
            if b is not None:
                term = term + tape.nsum(b * b)
            sq = term if sq is None else sq + term
        out = out + gamma * sq
    return out


@dataclass
class TrainingStepResult:
    value: float
    grads: list          # per-layer (dW, db|None)
    x_adv: np.ndarray    # the adversarial batch used


def training_objective(net: MlpNetwork, batch, kind: RobustLossKind,
                         trh_cfg: TrHConfig, gamma: float, attack_cfg,
                         rng) -> TrainingStepResult:
    """One evaluation of the regularized training objective with gradients.

    Runs the inner maximizer, then differentiates
    ``mean(robust loss + lam * top-layer trace) + gamma ||theta||^2``
    with gradients flowing through features and softmax terms into every
    layer.  The adversarial batch is treated as constant.
    """
    from .attacks import pgd  # local import: attacks depends on network only
    from .network import backprop

    X, y = batch
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.int64)
    if X.shape[0] == 0:
        raise ValueError("batch must be nonempty")
    x_adv = pgd(net, X, y, attack_cfg, rng)
    value, grads = backprop(net, lambda lifted: objective_nodes(
        lifted, X, x_adv, y, kind, trh_cfg.lam, gamma,
        stop_grad_clean=trh_cfg.stop_grad_clean))
    return TrainingStepResult(value=value, grads=grads, x_adv=x_adv)


def robust_loss_rows(net: MlpNetwork, X, X_adv, y,
                     kind: RobustLossKind) -> np.ndarray:
    """Per-example robust loss values (no regularizer), plain numpy."""
    from .losses import cross_entropy_rows, kl_div, mart_losses

    X = np.atleast_2d(X)
    X_adv = np.atleast_2d(X_adv)
    y = np.asarray(y, dtype=np.int64)
    tr = forward(net, X)
    tr_adv = forward(net, X_adv)
    if kind.variant == "at":
        return cross_entropy_rows(tr_adv.logits, y)
    if kind.variant == "trades":
        s = softmax(tr.logits)
        sp = softmax(tr_adv.logits)
        kl = np.array([kl_div(s[i], sp[i]) for i in range(len(y))])
        return cross_entropy_rows(tr.logits, y) + kind.penalty * kl
    if kind.variant == "alp":
        s = softmax(tr.logits)
        sp = softmax(tr_adv.logits)
        return (cross_entropy_rows(tr_adv.logits, y)
                + kind.penalty * np.sum((s - sp) ** 2, axis=1))
    if kind.variant == "mart":
        out = np.empty(len(y))
        for i in range(len(y)):
            tr_i = forward(net, X[i])
            tr_adv_i = forward(net, X_adv[i])
            terms = mart_losses(tr_i, tr_adv_i, int(y[i]))
            out[i] = terms.bce + kind.penalty * terms.wkl
        return out
    raise ValueError(f"unknown loss variant {kind.variant!r}")


def analytic_trh_rows(net: MlpNetwork, X, X_adv, y, kind: RobustLossKind,
                      stop_grad_clean: bool = True) -> np.ndarray:
    """Per-example closed-form top-layer traces, plain numpy."""
    X = np.atleast_2d(X)
    X_adv = np.atleast_2d(X_adv)
    y = np.asarray(y, dtype=np.int64)
    out = np.empty(X.shape[0])
    for i in range(X.shape[0]):
        tr = forward(net, X[i])
        tr_adv = forward(net, X_adv[i])
        out[i] = analytic_trh(tr, tr_adv, int(y[i]), kind, stop_grad_clean)
    return out
