"""Momentum-SGD training loop with schedulers and the averaging /
weight-perturbation baselines.

One trainer owns its network exclusively.  Every random choice (init,
shuffling, attack starts, evaluation attacks, measurement probes) is drawn
from a stream derived from the run seed, so two runs with identical config
and seed produce bitwise-identical metric logs.

Schedules are per-iteration over the whole run: learning rate warms up
linearly from zero, then decays (cosine to zero, or multistep drops); the
curvature penalty follows a constant / linear ramp / three-phase multistep
schedule.  Batches are drawn by per-epoch Fisher-Yates shuffling with the
remainder dropped; batch_size 0 means full batch.

Weight averaging keeps an exponential average updated every iteration and
evaluates with it.  The weight-perturbation baseline takes one ascent step
in weight space, scaled per layer to ``delta * ||W||`` (Frobenius norm,
biases unperturbed), and applies the gradient computed at the perturbed
weights to the unperturbed ones.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .attacks import AttackConfig, clean_accuracy, eval_robust_accuracy, pgd
from .data import Dataset
from .hessian_oracle import (frozen_objective_fns, hvp_from_grad,
                             quad_form_from_values)
from .losses import RobustLossKind, cross_entropy_rows
from .network import (MlpNetwork, TrainingDivergence, backprop,
                      flat_index_slices, flatten_weights, forward,
                      param_count, unflatten_weights)
from .numerics import Rng, rademacher_vector
from .layer_traces import full_ce_trace_rows_nodes, layer_trace_rows
from .trh import TrHConfig, analytic_trh_rows, objective_nodes
from . import tape

_BASELINES = ("none", "swa", "awp")
_LR_DECAYS = ("constant", "cosine", "multistep")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    base_lr: float
    batch_size: int = 0            # 0 = full batch
    momentum: float = 0.9
    warmup_iters: int = 0
    lr_decay: str = "cosine"
    lr_milestones: tuple = (0.5, 0.75)  # fractions of total iterations
    lr_drop: float = 0.1
    gamma: float = 0.0
    seed: int = 0
    baseline: str = "none"
    swa_alpha: float = 0.995
    awp_delta: float = 0.005
    divergence_threshold: float = 1e6
    eval_restarts: int = 1

    def __post_init__(self):
        if self.epochs < 1 or self.base_lr <= 0:
            raise ValueError("need epochs >= 1 and base_lr > 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.gamma < 0 or self.batch_size < 0 or self.warmup_iters < 0:
            raise ValueError("gamma, batch_size, warmup_iters must be >= 0")
        if self.lr_decay not in _LR_DECAYS:
            raise ValueError(f"unknown lr decay {self.lr_decay!r}")
        if self.baseline not in _BASELINES:
            raise ValueError(f"unknown baseline {self.baseline!r}")
        if not 0 < self.swa_alpha < 1:
            raise ValueError("swa_alpha must lie in (0, 1)")
        if self.awp_delta <= 0:
            raise ValueError("awp_delta must be positive")


def lambda_at(schedule: str, t: int, total: int, lam_max: float) -> float:
    """Effective curvature penalty at iteration t of `total`."""
    if not 0 <= t < total:
        raise ValueError("need 0 <= t < total")
    if schedule == "constant":
        return lam_max
    if schedule == "linear":
        return lam_max * t / max(1, total - 1)
    if schedule == "multistep":
        if t < 0.1 * total:
            return 0.01 * lam_max
        if t < 0.5 * total:
            return 0.1 * lam_max
        return lam_max
    raise ValueError(f"unknown schedule {schedule!r}")


def lr_at(cfg: TrainConfig, t: int, total: int) -> float:
    """Linear warmup from zero, then cosine decay to zero or multistep drops."""
    if not 0 <= t < total:
        raise ValueError("need 0 <= t < total")
    if t < cfg.warmup_iters:
        return cfg.base_lr * t / cfg.warmup_iters
    if cfg.lr_decay == "constant":
        return cfg.base_lr
    if cfg.lr_decay == "cosine":
        # span excludes the endpoint so the final step keeps a tiny rate
        span = max(1, total - cfg.warmup_iters)
        progress = (t - cfg.warmup_iters) / span
        return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))
    drops = sum(1 for frac in cfg.lr_milestones if t >= frac * total)
    return cfg.base_lr * (cfg.lr_drop ** drops)


def swa_update(avg_weights: np.ndarray, new_weights: np.ndarray,
               alpha: float) -> np.ndarray:
    """Exponential running average of flattened weights."""
    if avg_weights.shape != new_weights.shape:
        raise ValueError("parameter count mismatch")
    return alpha * avg_weights + (1.0 - alpha) * new_weights


def awp_step(net: MlpNetwork, X, x_adv, y, kind: RobustLossKind,
             delta_awp: float):
    """Most-offending weight perturbation, one ascent step per layer.

    Returns per-layer ``(xi_W, xi_b)`` with ``||xi_W|| = delta * ||W||``
    (zero for zero-gradient or zero-norm layers); biases are not perturbed.
    """
    if delta_awp <= 0:
        raise ValueError("delta_awp must be positive")
    _, grads = backprop(net, lambda lifted: objective_nodes(
        lifted, X, x_adv, y, kind, lam=0.0, gamma=0.0))
    out = []
    for layer, (g_w, _) in zip(net.layers, grads):
        w_norm = float(np.linalg.norm(layer.weights))
        g_norm = float(np.linalg.norm(g_w))
        if w_norm == 0.0 or g_norm == 0.0:
            xi = np.zeros_like(layer.weights)
        else:
            xi = (delta_awp * w_norm / g_norm) * g_w
        out.append((xi, None if layer.bias is None else np.zeros_like(layer.bias)))
    return out


def _apply_perturbation(net: MlpNetwork, xi) -> MlpNetwork:
    out = net.copy()
    for layer, (xi_w, xi_b) in zip(out.layers, xi):
        layer.weights += xi_w
        if xi_b is not None and layer.bias is not None:
            layer.bias += xi_b
    return out


@dataclass
class MetricsLog:
    columns: list
    rows: list = field(default_factory=list)
    preamble: dict = field(default_factory=dict)

    def append(self, **kwargs):
        self.rows.append({c: kwargs[c] for c in self.columns})

    def to_csv(self) -> str:
        lines = [f"# {k} = {v}" for k, v in self.preamble.items()]
        lines.append(",".join(self.columns))
        for row in self.rows:
            lines.append(",".join(_fmt(row[c]) for c in self.columns))
        return "\n".join(lines) + "\n"

    def write_csv(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_csv())


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


METRICS_COLUMNS = ["epoch", "train_loss", "clean_acc", "pgd_acc", "lambda_eff", "lr"]


@dataclass(frozen=True)
class MeasureConfig:
    """What to measure along the run and how often.

    mode "top": closed-form top-layer trace only.  "full": adds a
    whole-network Rademacher estimate with a probe set that is fixed once
    and reused across epochs (common random numbers keep the trajectory
    smooth).  "layers" adds per-layer closed-form CE traces.  "spectrum"
    produces per-layer and whole-network (trace, trace_sq) pairs and
    eigenvalue statistics.  The measurement objective is the bare robust
    loss of the training kind with adversarial inputs regenerated (and
    then frozen) at measurement time.
    """

    mode: str
    every: int = 1
    probes: int = 64
    probe_seed: int = 2024

    def __post_init__(self):
        if self.mode not in ("top", "full", "layers", "spectrum"):
            raise ValueError(f"unknown measure mode {self.mode!r}")
        if self.every < 1 or self.probes < 1:
            raise ValueError("every and probes must be >= 1")


@dataclass
class TrainResult:
    net: MlpNetwork            # evaluation network (averaged when SWA)
    raw_net: MlpNetwork
    metrics: MetricsLog
    trace_rows: list
    spectrum_rows: list
    diverged: bool
    diverged_epoch: int | None

    @property
    def trace_columns(self):
        if not self.trace_rows:
            return []
        return list(self.trace_rows[0].keys())


class _FullArmRegularizer:
    """Differentiable whole-network CE-trace penalty (adversarial inputs)."""

    def __init__(self, coeff: float):
        self.coeff = coeff

    def __call__(self, lifted, x_adv):
        return self.coeff * tape.mean(full_ce_trace_rows_nodes(lifted, x_adv))


def train(net: MlpNetwork, dataset: Dataset, kind: RobustLossKind,
          trh_cfg: TrHConfig, attack_cfg: AttackConfig, cfg: TrainConfig,
          measure: MeasureConfig | None = None,
          full_reg_coeff: float = 0.0) -> TrainResult:
    """Run the regularized training loop; deterministic given the seed.

    ``full_reg_coeff > 0`` adds the differentiable whole-network CE-trace
    penalty (used by the toy-problem "Full" arm) on top of whatever
    ``trh_cfg.lam`` specifies; the two regularizers are independent.
    """
    rng = Rng(cfg.seed)
    net = net.copy()
    m = len(dataset)
    bs = cfg.batch_size if cfg.batch_size else m
    if bs > m:
        raise ValueError("batch size exceeds dataset size")
    iters_per_epoch = max(1, m // bs)
    total_iters = cfg.epochs * iters_per_epoch

    metrics = MetricsLog(columns=list(METRICS_COLUMNS))
    trace_rows: list = []
    spectrum_rows: list = []
    eval_attack = AttackConfig(
        delta=attack_cfg.delta, steps=attack_cfg.steps, norm=attack_cfg.norm,
        step_size=attack_cfg.step_size, restarts=cfg.eval_restarts,
        inner_loss="ce", clamp=attack_cfg.clamp,
        random_start=attack_cfg.random_start)

    velocity = np.zeros(param_count(net))
    swa_avg = flatten_weights(net) if cfg.baseline == "swa" else None
    full_reg = _FullArmRegularizer(full_reg_coeff) if full_reg_coeff else None
    probe_matrix = None
    diverged = False
    diverged_epoch = None
    t = 0

    for epoch in range(cfg.epochs):
        perm = rng.child("shuffle", epoch).permutation(m)
        epoch_losses = []
        lam_eff = lr = 0.0
        for b in range(iters_per_epoch):
            idx = perm[b * bs:(b + 1) * bs]
            x_b = dataset.inputs[idx]
            y_b = dataset.labels[idx]
            lam_eff = lambda_at(trh_cfg.schedule, t, total_iters, trh_cfg.lam)
            lr = lr_at(cfg, t, total_iters)
            x_adv = pgd(net, x_b, y_b, attack_cfg, rng.child("attack", epoch, b))

            step_net = net
            if cfg.baseline == "awp":
                xi = awp_step(net, x_b, x_adv, y_b, kind, cfg.awp_delta)
                step_net = _apply_perturbation(net, xi)

            def objective(lifted):
                node = objective_nodes(lifted, x_b, x_adv, y_b, kind,
                                       lam_eff, cfg.gamma,
                                       stop_grad_clean=trh_cfg.stop_grad_clean)
                if full_reg is not None:
                    node = node + full_reg(lifted, x_adv)
                return node

            try:
                value, grads = backprop(step_net, objective)
            except TrainingDivergence:
                diverged, diverged_epoch = True, epoch
                break
            if value > cfg.divergence_threshold:
                diverged, diverged_epoch = True, epoch
                break
            epoch_losses.append(value)

            flat_grad = np.concatenate(
                [np.concatenate([gw.ravel()] + ([gb] if gb is not None else []))
                 for gw, gb in grads])
            velocity = cfg.momentum * velocity + flat_grad
            weights = flatten_weights(net) - lr * velocity
            net = unflatten_weights(net, weights)
            if swa_avg is not None:
                swa_avg = swa_update(swa_avg, weights, cfg.swa_alpha)
            t += 1

        eval_net = unflatten_weights(net, swa_avg) if swa_avg is not None else net
        metrics.append(
            epoch=epoch,
            train_loss=float(np.mean(epoch_losses)) if epoch_losses else float("nan"),
            clean_acc=clean_accuracy(eval_net, dataset),
            pgd_acc=eval_robust_accuracy(eval_net, dataset, eval_attack,
                                         rng.child("eval", epoch)),
            lambda_eff=lam_eff,
            lr=lr)

        if measure is not None and not diverged and (
                epoch % measure.every == 0 or epoch == cfg.epochs - 1):
            if probe_matrix is None and measure.mode in ("full", "layers"):
                probe_rng = Rng(measure.probe_seed).child("trace-probes")
                probe_matrix = np.stack([
                    rademacher_vector(param_count(net), probe_rng)
                    for _ in range(measure.probes)])
            row = measure_trace_row(eval_net, dataset, kind, attack_cfg,
                                    epoch, measure, probe_matrix,
                                    metrics.rows[-1])
            if measure.mode == "spectrum":
                spectrum_rows.extend(row)
            else:
                trace_rows.append(row)
        if diverged:
            break

    eval_net = unflatten_weights(net, swa_avg) if swa_avg is not None else net
    return TrainResult(net=eval_net, raw_net=net, metrics=metrics,
                       trace_rows=trace_rows, spectrum_rows=spectrum_rows,
                       diverged=diverged, diverged_epoch=diverged_epoch)


def measurement_attack(attack_cfg: AttackConfig) -> AttackConfig:
    """Deterministic single-restart attack used to fix adversarial points
    before measuring curvature."""
    return AttackConfig(delta=attack_cfg.delta, steps=attack_cfg.steps,
                        norm=attack_cfg.norm, step_size=attack_cfg.step_size,
                        restarts=1, inner_loss=attack_cfg.inner_loss,
                        clamp=attack_cfg.clamp,
                        random_start=attack_cfg.random_start)


def bare_objective_value_fn(net: MlpNetwork, X, X_adv, y, kind: RobustLossKind):
    """Fast frozen-constant robust-loss evaluator over the flat weights."""
    if kind.variant == "at":
        # no stop-gradient constants: plain numpy forward is exact and fast
        def value_fn(w):
            cand = unflatten_weights(net, w)
            return float(np.mean(cross_entropy_rows(forward(cand, X_adv).logits, y)))

        return value_fn
    value_fn, _ = frozen_objective_fns(net, X, X_adv, y, kind)
    return value_fn


def measure_trace_row(net: MlpNetwork, dataset: Dataset, kind: RobustLossKind,
                      attack_cfg: AttackConfig, epoch: int,
                      measure: MeasureConfig, probe_matrix, metrics_row):
    """One measurement record (or spectrum records) at the current weights."""
    meas_rng = Rng(measure.probe_seed).child("measure", epoch)
    x_adv = pgd(net, dataset.inputs, dataset.labels,
                measurement_attack(attack_cfg), meas_rng.child("attack"))
    x, y = dataset.inputs, dataset.labels

    if measure.mode == "spectrum":
        return spectrum_records(net, x, x_adv, y, kind, epoch,
                                measure.probes, meas_rng.child("spectrum"))

    row = {"epoch": epoch,
           "trh_top_analytic": float(np.mean(analytic_trh_rows(net, x, x_adv, y, kind)))}
    if measure.mode in ("full", "layers"):
        value_fn = bare_objective_value_fn(net, x, x_adv, y, kind)
        w0 = flatten_weights(net)
        quad = quad_form_from_values(value_fn, w0)
        vals = np.array([quad(v) for v in probe_matrix])
        row["trh_full_estimate"] = float(vals.mean())
        row["trh_full_stderr"] = (0.0 if vals.size < 2 else
                                  float(np.std(vals, ddof=1) / np.sqrt(vals.size)))
    else:
        row["trh_full_estimate"] = float("nan")
        row["trh_full_stderr"] = float("nan")
    layer_means = layer_trace_rows(net, x_adv).mean(axis=0)
    for i, v in enumerate(layer_means, start=1):
        row[f"trh_layer_{i}"] = float(v)
    row["train_loss"] = metrics_row["train_loss"]
    row["robust_acc"] = metrics_row["pgd_acc"]
    return row


def spectrum_records(net: MlpNetwork, x, x_adv, y, kind: RobustLossKind,
                     epoch: int, probes: int, rng: Rng):
    """Per-layer and whole-network (trace, trace_sq) with eigenvalue stats.

    Layer subsets cover that layer's weights and biases; layer 0 denotes
    the whole network.  The whole-network trace is the sum of the layer
    traces (trace is block-additive), while its trace_sq gets its own
    full-support probes because squares are not.
    """
    from .hessian_oracle import LayerHessianReport

    _, grad_fn = frozen_objective_fns(net, x, x_adv, y, kind)
    w0 = flatten_weights(net)
    hvp = hvp_from_grad(grad_fn, w0)
    dim = w0.size
    records = []
    trace_total = 0.0
    for li, (ws, bs) in enumerate(flat_index_slices(net), start=1):
        idx = np.arange(ws.start, ws.stop)
        if bs is not None:
            idx = np.concatenate([idx, np.arange(bs.start, bs.stop)])
        tvals = np.empty(probes)
        sqvals = np.empty(probes)
        layer_rng = rng.child("layer", li)
        for p in range(probes):
            v = np.zeros(dim)
            v[idx] = rademacher_vector(idx.size, layer_rng)
            hv = hvp(v)
            tvals[p] = float(np.dot(v, hv))
            sqvals[p] = float(np.dot(hv[idx], hv[idx]))
        report = LayerHessianReport.from_traces(li, float(tvals.mean()),
                                                float(sqvals.mean()), idx.size)
        trace_total += report.trace
        records.append({"epoch": epoch, "layer": li, "trace": report.trace,
                        "trace_sq": report.trace_sq, "eig_mean": report.eig_mean,
                        "eig_std": report.eig_std})
    full_rng = rng.child("full")
    sqvals = np.empty(probes)
    for p in range(probes):
        v = rademacher_vector(dim, full_rng)
        hv = hvp(v)
        sqvals[p] = float(np.dot(hv, hv))
    report = LayerHessianReport.from_traces(0, trace_total,
                                            float(sqvals.mean()), dim)
    records.insert(0, {"epoch": epoch, "layer": 0, "trace": report.trace,
                       "trace_sq": report.trace_sq, "eig_mean": report.eig_mean,
                       "eig_std": report.eig_std})
    return records
