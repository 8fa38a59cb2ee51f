"""Command-line experiment runner.

Subcommands: train, eval, trace, spectrum, sweep, verify.  Every run is
driven by a flat `key = value` config file (see :mod:`trhreg.config`) plus
a few overrides.  Outputs are self-describing CSVs and `TRHNET v1`
checkpoints.

Exit codes: 0 success, 1 config error, 2 training divergence,
3 verification failure.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .attacks import AttackConfig, clean_accuracy, eval_robust_accuracy
from .config import ConfigError, ExperimentConfig
from .network import load_checkpoint, save_checkpoint
from .numerics import Rng
from .trainer import MeasureConfig, MetricsLog, train
from .verify import format_report, run_verification

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DIVERGED = 2
EXIT_VERIFY = 3


def _load_config(path, seed=None, out=None) -> ExperimentConfig:
    cfg = ExperimentConfig.from_file(path)
    if seed is not None:
        cfg.train = cfg.train.__class__(**{**cfg.train.__dict__, "seed": seed})
    if out is not None:
        cfg.out_dir = out
    return cfg


def _outdir(cfg: ExperimentConfig) -> str:
    out = cfg.out_dir or "runs/latest"
    os.makedirs(out, exist_ok=True)
    return out


def _preamble(cfg: ExperimentConfig) -> dict:
    pre = {
        "loss.kind": cfg.loss.variant,
        "attack.norm": cfg.attack.norm,
        "attack.delta": cfg.attack.delta,
        "trh.lambda": cfg.trh.lam,
        "trh.schedule": cfg.trh.schedule,
        "train.gamma": cfg.train.gamma,
        "train.seed": cfg.train.seed,
    }
    if cfg.loss.variant == "trades":
        pre["loss.lambda_t"] = cfg.loss.penalty
    elif cfg.loss.variant == "alp":
        pre["loss.lambda_a"] = cfg.loss.penalty
    elif cfg.loss.variant == "mart":
        pre["loss.lambda_m"] = cfg.loss.penalty
    return pre


def _run_training(cfg: ExperimentConfig, measure: MeasureConfig | None = None):
    ds = cfg.build_dataset()
    net = cfg.build_network(ds)
    attack = cfg.effective_attack(ds)
    result = train(net, ds, cfg.loss, cfg.trh, attack, cfg.train,
                   measure=measure, full_reg_coeff=cfg.full_coeff)
    return ds, result


def cmd_train(args) -> int:
    cfg = _load_config(args.config, args.seed, args.out)
    out = _outdir(cfg)
    ds, result = _run_training(cfg)
    result.metrics.preamble = _preamble(cfg)
    result.metrics.write_csv(os.path.join(out, "metrics.csv"))
    save_checkpoint(result.net, os.path.join(out, "checkpoint.txt"))
    if result.diverged:
        print(f"diverged at epoch {result.diverged_epoch}; "
              f"last-good checkpoint written to {out}", file=sys.stderr)
        return EXIT_DIVERGED
    last = result.metrics.rows[-1]
    print(f"trained {cfg.train.epochs} epochs: clean={last['clean_acc']:.4f} "
          f"pgd={last['pgd_acc']:.4f} loss={last['train_loss']:.6f}")
    print(f"wrote {out}/metrics.csv and {out}/checkpoint.txt")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load_config(args.config, args.seed, args.out)
    net = load_checkpoint(args.checkpoint)
    ds = cfg.build_dataset()
    if ds.inputs.shape[1] != net.input_dim:
        raise ConfigError(f"checkpoint input dim {net.input_dim} does not "
                          f"match dataset dim {ds.inputs.shape[1]}")
    attack = cfg.effective_attack(ds)
    if args.restarts is not None:
        attack = AttackConfig(delta=attack.delta, steps=attack.steps,
                              norm=attack.norm, step_size=attack.step_size,
                              restarts=args.restarts, inner_loss="ce",
                              clamp=attack.clamp,
                              random_start=attack.random_start)
    rng = Rng(cfg.train.seed).child("eval-cli")
    clean = clean_accuracy(net, ds)
    robust = eval_robust_accuracy(net, ds, attack, rng)
    print(f"clean_acc={clean:.6f} robust_acc={robust:.6f} "
          f"(delta={attack.delta}, restarts={attack.restarts})")
    out = _outdir(cfg)
    log = MetricsLog(columns=["clean_acc", "robust_acc", "delta", "restarts"],
                     preamble=_preamble(cfg))
    log.append(clean_acc=clean, robust_acc=robust, delta=attack.delta,
               restarts=attack.restarts)
    log.write_csv(os.path.join(out, "eval.csv"))
    print(f"wrote {out}/eval.csv")
    return EXIT_OK


def cmd_trace(args) -> int:
    cfg = _load_config(args.config, args.seed, args.out)
    out = _outdir(cfg)
    measure = MeasureConfig(mode=args.measure, every=args.every,
                            probes=args.probes)
    ds, result = _run_training(cfg, measure=measure)
    result.metrics.preamble = _preamble(cfg)
    result.metrics.write_csv(os.path.join(out, "metrics.csv"))
    save_checkpoint(result.net, os.path.join(out, "checkpoint.txt"))
    log = MetricsLog(columns=result.trace_columns, preamble=_preamble(cfg))
    for row in result.trace_rows:
        log.append(**row)
    log.write_csv(os.path.join(out, "trace.csv"))
    if result.diverged:
        print(f"diverged at epoch {result.diverged_epoch}", file=sys.stderr)
        return EXIT_DIVERGED
    print(f"wrote {out}/trace.csv ({len(result.trace_rows)} measurements)")
    return EXIT_OK


def cmd_spectrum(args) -> int:
    cfg = _load_config(args.config, args.seed, args.out)
    out = _outdir(cfg)
    measure = MeasureConfig(mode="spectrum", every=args.every,
                            probes=args.probes)
    ds, result = _run_training(cfg, measure=measure)
    result.metrics.preamble = _preamble(cfg)
    result.metrics.write_csv(os.path.join(out, "metrics.csv"))
    save_checkpoint(result.net, os.path.join(out, "checkpoint.txt"))
    log = MetricsLog(columns=["epoch", "layer", "trace", "trace_sq",
                              "eig_mean", "eig_std"],
                     preamble=_preamble(cfg))
    for row in result.spectrum_rows:
        log.append(**row)
    log.write_csv(os.path.join(out, "spectrum.csv"))
    if result.diverged:
        print(f"diverged at epoch {result.diverged_epoch}", file=sys.stderr)
        return EXIT_DIVERGED
    print(f"wrote {out}/spectrum.csv ({len(result.spectrum_rows)} rows)")
    return EXIT_OK


_SWEEPABLE = {
    "lambda": ("trh", "lam"),
    "gamma": ("train", "gamma"),
    "delta": ("attack", "delta"),
    "penalty": ("loss", "penalty"),
}


def cmd_sweep(args) -> int:
    cfg = _load_config(args.config, args.seed, args.out)
    out = _outdir(cfg)
    if args.param not in _SWEEPABLE:
        raise ConfigError(f"unsupported sweep parameter {args.param!r}; "
                          f"choose from {sorted(_SWEEPABLE)}")
    values = [float(v) for v in args.values.split(",") if v.strip()]
    if len(values) < 2:
        raise ConfigError("sweep needs at least 2 values")
    attr, fieldname = _SWEEPABLE[args.param]
    log = MetricsLog(columns=["value", "clean_acc", "robust_acc"],
                     preamble=_preamble(cfg))
    failures = 0
    for value in values:
        trial = cfg.with_overrides()
        sub = getattr(trial, attr)
        setattr(trial, attr, sub.__class__(**{**sub.__dict__, fieldname: value}))
        try:
            ds, result = _run_training(trial)
            last = result.metrics.rows[-1]
            if result.diverged:
                raise RuntimeError(f"diverged at epoch {result.diverged_epoch}")
            log.append(value=value, clean_acc=last["clean_acc"],
                       robust_acc=last["pgd_acc"])
            print(f"{args.param}={value}: clean={last['clean_acc']:.4f} "
                  f"robust={last['pgd_acc']:.4f}")
        except Exception as exc:  # keep sweeping past per-trial failures
            failures += 1
            log.append(value=value, clean_acc=float("nan"),
                       robust_acc=float("nan"))
            print(f"{args.param}={value}: FAILED ({exc})", file=sys.stderr)
    log.write_csv(os.path.join(out, "sweep.csv"))
    print(f"wrote {out}/sweep.csv ({len(values)} trials, {failures} failed)")
    return EXIT_OK


def cmd_verify(args) -> int:
    results, passed = run_verification(level=args.level, seed=args.seed)
    print(format_report(results))
    print(f"{'PASS' if passed else 'FAIL'} total checks={len(results)}")
    return EXIT_OK if passed else EXIT_VERIFY


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="trhreg",
                                description="Curvature-regularized robust training workbench")
    sub = p.add_subparsers(dest="command", required=True)

    def add_common(sp, config_required=True):
        sp.add_argument("--config", required=config_required,
                        help="key = value experiment file")
        sp.add_argument("--seed", type=int, default=None,
                        help="override train.seed")
        sp.add_argument("--out", default=None, help="output directory")

    sp = sub.add_parser("train", help="run the training loop")
    add_common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="clean + multi-restart attack accuracy")
    add_common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--restarts", type=int, default=None)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("trace", help="train while logging curvature traces")
    add_common(sp)
    sp.add_argument("--measure", choices=["top", "full", "layers"],
                    default="full")
    sp.add_argument("--every", type=int, default=1)
    sp.add_argument("--probes", type=int, default=64)
    sp.set_defaults(func=cmd_trace)

    sp = sub.add_parser("spectrum", help="per-layer eigenvalue statistics")
    add_common(sp)
    sp.add_argument("--every", type=int, default=10)
    sp.add_argument("--probes", type=int, default=32)
    sp.set_defaults(func=cmd_spectrum)

    sp = sub.add_parser("sweep", help="grid over one hyper-parameter")
    add_common(sp)
    sp.add_argument("--param", required=True)
    sp.add_argument("--values", required=True,
                    help="comma-separated numeric values")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("verify", help="run the oracle cross-validation suites")
    sp.add_argument("--level", choices=["quick", "full"], default="quick")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        # ConfigError, malformed CSV/checkpoint files, bad combinations
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
