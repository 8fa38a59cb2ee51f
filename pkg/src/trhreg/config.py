"""Flat `key = value` experiment configuration.

One dotted key per line, `#` starts a comment, whitespace is free.  Every
tunable of the attack, loss, regularizer, trainer and bound modules has a
key; unknown keys are an error (typos should not pass silently).  Parse
errors and cross-field inconsistencies raise :class:`ConfigError` with the
offending key and line.

Cross-field rule: when the bound parameters (pacbayes.sigma0_sq,
pacbayes.beta) are given alongside explicit train.gamma / trh.lambda, they
must satisfy gamma = 1/(2 beta sigma0_sq) and lambda = sigma0_sq/2 within
1e-12.  Attack radii are stated in raw input units; with
dataset.normalize = true the radius is rescaled by 1/std before attacking.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attacks import AttackConfig
from .data import Dataset, load_csv, normalize_center, two_moons
from .losses import RobustLossKind
from .network import MlpNetwork, init_mlp
from .numerics import Rng
from .pacbayes import PacBayesConfig
from .trainer import TrainConfig
from .trh import TrHConfig


class ConfigError(ValueError):
    def __init__(self, message, key=None, line=None):
        loc = ""
        if key is not None:
            loc += f" (key {key!r}"
            loc += f", line {line})" if line is not None else ")"
        elif line is not None:
            loc += f" (line {line})"
        super().__init__(message + loc)
        self.key = key
        self.line = line


def parse_kv(text: str) -> dict:
    """Parse `key = value` lines into {key: (value, lineno)}."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {line!r}", line=lineno)
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if not key or not value:
            raise ConfigError(f"empty key or value in {line!r}", line=lineno)
        if key in out:
            raise ConfigError(f"duplicate key {key!r}", key=key, line=lineno)
        out[key] = (value, lineno)
    return out


_BOOLS = {"true": True, "false": False, "1": True, "0": False,
          "yes": True, "no": False}

KNOWN_KEYS = {
    "dataset.kind", "dataset.n", "dataset.noise_std", "dataset.seed",
    "dataset.path", "dataset.normalize",
    "net.hidden", "net.hidden_bias",
    "loss.kind", "loss.penalty",
    "attack.norm", "attack.delta", "attack.steps", "attack.step_size",
    "attack.restarts", "attack.random_start", "attack.clamp_min",
    "attack.clamp_max",
    "trh.lambda", "trh.schedule", "trh.stop_grad_clean", "trh.full_coeff",
    "train.epochs", "train.batch_size", "train.base_lr", "train.momentum",
    "train.warmup_iters", "train.lr_decay", "train.lr_milestones",
    "train.lr_drop", "train.gamma", "train.seed", "train.baseline",
    "train.swa_alpha", "train.awp_delta", "train.eval_restarts",
    "pacbayes.sigma0_sq", "pacbayes.beta", "pacbayes.tau", "pacbayes.m",
    "pacbayes.c_const",
    "out.dir",
}


class _Reader:
    def __init__(self, kv: dict):
        self.kv = kv
        for key in kv:
            if key not in KNOWN_KEYS:
                raise ConfigError("unknown key", key=key, line=kv[key][1])

    def has(self, key) -> bool:
        return key in self.kv

    def get(self, key, cast, default=None):
        if key not in self.kv:
            return default
        value, lineno = self.kv[key]
        try:
            if cast is bool:
                if value.lower() not in _BOOLS:
                    raise ValueError(f"not a boolean: {value!r}")
                return _BOOLS[value.lower()]
            return cast(value)
        except ValueError as exc:
            raise ConfigError(str(exc), key=key, line=lineno) from None

    def err(self, key, message):
        line = self.kv[key][1] if key in self.kv else None
        raise ConfigError(message, key=key, line=line)


def _int_list(text: str):
    return [int(v) for v in text.split(",") if v.strip()]


def _float_list(text: str):
    return [float(v) for v in text.split(",") if v.strip()]


@dataclass
class ExperimentConfig:
    dataset_kind: str = "two_moons"
    dataset_n: int = 500
    dataset_noise_std: float = 0.1
    dataset_seed: int = 1
    dataset_path: str | None = None
    dataset_normalize: bool = False
    hidden: list = field(default_factory=lambda: [100, 100])
    hidden_bias: bool = True
    loss: RobustLossKind = field(default_factory=lambda: RobustLossKind("at"))
    attack: AttackConfig = field(default_factory=lambda: AttackConfig(delta=0.02, steps=1))
    trh: TrHConfig = field(default_factory=TrHConfig)
    full_coeff: float = 0.0
    train: TrainConfig = field(default_factory=lambda: TrainConfig(
        epochs=100, base_lr=0.1, lr_decay="constant"))
    pacbayes: PacBayesConfig | None = None
    out_dir: str | None = None

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        r = _Reader(parse_kv(text))
        cfg = cls()
        cfg.dataset_kind = r.get("dataset.kind", str, cfg.dataset_kind)
        if cfg.dataset_kind not in ("two_moons", "csv"):
            r.err("dataset.kind", f"unknown dataset kind {cfg.dataset_kind!r}")
        cfg.dataset_n = r.get("dataset.n", int, cfg.dataset_n)
        cfg.dataset_noise_std = r.get("dataset.noise_std", float, cfg.dataset_noise_std)
        cfg.dataset_seed = r.get("dataset.seed", int, cfg.dataset_seed)
        cfg.dataset_path = r.get("dataset.path", str, cfg.dataset_path)
        cfg.dataset_normalize = r.get("dataset.normalize", bool, cfg.dataset_normalize)
        if cfg.dataset_kind == "csv" and not cfg.dataset_path:
            raise ConfigError("dataset.path required for csv datasets",
                              key="dataset.path")
        cfg.hidden = r.get("net.hidden", _int_list, cfg.hidden)
        cfg.hidden_bias = r.get("net.hidden_bias", bool, cfg.hidden_bias)

        try:
            cfg.loss = RobustLossKind(r.get("loss.kind", str, "at"),
                                      r.get("loss.penalty", float, 0.0))
        except ValueError as exc:
            r.err("loss.kind", str(exc))

        clamp_min = r.get("attack.clamp_min", float)
        clamp_max = r.get("attack.clamp_max", float)
        clamp = None
        if (clamp_min is None) != (clamp_max is None):
            r.err("attack.clamp_min", "clamp_min and clamp_max must be given together")
        if clamp_min is not None:
            clamp = (clamp_min, clamp_max)
        try:
            cfg.attack = AttackConfig(
                delta=r.get("attack.delta", float, 0.02),
                steps=r.get("attack.steps", int, 1),
                norm=r.get("attack.norm", str, "linf"),
                step_size=r.get("attack.step_size", float),
                restarts=r.get("attack.restarts", int, 1),
                inner_loss="kl" if cfg.loss.variant == "trades" else "ce",
                clamp=clamp,
                random_start=r.get("attack.random_start", bool, True))
        except ValueError as exc:
            r.err("attack.delta", str(exc))

        try:
            cfg.trh = TrHConfig(
                lam=r.get("trh.lambda", float, 0.0),
                schedule=r.get("trh.schedule", str, "constant"),
                stop_grad_clean=r.get("trh.stop_grad_clean", bool, True))
        except ValueError as exc:
            r.err("trh.lambda", str(exc))
        cfg.full_coeff = r.get("trh.full_coeff", float, 0.0)

        try:
            cfg.train = TrainConfig(
                epochs=r.get("train.epochs", int, 100),
                base_lr=r.get("train.base_lr", float, 0.1),
                batch_size=r.get("train.batch_size", int, 0),
                momentum=r.get("train.momentum", float, 0.9),
                warmup_iters=r.get("train.warmup_iters", int, 0),
                lr_decay=r.get("train.lr_decay", str, "constant"),
                lr_milestones=tuple(r.get("train.lr_milestones", _float_list,
                                          [0.5, 0.75])),
                lr_drop=r.get("train.lr_drop", float, 0.1),
                gamma=r.get("train.gamma", float, 0.0),
                seed=r.get("train.seed", int, 0),
                baseline=r.get("train.baseline", str, "none"),
                swa_alpha=r.get("train.swa_alpha", float, 0.995),
                awp_delta=r.get("train.awp_delta", float, 0.005),
                eval_restarts=r.get("train.eval_restarts", int, 1))
        except ValueError as exc:
            r.err("train.epochs", str(exc))

        if r.has("pacbayes.sigma0_sq") or r.has("pacbayes.beta"):
            if not (r.has("pacbayes.sigma0_sq") and r.has("pacbayes.beta")):
                r.err("pacbayes.beta", "sigma0_sq and beta must be given together")
            try:
                cfg.pacbayes = PacBayesConfig(
                    sigma0_sq=r.get("pacbayes.sigma0_sq", float),
                    beta=r.get("pacbayes.beta", float),
                    tau=r.get("pacbayes.tau", float, 0.05),
                    m=r.get("pacbayes.m", int, max(1, cfg.dataset_n)),
                    c_const=r.get("pacbayes.c_const", float, 0.0))
            except ValueError as exc:
                r.err("pacbayes.sigma0_sq", str(exc))
            explicit_gamma = r.has("train.gamma")
            explicit_lam = r.has("trh.lambda")
            if explicit_gamma and not cfg.pacbayes.consistent_with(
                    cfg.train.gamma, cfg.pacbayes.lam):
                r.err("train.gamma",
                      f"gamma={cfg.train.gamma} inconsistent with "
                      f"1/(2 beta sigma0_sq)={cfg.pacbayes.gamma}")
            if explicit_lam and abs(cfg.trh.lam - cfg.pacbayes.lam) > 1e-12 * max(
                    1.0, cfg.pacbayes.lam):
                r.err("trh.lambda",
                      f"lambda={cfg.trh.lam} inconsistent with "
                      f"sigma0_sq/2={cfg.pacbayes.lam}")

        cfg.out_dir = r.get("out.dir", str, cfg.out_dir)
        return cfg

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_text(fh.read())

    # -- experiment assembly -------------------------------------------

    def build_dataset(self) -> Dataset:
        if self.dataset_kind == "two_moons":
            ds = two_moons(self.dataset_n, self.dataset_noise_std,
                           seed=self.dataset_seed)
        else:
            ds = load_csv(self.dataset_path)
        if self.dataset_normalize:
            ds = normalize_center(ds)
        return ds

    def effective_attack(self, ds: Dataset) -> AttackConfig:
        """Attack with its raw-unit radius rescaled into data units."""
        if ds.scale is not None and ds.scale != 1.0:
            return self.attack.scaled(1.0 / ds.scale)
        return self.attack

    def build_network(self, ds: Dataset, seed: int | None = None) -> MlpNetwork:
        seed = self.train.seed if seed is None else seed
        dims = [ds.inputs.shape[1]] + list(self.hidden) + [ds.num_classes]
        return init_mlp(dims, Rng(seed).child("init"),
                        hidden_bias=self.hidden_bias)

    def with_overrides(self, **kwargs) -> "ExperimentConfig":
        import copy
        out = copy.deepcopy(self)
        for k, v in kwargs.items():
            if not hasattr(out, k):
                raise ConfigError(f"unknown override {k!r}")
            setattr(out, k, v)
        return out
