"""Experiment configuration: dotted key-value files, defaults, validation,
and a canonical 64-bit FNV-1a config hash.

Format example::

    # comment
    surrogate.lambda_cyc = 0.05
    dataset.n_train = 2000

Unknown keys and type mismatches are rejected with the offending line number.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


class ConfigError(ValueError):
    pass


def _parse_bool(s):
    if s.lower() in ("true", "1", "yes"):
        return True
    if s.lower() in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_float_list(s):
    return tuple(float(v) for v in s.split(",") if v.strip())


def _parse_int_list(s):
    return tuple(int(v) for v in s.split(",") if v.strip())


@dataclass
class ExperimentConfig:
    # dataset
    n_train: int = 2000
    n_val: int = 500
    image_size: int = 32
    n_band: int = 4
    n_sca: int = 8
    d_in: int = 5
    dataset_seed: int = 0
    # wae
    latent_dim: int = 32
    gamma_s: float = 1e2
    gamma_a: float = 1e-3
    wae_epochs: int = 120
    wae_patience: int = 30
    # inverse
    inverse_epochs: int = 200
    n_members: int = 5
    fraction: float = 0.5
    member_epochs: int = 100
    # surrogate
    lambda_cyc: float = 0.05
    surrogate_epochs: int = 60
    baseline: bool = False
    baseline_epochs: int = 60
    # eval
    sigma: float = 0.1
    scan_bases: int = 20
    scan_steps: int = 100
    fractions: tuple = (0.1, 0.25, 0.5, 1.0)
    sweep_lambdas: tuple = (0.0, 0.05)
    sweep_seeds: tuple = (0, 1, 2)
    # optimizer
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 128


# dotted config key -> (dataclass field, parser)
SCHEMA = {
    "dataset.n_train": ("n_train", int),
    "dataset.n_val": ("n_val", int),
    "dataset.image_size": ("image_size", int),
    "dataset.n_band": ("n_band", int),
    "dataset.n_sca": ("n_sca", int),
    "dataset.d_in": ("d_in", int),
    "dataset.seed": ("dataset_seed", int),
    "wae.latent_dim": ("latent_dim", int),
    "wae.gamma_s": ("gamma_s", float),
    "wae.gamma_a": ("gamma_a", float),
    "wae.epochs": ("wae_epochs", int),
    "wae.patience": ("wae_patience", int),
    "inverse.epochs": ("inverse_epochs", int),
    "inverse.n_members": ("n_members", int),
    "inverse.fraction": ("fraction", float),
    "inverse.member_epochs": ("member_epochs", int),
    "surrogate.lambda_cyc": ("lambda_cyc", float),
    "surrogate.epochs": ("surrogate_epochs", int),
    "surrogate.baseline": ("baseline", _parse_bool),
    "surrogate.baseline_epochs": ("baseline_epochs", int),
    "eval.sigma": ("sigma", float),
    "eval.scan_bases": ("scan_bases", int),
    "eval.scan_steps": ("scan_steps", int),
    "eval.fractions": ("fractions", _parse_float_list),
    "eval.sweep_lambdas": ("sweep_lambdas", _parse_float_list),
    "eval.sweep_seeds": ("sweep_seeds", _parse_int_list),
    "optimizer.lr": ("lr", float),
    "optimizer.beta1": ("beta1", float),
    "optimizer.beta2": ("beta2", float),
    "optimizer.eps": ("eps", float),
    "optimizer.batch_size": ("batch_size", int),
}

_POSITIVE = ("n_train", "n_val", "image_size", "n_band", "n_sca", "d_in",
             "latent_dim", "gamma_s", "gamma_a", "wae_epochs", "wae_patience",
             "inverse_epochs", "n_members", "member_epochs", "surrogate_epochs",
             "baseline_epochs", "scan_bases", "scan_steps", "lr", "eps",
             "batch_size")


def validate(cfg: ExperimentConfig):
    for name in _POSITIVE:
        if getattr(cfg, name) <= 0:
            raise ConfigError(f"{name} must be positive, got {getattr(cfg, name)}")
    if cfg.lambda_cyc < 0:
        raise ConfigError(f"surrogate.lambda_cyc must be >= 0, got {cfg.lambda_cyc}")
    if not 0.0 < cfg.fraction <= 1.0:
        raise ConfigError(f"inverse.fraction must be in (0, 1], got {cfg.fraction}")
    if cfg.sigma < 0:
        raise ConfigError(f"eval.sigma must be >= 0, got {cfg.sigma}")
    if not 0.0 < cfg.beta1 < 1.0 or not 0.0 < cfg.beta2 < 1.0:
        raise ConfigError("optimizer betas must lie in (0, 1)")
    for f in cfg.fractions:
        if not 0.0 < f <= 1.0:
            raise ConfigError(f"eval.fractions entries must be in (0, 1], got {f}")
    for lam in cfg.sweep_lambdas:
        if lam < 0:
            raise ConfigError(f"eval.sweep_lambdas entries must be >= 0, got {lam}")
    if cfg.d_in != 5:
        raise ConfigError("dataset.d_in is fixed at 5 by the built-in simulator")
    if cfg.n_sca != 8:
        raise ConfigError("dataset.n_sca is fixed at 8 by the built-in simulator")
    if cfg.image_size % 16 != 0:
        raise ConfigError("dataset.image_size must be a multiple of 16")
    return cfg


def parse_config(path=None):
    """Parse a config file (None or empty file -> all defaults)."""
    cfg = ExperimentConfig()
    if path is None:
        return validate(cfg)
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw.rstrip()!r}")
            key, val = (part.strip() for part in line.split("=", 1))
            if key not in SCHEMA:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            attr, parser = SCHEMA[key]
            try:
                setattr(cfg, attr, parser(val))
            except ValueError as exc:
                raise ConfigError(f"{path}:{lineno}: bad value for {key}: {exc}") from exc
    return validate(cfg)


def fnv1a_64(data: bytes) -> int:
    h = FNV_OFFSET
    for b in data:
        h ^= b
        h = (h * FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def canonical_serialization(cfg: ExperimentConfig) -> str:
    """Stable text form: schema keys sorted, parsed values repr'd, so key
    order and numeric spelling in the source file do not matter."""
    lines = []
    by_attr = {attr: key for key, (attr, _) in SCHEMA.items()}
    for f in fields(cfg):
        lines.append(f"{by_attr[f.name]}={getattr(cfg, f.name)!r}")
    return "\n".join(sorted(lines)) + "\n"


def config_hash(cfg: ExperimentConfig) -> str:
    return f"{fnv1a_64(canonical_serialization(cfg).encode()):016x}"


# fixed fan-out offsets so stages can be rerun in isolation
STAGE_OFFSETS = {
    "dataset": 0,
    "wae": 1,
    "inverse": 2,
    "ensemble": 3,
    "surrogate": 4,
    "baseline": 5,
    "eval": 6,
    "sweep": 7,
}


def stage_seed(global_seed: int, stage: str) -> int:
    return int(global_seed) * 1000 + STAGE_OFFSETS[stage]
