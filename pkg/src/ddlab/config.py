"""Flat ``key = value`` run configuration.

One file drives every command. Blank lines and ``#`` comments are ignored;
list values are comma separated; ``gamma = auto`` selects the bin-width
default. Unknown keys are rejected.
"""

from __future__ import annotations

from pathlib import Path

from .losses import DDLWeights
from .synth import SynthConfig
from .trainer import MODES, TrainConfig


class ConfigError(ValueError):
    pass


def _floats(s):
    return tuple(float(x) for x in s.split(",") if x.strip())


def _ints(s):
    return tuple(int(x) for x in s.split(",") if x.strip())


def _strs(s):
    return tuple(x.strip() for x in s.split(",") if x.strip())


def _gamma(s):
    return None if s.strip().lower() in ("auto", "none", "") else float(s)


def _mode(s):
    if s not in MODES:
        raise ValueError(f"expected one of {', '.join(MODES)}")
    return s


# key -> (parser, default). Objective and optimizer defaults are the conventional
# full-scale values; configs/reference.cfg holds the tuned synthetic setup.
SCHEMA = {
    # data
    "n_identities": (int, 200),
    "samples_per_identity": (int, 6),
    "dim": (int, 32),
    "easy_sigma": (float, 0.05),
    "hard_sigmas": (_floats, (0.06, 0.08)),
    "hard_ranks": (_ints, (12, 8)),
    "seed": (int, 0),
    "split_fraction": (float, 0.5),
    # encoder
    "hidden": (_ints, (64,)),
    "embed_dim": (int, 16),
    "activation": (str, "tanh"),
    # objective
    "lambda_pos": (float, 0.1),
    "lambda_neg": (float, 0.02),
    "lambda_order": (float, 0.5),
    "scale": (float, 64.0),
    "margin": (float, 0.5),
    "bins": (int, 100),
    "gamma": (_gamma, None),
    "order_pairs": (str, "cross"),
    # optimization
    "mode": (_mode, "ddl"),
    "b": (int, 16),
    "K": (int, 2),
    "iterations": (int, 1000),
    "lr": (float, 1e-3),
    "momentum": (float, 0.9),
    "weight_decay": (float, 5e-4),
    "pretrain_iterations": (int, 1000),
    "pretrain_lr": (float, 1e-3),
    "max_retries": (int, 3),
    # evaluation
    "eval_every": (float, 0.1),
    "eval_rounds": (int, 4),
    "eval_seed": (int, 12345),
    "gallery_per_identity": (int, 3),
    "far_grid": (_floats, (1e-3, 1e-2, 1e-1)),
    # ablation
    "ablate_modes": (_strs, ("finetune-plain", "kl-only", "order-only", "ddl", "ddl-random-mining", "ddl-mixture")),
    "ablate_seeds": (_ints, (0, 1, 2)),
}


def defaults() -> dict:
    return {k: d for k, (_, d) in SCHEMA.items()}


def parse_config(text: str, source: str = "<config>") -> dict:
    cfg = defaults()
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value', got {line!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{n}: unknown config key {key!r}")
        parser, _ = SCHEMA[key]
        try:
            cfg[key] = parser(value)
        except ValueError as exc:
            raise ConfigError(f"{source}:{n}: bad value for {key!r}: {exc}") from None
    return cfg


def load_config(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, str(path))


def normalize(cfg: dict) -> dict:
    """Fill defaults and check keys of an already-parsed dict (e.g. from a manifest)."""
    out = defaults()
    for k, v in cfg.items():
        if k not in SCHEMA:
            raise ConfigError(f"unknown config key {k!r}")
        out[k] = tuple(v) if isinstance(v, list) else v
    return out


def to_jsonable(cfg: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in sorted(cfg.items())}


def synth_config(cfg: dict) -> SynthConfig:
    return SynthConfig(
        n_identities=cfg["n_identities"],
        samples_per_identity=cfg["samples_per_identity"],
        dim=cfg["dim"],
        easy_sigma=cfg["easy_sigma"],
        hard_sigmas=cfg["hard_sigmas"],
        hard_ranks=cfg["hard_ranks"],
        seed=cfg["seed"],
    )


def train_config(cfg: dict, **overrides) -> TrainConfig:
    weights = DDLWeights(cfg["lambda_pos"], cfg["lambda_neg"], cfg["lambda_order"], cfg["scale"], cfg["margin"])
    kw = dict(
        b=cfg["b"],
        K=cfg["K"],
        iterations=cfg["iterations"],
        lr=cfg["lr"],
        momentum=cfg["momentum"],
        weight_decay=cfg["weight_decay"],
        weights=weights,
        bins=cfg["bins"],
        gamma=cfg["gamma"],
        seed=cfg["seed"],
        mode=cfg["mode"],
        order_pairs=cfg["order_pairs"],
        max_retries=cfg["max_retries"],
        eval_every=cfg["eval_every"],
        eval_rounds=cfg["eval_rounds"],
        eval_seed=cfg["eval_seed"],
        gallery_per_identity=cfg["gallery_per_identity"],
        far_grid=tuple(cfg["far_grid"]),
    )
    kw.update(overrides)
    return TrainConfig(**kw)


def pretrain_config(cfg: dict, **overrides) -> TrainConfig:
    kw = dict(mode="baseline", iterations=cfg["pretrain_iterations"], lr=cfg["pretrain_lr"])
    kw.update(overrides)
    return train_config(cfg, **kw)
