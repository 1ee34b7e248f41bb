"""Typed TOML run configs.

Sections data/model/train/eval plus a top-level `seed`. Every key has a
declared type and default; unknown keys are hard errors so a typo cannot
silently fall back to a default. `resolved()` returns the fully-defaulted
dict that the run manifest echoes (enough to re-run bit-identically).
"""

from __future__ import annotations

import sys
from dataclasses import dataclass
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .data import COVARIATE_KINDS, SyntheticSpec
from .errors import ConfigurationError
from .model import STRATEGIES, ModelConfig
from .training import MAX_ITERATIONS, TrainConfig


def _check_type(section: str, key: str, value, expected):
    if expected is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if expected is int and isinstance(value, bool):
        raise ConfigurationError(f"[{section}] {key} must be an integer, got a boolean")
    if not isinstance(value, expected):
        raise ConfigurationError(
            f"[{section}] {key} must be {expected.__name__}, got {type(value).__name__}"
        )
    return value


def _parse_section(section: str, raw: dict, schema: dict) -> dict:
    unknown = set(raw) - set(schema)
    if unknown:
        raise ConfigurationError(f"unknown key(s) in [{section}]: {', '.join(sorted(unknown))}")
    out = {}
    for key, (expected, default) in schema.items():
        if key not in raw:
            out[key] = default
            continue
        value = raw[key]
        if expected in (int, float, str, bool):
            out[key] = _check_type(section, key, value, expected)
        elif expected == "int_list":
            if not isinstance(value, list) or not all(
                isinstance(v, int) and not isinstance(v, bool) for v in value
            ):
                raise ConfigurationError(f"[{section}] {key} must be a list of integers")
            out[key] = list(value)
        elif expected == "float_list":
            if not isinstance(value, list) or not all(
                isinstance(v, (int, float)) and not isinstance(v, bool) for v in value
            ):
                raise ConfigurationError(f"[{section}] {key} must be a list of numbers")
            out[key] = [float(v) for v in value]
        else:  # pragma: no cover - schema bug
            raise ConfigurationError(f"bad schema entry for [{section}] {key}")
    return out


DATA_SCHEMA = {
    "source_csv": (str, ""),
    "target_csv": (str, ""),
    "history": (int, 144),
    "horizon": (int, 18),
    "freq": (str, "positional"),
    "fractions": ("float_list", [1 / 3, 1 / 3, 1 / 3]),
    "stride": (int, 1),
}

MODEL_SCHEMA = {
    "hidden": (int, 64),
    "kernel_sizes": ("int_list", [3, 5]),
    "mlp_layers": (int, 1),
    "strategy": (str, "full"),
    "disc_features": (str, "all"),
}

TRAIN_SCHEMA = {
    "lambda": (float, 1.0),
    "lr": (float, 1e-3),
    "epochs": (int, 100),
    "batch_size": (int, 64),
    "patience": (int, 10),
    "eval_every": (int, 0),  # 0: once per epoch
    "adversarial": (bool, True),
    "max_steps": (int, MAX_ITERATIONS),
}

EVAL_SCHEMA = {
    "split": (str, "test"),
    "batch_size": (int, 256),
}

SYNTH_SCHEMA = {
    "n_series": (int, 100),
    "history": (int, 144),
    "horizon": (int, 18),
    "amp_min": (float, 0.5),
    "amp_max": (float, 5.0),
    "level_min": (float, -3.0),
    "level_max": (float, 3.0),
    "freq_min": (float, -1.0),  # -1: default band edge 1/history
    "freq_max": (float, -1.0),  # -1: default band edge 20/history
    "noise_std": (float, 0.2),
}


@dataclass(frozen=True)
class RunConfig:
    seed: int
    data: dict
    model: dict
    train: dict
    eval: dict

    def resolved(self) -> dict:
        return {
            "seed": self.seed,
            "data": dict(self.data),
            "model": dict(self.model),
            "train": dict(self.train),
            "eval": dict(self.eval),
        }

    def model_config(self) -> ModelConfig:
        n_cov = 0 if self.data["freq"] == "none" else 2
        strategy = self.model["strategy"]
        if strategy not in STRATEGIES:
            raise ConfigurationError(f"strategy must be one of {STRATEGIES}, got {strategy!r}")
        return ModelConfig(
            hidden=self.model["hidden"],
            kernel_sizes=tuple(self.model["kernel_sizes"]),
            mlp_layers=self.model["mlp_layers"],
            n_covariates=n_cov,
            disc_features=self.model["disc_features"],
        )

    def train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(
            lam=t["lambda"],
            lr=t["lr"],
            epochs=t["epochs"],
            batch_size=t["batch_size"],
            patience=t["patience"],
            eval_every=t["eval_every"] or None,
            strategy=self.model["strategy"],
            adversarial=t["adversarial"],
            seed=self.seed,
            max_steps=t["max_steps"],
        )

    def fractions(self) -> tuple[float, float, float]:
        fr = self.data["fractions"]
        if len(fr) != 3:
            raise ConfigurationError(f"fractions must have 3 entries, got {len(fr)}")
        return tuple(fr)


def _load_toml(path: str | Path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid TOML: {exc}") from exc


def load_run_config(path: str | Path, overrides: dict | None = None) -> RunConfig:
    """Parse a run config; `overrides` may set seed/strategy/lambda (CLI)."""
    raw = _load_toml(path)
    known_sections = {"data", "model", "train", "eval"}
    unknown = set(raw) - known_sections - {"seed"}
    if unknown:
        raise ConfigurationError(f"unknown section(s)/key(s): {', '.join(sorted(unknown))}")
    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigurationError("top-level seed must be an integer")
    cfg = RunConfig(
        seed=seed,
        data=_parse_section("data", raw.get("data", {}), DATA_SCHEMA),
        model=_parse_section("model", raw.get("model", {}), MODEL_SCHEMA),
        train=_parse_section("train", raw.get("train", {}), TRAIN_SCHEMA),
        eval=_parse_section("eval", raw.get("eval", {}), EVAL_SCHEMA),
    )
    overrides = overrides or {}
    if overrides.get("seed") is not None:
        cfg = RunConfig(**{**cfg.__dict__, "seed": overrides["seed"]})
    if overrides.get("strategy") is not None:
        model = {**cfg.model, "strategy": overrides["strategy"]}
        cfg = RunConfig(**{**cfg.__dict__, "model": model})
    if overrides.get("lam") is not None:
        train = {**cfg.train, "lambda": float(overrides["lam"])}
        cfg = RunConfig(**{**cfg.__dict__, "train": train})
    if cfg.data["freq"] not in COVARIATE_KINDS:
        raise ConfigurationError(
            f"[data] freq must be one of {COVARIATE_KINDS}, got {cfg.data['freq']!r}"
        )
    return cfg


def load_synth_config(
    path: str | Path, seed_override: int | None = None
) -> tuple[int, dict[str, SyntheticSpec], dict]:
    """Parse a generation spec with [source] and/or [target] sections.

    Returns (seed, {domain: SyntheticSpec}, resolved echo dict).
    """
    raw = _load_toml(path)
    unknown = set(raw) - {"seed", "source", "target"}
    if unknown:
        raise ConfigurationError(f"unknown section(s)/key(s): {', '.join(sorted(unknown))}")
    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigurationError("top-level seed must be an integer")
    if seed_override is not None:
        seed = seed_override
    domains = [d for d in ("source", "target") if d in raw]
    if not domains:
        raise ConfigurationError("spec needs a [source] and/or [target] section")
    specs: dict[str, SyntheticSpec] = {}
    echo: dict = {"seed": seed}
    from .seeding import seed_for

    for dom in domains:
        section = _parse_section(dom, raw[dom], SYNTH_SCHEMA)
        echo[dom] = dict(section)
        specs[dom] = SyntheticSpec(
            n_series=section["n_series"],
            history=section["history"],
            horizon=section["horizon"],
            amp_min=section["amp_min"],
            amp_max=section["amp_max"],
            level_min=section["level_min"],
            level_max=section["level_max"],
            freq_min=None if section["freq_min"] < 0 else section["freq_min"],
            freq_max=None if section["freq_max"] < 0 else section["freq_max"],
            noise_std=section["noise_std"],
            seed=seed_for(seed, "datagen", dom),
        )
    return seed, specs, echo
