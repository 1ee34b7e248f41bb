"""The ND metric, forecast evaluation, and the synthetic experiment
protocols (cold-start, few-shot, ablations) at desk or paper scale.

ND pools absolute errors over every forecast position of every window before
dividing - it is a single ratio, never an average of per-window ratios - and
is always computed on descaled values.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .data import DatasetSplit, SeriesWindow, SyntheticSpec, generate_sinusoids, make_windows, split_dataset
from .errors import ConfigurationError, MetricError
from .model import ModelConfig, WindowBatch, generator_forward
from .numerics import ParamStore, no_grad
from .seeding import seed_for
from .training import TrainConfig, TrainResult, fit

EVAL_BATCH = 256


@dataclass(frozen=True)
class NDResult:
    nd: float
    numerator: float
    denominator: float

    @staticmethod
    def from_sums(numerator: float, denominator: float) -> "NDResult":
        if denominator <= 0:
            raise MetricError("ND undefined: sum of |truth| is zero")
        return NDResult(nd=numerator / denominator, numerator=numerator, denominator=denominator)

    def merge(self, other: "NDResult") -> "NDResult":
        return NDResult.from_sums(
            self.numerator + other.numerator, self.denominator + other.denominator
        )


def nd_metric(truth: np.ndarray, predictions: np.ndarray) -> NDResult:
    """Pooled sum|z - zhat| / sum|z| over all windows and horizons."""
    truth = np.asarray(truth, dtype=np.float64)
    predictions = np.asarray(predictions, dtype=np.float64)
    if truth.shape != predictions.shape:
        raise MetricError(f"shape mismatch: truth {truth.shape} vs pred {predictions.shape}")
    return NDResult.from_sums(
        float(np.abs(truth - predictions).sum()), float(np.abs(truth).sum())
    )


def predict_windows(
    store: ParamStore,
    model_cfg: ModelConfig,
    strategy: str,
    windows: list[SeriesWindow],
    domain: str = "tgt",
    batch_size: int = EVAL_BATCH,
) -> np.ndarray:
    """Descaled forecasts, shape (n_windows, horizon)."""
    preds = []
    with no_grad():
        for start in range(0, len(windows), batch_size):
            batch = WindowBatch.from_windows(windows[start : start + batch_size])
            out = generator_forward(
                batch, store, model_cfg, strategy, domain,
                forecast_only=True, need_embeddings=False,
            )
            preds.append(batch.descale(out.yhat.data))
    return np.concatenate(preds, axis=0)


def evaluate_nd(
    store: ParamStore,
    model_cfg: ModelConfig,
    strategy: str,
    windows: list[SeriesWindow],
    domain: str = "tgt",
) -> NDResult:
    preds = predict_windows(store, model_cfg, strategy, windows, domain=domain)
    truth = np.stack([w.y for w in windows])
    return nd_metric(truth, preds)


# -- experiment protocols --------------------------------------------------------

TARGET_PERIOD = 36  # target sinusoid period (history covers 1-1.5 periods)


@dataclass(frozen=True)
class ProtocolSettings:
    """Everything a protocol cell needs besides the varied quantity."""

    scale: str
    n_source: int
    n_target: int
    source_history: int
    target_history: int
    horizon: int
    n_seeds: int
    epochs: int
    patience: int
    batch_size: int
    noise_std: float = 0.2
    lam: float = 1.0
    lr: float = 1e-3
    hidden: int = 64
    kernel_sizes: tuple[int, ...] = (3, 5)
    mlp_layers: int = 1
    covariates: str = "positional"
    fractions: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)
    max_steps: int = 100_000

    def model_config(self) -> ModelConfig:
        n_cov = 0 if self.covariates == "none" else 2
        return ModelConfig(
            hidden=self.hidden,
            kernel_sizes=self.kernel_sizes,
            mlp_layers=self.mlp_layers,
            n_covariates=n_cov,
        )


def protocol_settings(protocol: str, scale: str, overrides: dict | None = None) -> ProtocolSettings:
    """Defaults per protocol and scale; `overrides` may replace any field."""
    if scale not in ("desk", "paper"):
        raise ConfigurationError(f"scale must be desk|paper, got {scale!r}")
    if protocol in ("few-shot", "ablation"):
        base = dict(source_history=144, target_history=144, horizon=18, n_target=100)
    elif protocol == "cold-start":
        base = dict(source_history=144, target_history=45, horizon=18)
    else:
        raise ConfigurationError(f"unknown protocol {protocol!r}")
    if scale == "desk":
        base.update(
            n_source=1000,
            n_seeds=3,
            epochs=240 if protocol in ("few-shot", "ablation") else 40,
            patience=30,
            batch_size=64,
        )
        if protocol == "cold-start":
            base["n_target"] = 1000
    else:
        base.update(n_source=5000, n_seeds=5, epochs=1000, patience=50, batch_size=64)
        if protocol == "cold-start":
            base["n_target"] = 5000
    settings = ProtocolSettings(scale=scale, **base)
    if overrides:
        valid = set(settings.__dataclass_fields__)
        unknown = set(overrides) - valid
        if unknown:
            raise ConfigurationError(f"unknown protocol overrides: {sorted(unknown)}")
        settings = replace(settings, **overrides)
    return settings


def _cell_data(
    settings: ProtocolSettings, root_seed: int, cell: str, seed_idx: int
) -> tuple[DatasetSplit, DatasetSplit]:
    """Source and target splits for one protocol cell; independent of the
    model/variant so every variant trains on identical data."""
    src_spec = SyntheticSpec(
        n_series=settings.n_source,
        history=settings.source_history,
        horizon=settings.horizon,
        noise_std=settings.noise_std,
        seed=seed_for(root_seed, "datagen", cell, seed_idx, "src"),
    )
    tgt_freq = 1.0 / TARGET_PERIOD
    tgt_spec = SyntheticSpec(
        n_series=settings.n_target,
        history=settings.target_history,
        horizon=settings.horizon,
        freq_min=tgt_freq,
        freq_max=tgt_freq,
        noise_std=settings.noise_std,
        seed=seed_for(root_seed, "datagen", cell, seed_idx, "tgt"),
    )

    def build(spec: SyntheticSpec, domain: str, label: str) -> DatasetSplit:
        series = list(generate_sinusoids(spec))
        windows = make_windows(
            series, spec.history, spec.horizon, covariates=settings.covariates, domain=domain
        )
        return split_dataset(
            windows,
            fractions=settings.fractions,
            seed=seed_for(root_seed, "split", cell, seed_idx, label),
        )

    return build(src_spec, "source", "src"), build(tgt_spec, "target", "tgt")


VARIANT_STRATEGIES = {
    "attf": ("attf", False),
    "daf": ("full", True),
    "no-adv": ("full", False),
    "no-q-share": ("no-q-share", True),
    "no-k-share": ("no-k-share", True),
    "v-share": ("v-share", True),
}


def train_variant(
    variant: str,
    source: DatasetSplit,
    target: DatasetSplit,
    settings: ProtocolSettings,
    seed: int,
) -> TrainResult:
    if variant not in VARIANT_STRATEGIES:
        raise ConfigurationError(f"unknown variant {variant!r}")
    strategy, adversarial = VARIANT_STRATEGIES[variant]
    cfg = TrainConfig(
        lam=settings.lam,
        lr=settings.lr,
        epochs=settings.epochs,
        batch_size=settings.batch_size,
        patience=settings.patience,
        strategy=strategy,
        adversarial=adversarial,
        seed=seed,
        max_steps=settings.max_steps,
    )
    return fit(None if strategy == "attf" else source, target, settings.model_config(), cfg)


@dataclass
class CellReport:
    """Mean/std ND over seeds for one (cell, model) pair."""

    protocol: str
    cell: dict
    model: str
    per_seed_nd: list[float]
    mean: float | None
    std: float | None

    error: str | None = None

    @staticmethod
    def from_nds(
        protocol: str, cell: dict, model: str, nds: list[float], error: str | None = None
    ) -> "CellReport":
        arr = np.asarray(nds, dtype=np.float64)
        ok = len(nds) > 0
        return CellReport(
            protocol=protocol,
            cell=dict(cell),
            model=model,
            per_seed_nd=[float(v) for v in arr],
            mean=float(arr.mean()) if ok else None,
            std=float(arr.std()) if ok else None,
            error=error,
        )

    def to_dict(self) -> dict:
        return {
            "protocol": self.protocol,
            "cell": self.cell,
            "model": self.model,
            "per_seed_nd": self.per_seed_nd,
            "mean": self.mean,
            "std": self.std,
            "error": self.error,
        }


@dataclass
class ExperimentReport:
    protocol: str
    scale: str
    seed: int
    settings: dict
    cells: list[CellReport]
    runtime_seconds: float = 0.0  # recorded in the run manifest, not the report files

    def to_dict(self) -> dict:
        return {
            "protocol": self.protocol,
            "scale": self.scale,
            "seed": self.seed,
            "settings": self.settings,
            "cells": [c.to_dict() for c in self.cells],
        }


def _run_grid(
    protocol: str,
    cells: list[dict],
    models: list[str],
    settings: ProtocolSettings,
    root_seed: int,
    log=None,
) -> ExperimentReport:
    t0 = time.time()
    reports: list[CellReport] = []
    for cell in cells:
        cell_key = ",".join(f"{k}={v}" for k, v in sorted(cell.items()))
        cell_settings = replace(settings, **cell)
        nds: dict[str, list[float]] = {m: [] for m in models}
        errors: dict[str, str] = {}
        for seed_idx in range(settings.n_seeds):
            source, target = _cell_data(cell_settings, root_seed, cell_key, seed_idx)
            for model in models:
                if model in errors:
                    continue
                seed = seed_for(root_seed, "train", cell_key, seed_idx, model)
                try:
                    result = train_variant(model, source, target, cell_settings, seed)
                    nd = evaluate_nd(
                        result.params, cell_settings.model_config(),
                        VARIANT_STRATEGIES[model][0], target.test,
                    ).nd
                except Exception as exc:  # record the cell failure, keep going
                    errors[model] = f"{type(exc).__name__}: {exc}"
                    if log:
                        log(f"{protocol} {cell_key} seed {seed_idx} {model}: FAILED ({exc})")
                    continue
                nds[model].append(nd)
                if log:
                    log(f"{protocol} {cell_key} seed {seed_idx} {model}: test ND {nd:.4f}")
        for model in models:
            reports.append(
                CellReport.from_nds(protocol, cell, model, nds[model], errors.get(model))
            )
    settings_dict = {k: getattr(settings, k) for k in settings.__dataclass_fields__}
    settings_dict["kernel_sizes"] = list(settings.kernel_sizes)
    settings_dict["fractions"] = list(settings.fractions)
    return ExperimentReport(
        protocol=protocol,
        scale=settings.scale,
        seed=root_seed,
        settings=settings_dict,
        cells=reports,
        runtime_seconds=time.time() - t0,
    )


def run_few_shot(
    seed: int = 0,
    scale: str = "desk",
    n_values: tuple[int, ...] = (20, 50, 100),
    overrides: dict | None = None,
    log=None,
) -> ExperimentReport:
    settings = protocol_settings("few-shot", scale, overrides)
    cells = [{"n_target": n} for n in n_values]
    return _run_grid("few-shot", cells, ["attf", "daf"], settings, seed, log=log)


def run_cold_start(
    seed: int = 0,
    scale: str = "desk",
    t_values: tuple[int, ...] = (36, 45, 54),
    overrides: dict | None = None,
    log=None,
) -> ExperimentReport:
    settings = protocol_settings("cold-start", scale, overrides)
    cells = [{"target_history": t} for t in t_values]
    return _run_grid("cold-start", cells, ["attf", "daf"], settings, seed, log=log)


ABLATION_VARIANTS = ("no-adv", "no-q-share", "no-k-share", "v-share", "daf")


def run_ablations(
    seed: int = 0,
    scale: str = "desk",
    variants: tuple[str, ...] = ABLATION_VARIANTS,
    overrides: dict | None = None,
    log=None,
) -> ExperimentReport:
    settings = protocol_settings("ablation", scale, overrides)
    return _run_grid("ablation", [{"n_target": settings.n_target}], list(variants), settings, seed, log=log)


def format_report_table(report: ExperimentReport) -> str:
    """Aligned text table: one row per cell, one column per model."""
    models = []
    for c in report.cells:
        if c.model not in models:
            models.append(c.model)
    by_cell: dict[str, dict[str, CellReport]] = {}
    cell_order = []
    for c in report.cells:
        key = ",".join(f"{k}={v}" for k, v in sorted(c.cell.items()))
        if key not in by_cell:
            by_cell[key] = {}
            cell_order.append(key)
        by_cell[key][c.model] = c

    label = {"attf": "AttF", "daf": "DAF"}
    headers = [report.protocol] + [label.get(m, m) for m in models]
    rows = []
    for key in cell_order:
        row = [key]
        for m in models:
            c = by_cell[key].get(m)
            if c is None or c.mean is None:
                row.append("failed" if c is not None and c.error else "-")
            else:
                row.append(f"{c.mean:.3f}+/-{c.std:.3f}")
        rows.append(row)
    widths = [max(len(r[i]) for r in [headers] + rows) for i in range(len(headers))]
    lines = ["  ".join(h.ljust(w) for h, w in zip(headers, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for row in rows:
        lines.append("  ".join(v.ljust(w) for v, w in zip(row, widths)))
    return "\n".join(lines) + "\n"
