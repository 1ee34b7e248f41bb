"""Datasets: synthetic sinusoids, rolling windows, covariates, scaling, CSV.

Windows are immutable once built. Scaling statistics come from the history
portion only, so nothing about the future leaks into model inputs.
"""

from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, EmptyDatasetError, ParseError
from .seeding import rng_for

COVARIATE_KINDS = ("positional", "hourly", "daily", "none")


@dataclass(frozen=True)
class SeriesWindow:
    """One sample: history x (length T), future y (length tau), covariates
    spanning T+tau positions, a domain tag and an optional scaling record."""

    series_id: int
    x: np.ndarray
    y: np.ndarray
    covariates: np.ndarray  # (d_xi, T+tau); d_xi may be 0
    domain: str = "target"
    scale: tuple[float, float] | None = None  # (center, spread)

    def __post_init__(self):
        if self.x.ndim != 1 or self.y.ndim != 1:
            raise ConfigurationError("window x and y must be 1-d")
        if self.covariates.ndim != 2 or self.covariates.shape[1] != len(self.x) + len(self.y):
            raise ConfigurationError(
                f"covariates must span T+tau={len(self.x) + len(self.y)} positions, "
                f"got shape {self.covariates.shape}"
            )
        if self.scale is not None and self.scale[1] <= 0:
            raise ConfigurationError("scale spread must be positive")

    @property
    def history(self) -> int:
        return len(self.x)

    @property
    def horizon(self) -> int:
        return len(self.y)

    def full_series(self) -> np.ndarray:
        return np.concatenate([self.x, self.y])


@dataclass(frozen=True)
class SyntheticSpec:
    """Random-sinusoid population parameters."""

    n_series: int
    history: int
    horizon: int
    amp_min: float = 0.5
    amp_max: float = 5.0
    level_min: float = -3.0
    level_max: float = 3.0
    freq_min: float | None = None  # defaults to 1/history
    freq_max: float | None = None  # defaults to 20/history
    noise_std: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.n_series < 1:
            raise ConfigurationError("n_series must be >= 1")
        if self.history < 2 or self.horizon < 1:
            raise ConfigurationError("history must be >= 2 and horizon >= 1")
        if self.amp_min > self.amp_max:
            raise ConfigurationError(f"amplitude bounds inverted: {self.amp_min} > {self.amp_max}")
        if self.level_min > self.level_max:
            raise ConfigurationError(f"level bounds inverted: {self.level_min} > {self.level_max}")
        if self.noise_std < 0:
            raise ConfigurationError("noise_std must be >= 0")
        lo, hi = self.freq_bounds()
        band_lo, band_hi = 1.0 / self.history, 20.0 / self.history
        if lo > hi:
            raise ConfigurationError(f"frequency bounds inverted: {lo} > {hi}")
        if lo < band_lo - 1e-12 or hi > band_hi + 1e-12:
            raise ConfigurationError(
                f"frequency bounds [{lo:.6g}, {hi:.6g}] outside "
                f"[{band_lo:.6g}, {band_hi:.6g}] for history {self.history}"
            )

    def freq_bounds(self) -> tuple[float, float]:
        lo = self.freq_min if self.freq_min is not None else 1.0 / self.history
        hi = self.freq_max if self.freq_max is not None else 20.0 / self.history
        return lo, hi

    @property
    def length(self) -> int:
        return self.history + self.horizon


@dataclass(frozen=True)
class DatasetSplit:
    train: list[SeriesWindow]
    validation: list[SeriesWindow]
    test: list[SeriesWindow]

    def all_windows(self) -> list[SeriesWindow]:
        return [*self.train, *self.validation, *self.test]


def generate_sinusoids(spec: SyntheticSpec) -> np.ndarray:
    """Sample `n_series` series of length history+horizon.

    Each series is A*sin(2*pi*omega*t + phi) + c plus i.i.d. Gaussian noise,
    with A, c, omega uniform within the spec bounds and phi ~ Unif(-2pi, 2pi).
    Deterministic for a given spec (the seed is part of the spec).
    """
    rng = rng_for(spec.seed, "sinusoids")
    lo, hi = spec.freq_bounds()
    t = np.arange(spec.length, dtype=np.float64)
    out = np.empty((spec.n_series, spec.length), dtype=np.float64)
    for i in range(spec.n_series):
        amp = rng.uniform(spec.amp_min, spec.amp_max)
        level = rng.uniform(spec.level_min, spec.level_max)
        freq = rng.uniform(lo, hi)
        phase = rng.uniform(-2.0 * np.pi, 2.0 * np.pi)
        noise = rng.normal(0.0, spec.noise_std, size=spec.length) if spec.noise_std > 0 else 0.0
        out[i] = amp * np.sin(2.0 * np.pi * freq * t + phase) + level + noise
    return out


def time_covariates(freq: str, index: np.ndarray) -> np.ndarray:
    """Two calendar features per absolute integer index, affine-mapped to
    [-0.5, 0.5].

    hourly: (day of week, hour of day); daily: (day of week, day of month
    surrogate with period 30). Indices count hours resp. days from a Monday
    midnight origin.
    """
    index = np.asarray(index, dtype=np.int64)
    if freq == "hourly":
        dow = (index // 24) % 7
        hour = index % 24
        return np.stack([dow / 6.0 - 0.5, hour / 23.0 - 0.5])
    if freq == "daily":
        dow = index % 7
        dom = index % 30
        return np.stack([dow / 6.0 - 0.5, dom / 29.0 - 0.5])
    raise ConfigurationError(f"unknown covariate frequency {freq!r}")


def window_covariates(kind: str, length: int, origin: int = 0) -> np.ndarray:
    """Covariate matrix (d_xi, length) for one window.

    positional: in-window phase t/length mapped to [-0.5, 0.5) plus a zero
    channel (series without a calendar still get d_xi=2); hourly/daily:
    calendar features of origin+t; none: an empty (0, length) matrix.
    """
    if kind == "positional":
        phase = np.arange(length, dtype=np.float64) / length - 0.5
        return np.stack([phase, np.zeros(length)])
    if kind in ("hourly", "daily"):
        return time_covariates(kind, origin + np.arange(length))
    if kind == "none":
        return np.zeros((0, length))
    raise ConfigurationError(f"unknown covariate kind {kind!r}")


def make_windows(
    series: list[np.ndarray],
    history: int,
    horizon: int,
    stride: int = 1,
    covariates: str = "positional",
    domain: str = "target",
    series_ids: list[int] | None = None,
) -> list[SeriesWindow]:
    """All length-(history+horizon) moving windows of each series.

    Series shorter than one window are skipped with a warning; if every
    series is too short the dataset would be empty, which is an error.
    """
    if stride < 1:
        raise ConfigurationError("stride must be >= 1")
    length = history + horizon
    if series_ids is None:
        series_ids = list(range(len(series)))
    windows: list[SeriesWindow] = []
    skipped = 0
    for sid, z in zip(series_ids, series):
        z = np.asarray(z, dtype=np.float64)
        if len(z) < length:
            skipped += 1
            warnings.warn(f"series {sid} has {len(z)} < {length} points; skipped")
            continue
        for start in range(0, len(z) - length + 1, stride):
            chunk = z[start : start + length]
            windows.append(
                SeriesWindow(
                    series_id=sid,
                    x=chunk[:history].copy(),
                    y=chunk[history:].copy(),
                    covariates=window_covariates(covariates, length, origin=start),
                    domain=domain,
                )
            )
    if not windows:
        raise EmptyDatasetError(f"no windows: all {skipped} series shorter than {length}")
    return windows


def scale_window(w: SeriesWindow) -> SeriesWindow:
    """Standardize x and y by the history's mean/std (std clamped at 1e-6)."""
    center = float(w.x.mean())
    spread = max(float(w.x.std()), 1e-6)
    return replace(
        w,
        x=(w.x - center) / spread,
        y=(w.y - center) / spread,
        scale=(center, spread),
    )


def descale_predictions(y_scaled: np.ndarray, scale: tuple[float, float]) -> np.ndarray:
    """Invert scale_window's transform on predictions."""
    center, spread = scale
    return y_scaled * spread + center


def split_dataset(
    windows: list[SeriesWindow],
    fractions: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3),
    seed: int = 0,
) -> DatasetSplit:
    """Disjoint uniform-random train/validation/test assignment.

    Counts are floor(fraction*n) with leftovers assigned by largest
    fractional remainder (ties broken in train/val/test order).
    """
    if len(fractions) != 3 or any(f <= 0 for f in fractions):
        raise ConfigurationError(f"fractions must be three positive numbers, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigurationError(f"fractions must sum to 1, got {sum(fractions)}")
    n = len(windows)
    raw = [f * n for f in fractions]
    counts = [int(np.floor(r)) for r in raw]
    remainders = [r - c for r, c in zip(raw, counts)]
    for _ in range(n - sum(counts)):
        i = int(np.argmax(remainders))
        counts[i] += 1
        remainders[i] = -1.0
    if any(c == 0 for c in counts):
        raise ConfigurationError(f"a split would be empty: counts {counts} from {n} windows")
    perm = rng_for(seed, "split").permutation(n)
    bounds = np.cumsum([0] + counts)
    parts = [
        [windows[i] for i in sorted(perm[a:b])] for a, b in zip(bounds[:-1], bounds[1:])
    ]
    return DatasetSplit(*parts)


def export_csv(series: np.ndarray | list[np.ndarray], path: str | Path) -> None:
    """Write series in the long format `series_id,t,value` (t starts at 0)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["series_id", "t", "value"])
        for sid, z in enumerate(series):
            for t, v in enumerate(np.asarray(z, dtype=np.float64)):
                writer.writerow([sid, t, repr(float(v))])


def read_series_csv(path: str | Path) -> tuple[list[int], list[np.ndarray]]:
    """Parse a long-format CSV into per-series value arrays.

    Requires the exact header `series_id,t,value` and consecutive integer t
    per series; violations raise ParseError with the 1-based line number.
    """
    with open(path, "r", newline="") as fh:
        return _read_series(fh)


def _read_series(fh: io.TextIOBase) -> tuple[list[int], list[np.ndarray]]:
    reader = csv.reader(fh)
    try:
        header = next(reader)
    except StopIteration:
        raise ParseError("empty file", line=1) from None
    if [h.strip() for h in header] != ["series_id", "t", "value"]:
        raise ParseError(f"expected header series_id,t,value, got {','.join(header)}", line=1)
    values: dict[int, list[float]] = {}
    last_t: dict[int, int] = {}
    order: list[int] = []
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != 3:
            raise ParseError(f"expected 3 fields, got {len(row)}", line=lineno)
        try:
            sid = int(row[0])
            t = int(row[1])
            v = float(row[2])
        except ValueError as exc:
            raise ParseError(f"non-numeric field: {exc}", line=lineno) from None
        if not np.isfinite(v):
            raise ParseError(f"non-finite value {row[2]}", line=lineno)
        if sid not in values:
            values[sid] = []
            order.append(sid)
            if t != 0:
                raise ParseError(f"series {sid} must start at t=0, got t={t}", line=lineno)
        elif t != last_t[sid] + 1:
            raise ParseError(
                f"gap in t for series {sid}: got t={t} after t={last_t[sid]}", line=lineno
            )
        last_t[sid] = t
        values[sid].append(v)
    if not order:
        raise EmptyDatasetError("CSV contains no data rows")
    return order, [np.asarray(values[sid]) for sid in order]


def ingest_csv(
    path: str | Path,
    history: int,
    horizon: int,
    freq: str = "positional",
    fractions: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3),
    seed: int = 0,
    stride: int = 1,
    domain: str = "target",
) -> DatasetSplit:
    """Read a long-format CSV, build rolling windows and split them."""
    if freq not in COVARIATE_KINDS:
        raise ConfigurationError(f"freq must be one of {COVARIATE_KINDS}, got {freq!r}")
    ids, series = read_series_csv(path)
    windows = make_windows(
        series, history, horizon, stride=stride, covariates=freq, domain=domain, series_ids=ids
    )
    return split_dataset(windows, fractions=fractions, seed=seed)
