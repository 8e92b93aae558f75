"""CSV ingestion, chronological splits, scaling, windowing, synthetic data.

Input format: UTF-8, comma-separated, '.' decimal, header row whose first
column is "date"; every other column is one numeric channel. Parsing is
strict: ragged rows, non-numeric or missing cells are hard errors that name
the file position (1-based line and column).
"""

import warnings
from dataclasses import dataclass
from datetime import datetime, timedelta
from math import pi
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .rng import Rng


@dataclass
class SeriesTable:
    timestamps: list
    values: np.ndarray  # rows x channels, float64
    names: list

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def channels(self) -> int:
        return self.values.shape[1]

    def slice_rows(self, start: int, stop: int) -> "SeriesTable":
        return SeriesTable(self.timestamps[start:stop],
                           self.values[start:stop].copy(), list(self.names))


def load_csv(path) -> SeriesTable:
    path = Path(path)
    if not path.exists():
        raise DataError(f"data file not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DataError(f"{path}: empty file")
    header = [c.strip() for c in lines[0].split(",")]
    if not header or header[0] != "date":
        raise DataError(f"{path}: first column must be 'date', got {header[:1]}")
    if len(header) < 2:
        raise DataError(f"{path}: no value columns after the date column")
    names = header[1:]
    width = len(header)

    timestamps = []
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cells = line.split(",")
        if len(cells) != width:
            raise DataError(f"{path}: line {lineno} has {len(cells)} cells, "
                            f"expected {width}")
        timestamps.append(cells[0].strip())
        row = np.empty(width - 1)
        for col, cell in enumerate(cells[1:], start=2):
            try:
                row[col - 2] = float(cell)
            except ValueError:
                raise DataError(f"{path}: cannot parse cell at row {lineno}, "
                                f"column {col}: {cell.strip()!r}") from None
            if not np.isfinite(row[col - 2]):
                raise DataError(f"{path}: non-finite value at row {lineno}, "
                                f"column {col}")
        rows.append(row)
    if not rows:
        raise DataError(f"{path}: header only, no data rows")
    return SeriesTable(timestamps, np.array(rows), names)


def write_csv(path, table: SeriesTable) -> None:
    """Canonical form: repr() per value, so a reload is bit-exact."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(["date"] + list(table.names)) + "\n")
        for ts, row in zip(table.timestamps, table.values):
            fh.write(",".join([ts] + [repr(float(v)) for v in row]) + "\n")


def chrono_split(table: SeriesTable, ratios, lookback: int,
                 horizon: int) -> tuple[SeriesTable, SeriesTable, SeriesTable]:
    """Contiguous chronological train/val/test segments.

    Validation and test keep a borrowed lookback of L rows from the segment
    before them, so their first forecast label sits exactly on the segment
    border and no label ever crosses it.
    """
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ConfigError(f"need three positive split ratios, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must sum to 1, got {sum(ratios)}")
    n = table.rows
    n_train = int(n * ratios[0])
    n_val = int(n * ratios[1])
    train = table.slice_rows(0, n_train)
    val = table.slice_rows(n_train - lookback, n_train + n_val)
    test = table.slice_rows(n_train + n_val - lookback, n)
    need = lookback + horizon
    for name, part in (("train", train), ("val", val), ("test", test)):
        if part.rows < need:
            raise DataError(f"{name} split has {part.rows} rows, needs at "
                            f"least lookback+horizon = {need}")
    return train, val, test


def default_ratios(channels: int) -> tuple[float, float, float]:
    # 7-channel files follow the common ETT-style 0.6/0.2/0.2 convention
    return (0.6, 0.2, 0.2) if channels == 7 else (0.7, 0.1, 0.2)


@dataclass
class ScalerStats:
    mean: np.ndarray
    std: np.ndarray  # clamped from below by eps
    eps: float


def fit_apply_scaler(train: SeriesTable, *others: SeriesTable,
                     eps: float = 1e-8):
    """Z-score every split with train-only statistics.

    Returns ([scaled train, scaled others...], ScalerStats). Constant
    channels are clamped to eps with a warning instead of dividing by zero.
    """
    if train.rows == 0:
        raise DataError("cannot fit a scaler on an empty train split")
    mean = train.values.mean(axis=0)
    std = train.values.std(axis=0)
    flat = std < eps
    if flat.any():
        bad = [train.names[i] for i in np.nonzero(flat)[0]]
        warnings.warn(f"constant channel(s) {bad}: std clamped to {eps}")
        std = np.maximum(std, eps)
    stats = ScalerStats(mean=mean, std=std, eps=eps)
    scaled = [SeriesTable(t.timestamps, (t.values - mean) / std, list(t.names))
              for t in (train, *others)]
    return scaled, stats


def apply_scaler(table: SeriesTable, stats: ScalerStats) -> SeriesTable:
    return SeriesTable(table.timestamps, (table.values - stats.mean) / stats.std,
                       list(table.names))


def inverse_scaler(values: np.ndarray, stats: ScalerStats) -> np.ndarray:
    return values * stats.std + stats.mean


@dataclass
class WindowSample:
    x: np.ndarray       # lookback x channels
    y: np.ndarray       # horizon x channels
    origin: int         # row index of the first lookback row


def make_windows(table: SeriesTable, lookback: int, horizon: int,
                 stride: int = 1) -> list:
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    total = lookback + horizon
    if table.rows < total:
        raise DataError(f"{table.rows} rows cannot fit lookback+horizon={total}")
    out = []
    for origin in range(0, table.rows - total + 1, stride):
        out.append(WindowSample(x=table.values[origin:origin + lookback],
                                y=table.values[origin + lookback:origin + total],
                                origin=origin))
    return out


@dataclass
class SyntheticSpec:
    """Sum of per-channel sinusoids plus a shared linear trend and noise.

    components[c] lists (amplitude, period, phase) triples for channel c.
    """
    length: int
    channels: int
    components: list
    slope: float = 0.0
    noise_std: float = 0.0
    seed: int = 0

    def validate(self) -> "SyntheticSpec":
        if self.length < 2 or self.channels < 1:
            raise ConfigError("synthetic series needs length >= 2 and >= 1 channel")
        if len(self.components) != self.channels:
            raise ConfigError(f"{len(self.components)} component lists for "
                              f"{self.channels} channels")
        for comps in self.components:
            for amp, period, phase in comps:
                if period < 2:
                    raise ConfigError(f"sinusoid period must be >= 2, got {period}")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")
        return self


def default_components(channels: int, periods, amplitudes) -> list:
    """One (amp, period, phase) triple per period for each channel, with a
    deterministic per-channel phase offset so channels are not identical."""
    out = []
    for c in range(channels):
        out.append([(float(a), float(p), 2.0 * pi * c / max(channels, 1) + 0.7 * i)
                    for i, (a, p) in enumerate(zip(amplitudes, periods))])
    return out


def generate_synthetic(spec: SyntheticSpec) -> SeriesTable:
    spec.validate()
    t = np.arange(spec.length, dtype=np.float64)
    values = np.zeros((spec.length, spec.channels))
    for c, comps in enumerate(spec.components):
        acc = spec.slope * t
        for amp, period, phase in comps:
            acc = acc + amp * np.sin(2.0 * pi * t / period + phase)
        values[:, c] = acc
    if spec.noise_std > 0:
        values += spec.noise_std * Rng(spec.seed).normal(values.shape)
    start = datetime(2020, 1, 1)
    stamps = [(start + timedelta(hours=int(i))).strftime("%Y-%m-%d %H:%M:%S")
              for i in range(spec.length)]
    names = [f"ch{c}" for c in range(spec.channels)]
    return SeriesTable(stamps, values, names)
