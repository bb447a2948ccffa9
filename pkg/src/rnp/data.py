"""Time-series ingestion, normalisation, subsequence sampling and generators."""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .model import Subsequence

log = logging.getLogger(__name__)

STRATEGIES = ("uniform_random", "strided", "preceding_target")


class DataError(ValueError):
    pass


class SchemaError(DataError):
    pass


@dataclass
class TimeSeries:
    """Uniformly sampled series with inputs ``x`` ``[T, dx]`` and targets ``y`` ``[T, dy]``."""

    name: str
    x: np.ndarray
    y: np.ndarray
    origin: float = 0.0
    spacing: float = 1.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x = _as_matrix(self.x)
        self.y = _as_matrix(self.y)
        if len(self.x) != len(self.y):
            raise DataError(f"x has {len(self.x)} rows but y has {len(self.y)}")
        if len(self.y) < 2:
            raise DataError("a time series needs at least 2 steps")
        if not (np.all(np.isfinite(self.x)) and np.all(np.isfinite(self.y))):
            raise DataError("time series contains non-finite values")

    def __len__(self) -> int:
        return len(self.y)

    @property
    def input_dim(self) -> int:
        return self.x.shape[1]

    @property
    def target_dim(self) -> int:
        return self.y.shape[1]

    def subsequence(self, start: int, length: int) -> Subsequence:
        if start < 0 or length < 1 or start + length > len(self):
            raise DataError(f"window [{start}, {start + length}) outside series of length {len(self)}")
        return Subsequence(start, self.x[start : start + length], self.y[start : start + length])

    def segment(self, lo: int, hi: int, name: str | None = None) -> "TimeSeries":
        return TimeSeries(
            name or self.name,
            self.x[lo:hi].copy(),
            self.y[lo:hi].copy(),
            self.origin + lo * self.spacing,
            self.spacing,
        )


def _as_matrix(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    return a[:, None] if a.ndim == 1 else a


# --- CSV ------------------------------------------------------------------


@dataclass
class CsvSchema:
    """Which columns to read.  Columns are names when ``has_header`` else 0-based indices."""

    target_column: str | int
    input_columns: Sequence[str | int] = ()
    has_header: bool = True
    delimiter: str = ","
    max_rows: int | None = None
    # "sum" collapses all input columns into one feature
    combine_inputs: str | None = None


def load_csv(path: str | Path, schema: CsvSchema) -> TimeSeries:
    """Read a series from CSV, keeping row order as time order.

    Rows with missing or unparseable values in the selected columns are
    dropped; the count is stored in ``meta["dropped_rows"]`` and warned about.
    Without input columns the input is the row index.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh, delimiter=schema.delimiter))
    rows = [r for r in rows if r and any(c.strip() for c in r)]
    if not rows:
        raise DataError(f"{path} is empty")
    if schema.has_header:
        header = [c.strip() for c in rows[0]]
        rows = rows[1:]

        def col(c):
            if c not in header:
                raise SchemaError(f"column {c!r} not in header {header}")
            return header.index(c)
    else:
        width = len(rows[0])

        def col(c):
            i = int(c)
            if not 0 <= i < width:
                raise SchemaError(f"column index {i} out of range (width {width})")
            return i

    t_idx = col(schema.target_column)
    in_idx = [col(c) for c in schema.input_columns]
    if schema.max_rows is not None:
        rows = rows[: schema.max_rows]

    xs, ys, dropped = [], [], 0
    for row in rows:
        try:
            y = float(row[t_idx])
            x = [float(row[i]) for i in in_idx]
        except (ValueError, IndexError):
            dropped += 1
            continue
        if not math.isfinite(y) or not all(math.isfinite(v) for v in x):
            dropped += 1
            continue
        ys.append([y])
        xs.append(x)
    if dropped:
        warnings.warn(f"{path.name}: dropped {dropped} malformed row(s)", stacklevel=2)
    if not ys:
        raise DataError(f"{path} has no valid rows")
    y = np.array(ys)
    if in_idx:
        x = np.array(xs)
        if schema.combine_inputs == "sum":
            x = x.sum(axis=1, keepdims=True)
        elif schema.combine_inputs is not None:
            raise SchemaError(f"unknown input combination {schema.combine_inputs!r}")
    else:
        x = np.arange(len(y), dtype=np.float64)[:, None]
    return TimeSeries(path.stem, x, y, meta={"dropped_rows": dropped})


def write_csv(ts: TimeSeries, path: str | Path) -> None:
    """Write ``step, x0.., y0..`` columns with full float precision."""
    xcols = ["x"] if ts.input_dim == 1 else [f"x{i}" for i in range(ts.input_dim)]
    ycols = ["y"] if ts.target_dim == 1 else [f"y{i}" for i in range(ts.target_dim)]
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", *xcols, *ycols])
        for t in range(len(ts)):
            w.writerow([t, *map(repr, ts.x[t].tolist()), *map(repr, ts.y[t].tolist())])


# --- normalisation ----------------------------------------------------------


@dataclass
class NormStats:
    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: np.ndarray
    y_std: np.ndarray

    def to_dict(self) -> dict:
        return {k: np.asarray(v).tolist() for k, v in vars(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(*(np.asarray(d[k], dtype=np.float64) for k in ("x_mean", "x_std", "y_mean", "y_std")))


def _moments(a: np.ndarray, label: str) -> tuple[np.ndarray, np.ndarray]:
    mean = a.mean(axis=0)
    std = a.std(axis=0)
    flat = std <= 1e-12
    if np.any(flat):
        warnings.warn(f"constant {label} column(s) {np.flatnonzero(flat).tolist()}; using std 1", stacklevel=3)
        mean = np.where(flat, 0.0, mean)
        std = np.where(flat, 1.0, std)
    return mean, std


def fit_norm(ts: TimeSeries, train_end: int | None = None) -> NormStats:
    """Per-feature population mean/std over ``ts[:train_end]``.

    Constant columns keep their values: mean 0, std 1.
    """
    end = len(ts) if train_end is None else train_end
    if end < 1:
        raise DataError("training portion is empty")
    xm, xs = _moments(ts.x[:end], "input")
    ym, ys = _moments(ts.y[:end], "target")
    return NormStats(xm, xs, ym, ys)


def apply_norm(ts: TimeSeries, stats: NormStats) -> TimeSeries:
    return TimeSeries(
        ts.name,
        (ts.x - stats.x_mean) / stats.x_std,
        (ts.y - stats.y_mean) / stats.y_std,
        ts.origin,
        ts.spacing,
        dict(ts.meta),
    )


def normalize(ts: TimeSeries, train_end: int | None = None) -> tuple[TimeSeries, NormStats]:
    stats = fit_norm(ts, train_end)
    return apply_norm(ts, stats), stats


def denormalize(values, stats: NormStats, which: str = "y") -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if which == "y":
        return values * stats.y_std + stats.y_mean
    if which == "x":
        return values * stats.x_std + stats.x_mean
    raise ValueError("which must be 'x' or 'y'")


def scale_std(values, stats: NormStats) -> np.ndarray:
    """Map a normalised target spread back to data units."""
    return np.asarray(values) * stats.y_std


# --- subsequences -------------------------------------------------------------


def legal_starts(series_len: int, length: int) -> range:
    """Start indices of every length-``length`` window inside the series."""
    if length < 1 or length > series_len:
        raise DataError(f"window length {length} does not fit a series of length {series_len}")
    return range(0, series_len - length + 1)


def sample_subsequences(
    ts: TimeSeries,
    n: int,
    len_range: tuple[int, int] | int,
    strategy: str = "uniform_random",
    rng: np.random.Generator | None = None,
    stride: int | None = None,
    before: int | None = None,
) -> list[Subsequence]:
    """Draw ``n`` windows.

    ``uniform_random`` picks lengths and starts uniformly.  ``strided`` places
    windows of the minimum length every ``stride`` steps from 0.
    ``preceding_target`` is uniform but every window ends at or before
    ``before``.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; choose from {STRATEGIES}")
    lo, hi = (len_range, len_range) if isinstance(len_range, int) else len_range
    if lo < 1 or lo > hi:
        raise DataError(f"bad length range {len_range}")
    limit = len(ts)
    if strategy == "preceding_target":
        if before is None:
            raise ValueError("preceding_target needs `before`")
        limit = min(limit, before)
    if hi > limit:
        raise DataError(f"window length up to {hi} does not fit in {limit} steps")

    if strategy == "strided":
        stride = stride or lo
        starts = [i * stride for i in range(n)]
        if n and starts[-1] + lo > limit:
            raise DataError(f"{n} windows of length {lo} at stride {stride} overrun {limit} steps")
        return [ts.subsequence(s, lo) for s in starts]

    rng = rng if rng is not None else np.random.default_rng()
    out = []
    for _ in range(n):
        length = int(rng.integers(lo, hi + 1))
        start = int(rng.integers(0, limit - length + 1))
        out.append(ts.subsequence(start, length))
    return out


def chrono_split(ts: TimeSeries, fractions: Sequence[float] = (0.8, 0.1, 0.1)) -> tuple[TimeSeries, ...]:
    """Contiguous train/val/test segments in time order."""
    fr = np.asarray(fractions, dtype=np.float64)
    if len(fr) != 3 or np.any(fr <= 0) or abs(fr.sum() - 1.0) > 1e-9:
        raise DataError(f"fractions must be three positive numbers summing to 1, got {fractions}")
    n = len(ts)
    a = int(round(n * fr[0]))
    b = int(round(n * (fr[0] + fr[1])))
    bounds = [(0, a), (a, b), (b, n)]
    if any(hi - lo < 2 for lo, hi in bounds):
        raise DataError(f"split {fractions} of {n} steps leaves a segment shorter than 2")
    names = ("train", "val", "test")
    return tuple(ts.segment(lo, hi, f"{ts.name}-{nm}") for (lo, hi), nm in zip(bounds, names))


# --- synthetic generators ---------------------------------------------------


def _unit_time(n: int) -> np.ndarray:
    return (np.arange(n) / max(n - 1, 1))[:, None]


def synth_sine_drift(
    n_steps: int = 2000,
    base_freq: float = 0.05,
    amp_drift_period: float = 500.0,
    noise_std: float = 0.05,
    seed: int = 0,
) -> TimeSeries:
    """Sine with slowly drifting amplitude ``1 + 0.5 sin(2 pi t / period)``.

    ``amp_drift_period = 0`` means no drift.  Inputs are time scaled to [0, 1].
    """
    if base_freq <= 0 or amp_drift_period < 0 or n_steps < 2:
        raise ValueError("frequency must be positive, period non-negative, n_steps >= 2")
    t = np.arange(n_steps, dtype=np.float64)
    if amp_drift_period == 0:
        amp = np.ones(n_steps)
    else:
        amp = 1.0 + 0.5 * np.sin(2.0 * np.pi * t / amp_drift_period)
    rng = np.random.default_rng(seed)
    y = amp * np.sin(2.0 * np.pi * base_freq * t) + noise_std * rng.standard_normal(n_steps)
    meta = {"kind": "sine-drift", "base_freq": base_freq, "amp_drift_period": amp_drift_period,
            "noise_std": noise_std, "seed": seed}
    return TimeSeries("sine-drift", _unit_time(n_steps), y, meta=meta)


def synth_two_scale(
    n_steps: int = 4096,
    fast_period: float = 24.0,
    slow_period: float = 24.0 * 30,
    noise_std: float = 0.05,
    seed: int = 0,
    slow_amplitude: float = 3.0,
) -> TimeSeries:
    """Fast cycle superimposed on a slow one (daily and seasonal)."""
    if not 0 < fast_period < slow_period:
        raise ValueError("need 0 < fast_period < slow_period")
    t = np.arange(n_steps, dtype=np.float64)
    rng = np.random.default_rng(seed)
    y = (
        np.sin(2.0 * np.pi * t / fast_period)
        + slow_amplitude * np.sin(2.0 * np.pi * t / slow_period)
        + noise_std * rng.standard_normal(n_steps)
    )
    meta = {"kind": "two-scale", "fast_period": fast_period, "slow_period": slow_period,
            "noise_std": noise_std, "seed": seed, "slow_amplitude": slow_amplitude}
    return TimeSeries("two-scale", _unit_time(n_steps), y, meta=meta)


def synth_drives(
    n_steps: int = 500,
    noise_std: float = 0.02,
    seed: int = 0,
    dt: float = 0.02,
) -> TimeSeries:
    """Stand-in for the coupled-electric-drives benchmark.

    A random piecewise-constant voltage drives a first-order motor lag in series
    with a lightly damped belt/spring resonance; the sensor reads the absolute
    belt speed.  Sampled at 50 Hz like the benchmark.
    """
    rng = np.random.default_rng(seed)
    u = np.empty(n_steps)
    t = 0
    while t < n_steps:
        hold = int(rng.integers(5, 31))
        u[t : t + hold] = rng.uniform(-1.0, 1.0)
        t += hold

    gain, motor_pole, w0, zeta = 3.0, 4.0, 12.0, 0.12
    # states: motor torque m, belt speed s, its derivative ds
    a = np.array(
        [
            [-motor_pole, 0.0, 0.0],
            [0.0, 0.0, 1.0],
            [w0 * w0, -w0 * w0, -2.0 * zeta * w0],
        ]
    )
    b = np.array([gain * motor_pole, 0.0, 0.0])

    def f(state, ui):
        return a @ state + b * ui

    substeps = 10
    h = dt / substeps
    state = np.zeros(3)
    speed = np.empty(n_steps)
    for k in range(n_steps):
        for _ in range(substeps):
            k1 = f(state, u[k])
            k2 = f(state + 0.5 * h * k1, u[k])
            k3 = f(state + 0.5 * h * k2, u[k])
            k4 = f(state + h * k3, u[k])
            state = state + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        speed[k] = state[1]
    y = np.abs(speed) + noise_std * rng.standard_normal(n_steps)
    meta = {"kind": "drives", "noise_std": noise_std, "seed": seed, "dt": dt}
    return TimeSeries("drives-surrogate", u[:, None], y, spacing=dt, meta=meta)
