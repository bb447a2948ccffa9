"""Point and interval metrics for one-step forecasts."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np

MIN_PICP_SAMPLES = 20


def _steps(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    return a[:, None] if a.ndim == 1 else a


def mse(preds, targets) -> float:
    """Mean over steps of the squared Euclidean error."""
    p, t = _steps(preds), _steps(targets)
    if p.shape != t.shape:
        raise ValueError(f"prediction shape {p.shape} differs from target shape {t.shape}")
    if len(p) < 1:
        raise ValueError("need at least one step")
    return float(np.mean(np.sum((p - t) ** 2, axis=1)))


def normalized_mse(model_mse: float, baseline_mse: float) -> float:
    if baseline_mse <= 0:
        raise ValueError("baseline MSE must be positive")
    return float(model_mse) / float(baseline_mse)


def percentile(samples, q: float, axis: int = -1) -> np.ndarray:
    """Percentile with linear interpolation between order statistics."""
    return np.percentile(np.asarray(samples, dtype=np.float64), q, axis=axis, method="linear")


def picp(samples, targets, level: float = 0.90) -> float:
    """Fraction of steps whose target lies strictly inside the central interval.

    ``samples`` is ``[T, S]`` (one row of sampled predictions per step) and
    ``targets`` is ``[T]``.  Interval bounds are the empirical
    ``(1 - level) / 2`` and ``(1 + level) / 2`` quantiles of each row.
    """
    s = np.asarray(samples, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64).reshape(-1)
    if s.ndim == 3 and s.shape[2] == 1:
        s = s[:, :, 0]
    if s.ndim != 2 or s.shape[0] != y.shape[0]:
        raise ValueError(f"samples {s.shape} do not match {y.shape[0]} targets")
    if s.shape[1] < MIN_PICP_SAMPLES:
        raise ValueError(f"PICP needs at least {MIN_PICP_SAMPLES} samples per step, got {s.shape[1]}")
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    tail = 100.0 * (1.0 - level) / 2.0
    lo = percentile(s, tail, axis=1)
    hi = percentile(s, 100.0 - tail, axis=1)
    return float(np.mean((lo < y) & (y < hi)))


def persistence_baseline(series) -> np.ndarray:
    """Predict ``y_t = y_{t-1}``; returns predictions for steps ``1..T-1``."""
    y = _steps(series)
    if len(y) < 2:
        raise ValueError("persistence needs at least 2 steps")
    return y[:-1].copy()


def persistence_mse(series) -> float:
    y = _steps(series)
    return mse(persistence_baseline(y), y[1:])


def fingerprint(obj) -> str:
    """Short stable hash of a JSON-serialisable config."""
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class MetricsReport:
    mse: float
    normalized_mse: float | None
    baseline: str | None
    baseline_mse: float | None
    picp: float | None
    level: float
    n_steps: int
    config_fingerprint: str

    def __post_init__(self):
        if self.mse < 0:
            raise ValueError("mse must be non-negative")
        if self.picp is not None and not 0.0 <= self.picp <= 1.0:
            raise ValueError("picp must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)
