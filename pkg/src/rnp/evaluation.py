"""One-step evaluation of a trained RNP on a held-out tail of a series."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import NormStats, TimeSeries, denormalize, sample_subsequences
from .metrics import mse, picp
from .model import RnpModel, predict_one_step


@dataclass
class OneStepResult:
    mean: np.ndarray  # [T, dy], data units
    p5: np.ndarray
    p95: np.ndarray
    samples: np.ndarray  # [T, S, dy]
    target: np.ndarray
    mse: float
    picp: float | None
    start: int


def evaluate_one_step(
    model: RnpModel,
    series: TimeSeries,
    stats: NormStats,
    test_start: int,
    test_end: int | None = None,
    n_contexts: int = 3,
    context_len: int = 20,
    n_samples: int = 200,
    level: float = 0.9,
    seed: int = 0,
) -> OneStepResult:
    """Predict ``series[test_start:test_end]`` one step ahead.

    ``series`` is normalised; contexts are drawn before ``test_start`` and
    results are mapped back to data units with ``stats``.
    """
    test_end = len(series) if test_end is None else test_end
    rng = np.random.default_rng([seed, 3])
    context = sample_subsequences(
        series, n_contexts, min(context_len, test_start), "preceding_target", rng, before=test_start
    )
    target = series.subsequence(test_start, test_end - test_start)
    out = predict_one_step(model, context, target, n_samples, rng)
    mean = denormalize(out["mean"], stats)
    samples = denormalize(out["samples"], stats)
    truth = denormalize(out["target"], stats)
    lo = np.percentile(samples, 5.0, axis=1)
    hi = np.percentile(samples, 95.0, axis=1)
    cover = picp(samples[:, :, 0], truth[:, 0], level) if truth.shape[1] == 1 else None
    return OneStepResult(mean, lo, hi, samples, truth, mse(mean, truth), cover, test_start)


def write_predictions_csv(path: str | Path, result: OneStepResult) -> int:
    """Write ``step,mean,p5,p95,target`` rows (first target dimension); returns the row count."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "mean", "p5", "p95", "target"])
        for t in range(len(result.mean)):
            w.writerow([
                result.start + t,
                repr(float(result.mean[t, 0])),
                repr(float(result.p5[t, 0])),
                repr(float(result.p95[t, 0])),
                repr(float(result.target[t, 0])),
            ])
    return len(result.mean)
