"""Deterministic LSTM one-step predictor used as the MSE normaliser."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .data import TimeSeries
from .layers import Linear, LstmStack, Module
from .metrics import mse
from .training import Adam


@dataclass
class LstmBaselineConfig:
    hidden_size: int = 50
    layers: int = 1
    learning_rate: float = 1e-2
    steps: int = 2000
    window: int = 50
    batch_size: int = 8
    seed: int = 0
    grad_clip_norm: float = 5.0

    def to_dict(self) -> dict:
        return asdict(self)


class LstmBaseline(Module):
    """LSTM reading ``[x_t, y_{t-1}]`` and emitting a point forecast of ``y_t``."""

    _children = ("stack", "head")

    def __init__(self, input_dim: int, target_dim: int, cfg: LstmBaselineConfig):
        rng = np.random.default_rng(cfg.seed)
        self.input_dim = input_dim
        self.target_dim = target_dim
        self.stack = LstmStack(input_dim + target_dim, cfg.hidden_size, cfg.layers, rng)
        self.head = Linear(cfg.hidden_size, target_dim, rng)

    def forward(self, xs: np.ndarray, ys: np.ndarray) -> list:
        """Teacher-forced predictions for ``xs`` ``[B, T, dx]``; step 0 sees ``y_prev = 0``."""
        prev = np.concatenate([np.zeros_like(ys[:, :1]), ys[:, :-1]], axis=1)
        feats = np.concatenate([xs, prev], axis=2)
        steps = [ad.constant(feats[:, t]) for t in range(feats.shape[1])]
        return [self.head(h) for h in self.stack.run(steps)]

    def predict(self, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        """Predictions ``[T, dy]`` for a single sequence."""
        with ad.no_grad():
            outs = self.forward(xs[None], ys[None])
        return np.stack([o.data[0] for o in outs])


def train_lstm_baseline(series: TimeSeries, cfg: LstmBaselineConfig, train_end: int | None = None):
    """Fit on random windows of ``series[:train_end]`` by squared error."""
    end = len(series) if train_end is None else train_end
    window = min(cfg.window, end)
    model = LstmBaseline(series.input_dim, series.target_dim, cfg)
    opt = Adam(model.param_dict(), cfg.learning_rate, cfg.grad_clip_norm)
    rng = np.random.default_rng([cfg.seed, 2])
    losses = []
    for _ in range(cfg.steps):
        starts = rng.integers(0, end - window + 1, size=cfg.batch_size)
        xs = np.stack([series.x[s : s + window] for s in starts])
        ys = np.stack([series.y[s : s + window] for s in starts])
        opt.zero_grad()
        outs = model.forward(xs, ys)
        total = None
        for t, o in enumerate(outs):
            err = ad.reduce_sum(ad.square(o - ad.constant(ys[:, t])))
            total = err if total is None else total + err
        loss = ad.scale(total, 1.0 / (cfg.batch_size * window))
        ad.backward(loss)
        opt.step()
        losses.append(loss.item())
    return model, losses


def lstm_baseline_train_eval(
    series: TimeSeries,
    cfg: LstmBaselineConfig,
    train_end: int,
    test_end: int | None = None,
) -> tuple[LstmBaseline, float]:
    """Train on ``[0, train_end)`` and return the MSE on ``[train_end, test_end)``."""
    model, _ = train_lstm_baseline(series, cfg, train_end)
    test_end = len(series) if test_end is None else test_end
    preds = model.predict(series.x[train_end:test_end], series.y[train_end:test_end])
    return model, mse(preds, series.y[train_end:test_end])
