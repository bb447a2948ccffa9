"""ELBO objective, Adam and the training loop."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import checkpoint_from, save_checkpoint
from .data import DataError, TimeSeries
from .gaussian import DiagGaussian, gauss_loglik, kl_diag
from .model import (
    RnpModel,
    Subsequence,
    decode_steps,
    decoder_context,
    deterministic_code,
    infer_latent,
    points_to_subsequences,
)

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 8
    epochs: int = 100
    seed: int = 0
    context_count_range: tuple[int, int] = (1, 3)
    context_len: int = 20
    target_len: int = 20
    kl_weight: float = 1.0
    grad_clip_norm: float = 5.0
    batches_per_epoch: int = 1
    # chronological tail of the series held out for validation
    val_fraction: float = 0.1
    val_tasks: int = 4
    checkpoint_every: int = 0

    def __post_init__(self):
        self.context_count_range = tuple(int(v) for v in self.context_count_range)
        lo, hi = self.context_count_range
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 1 <= lo <= hi:
            raise ValueError(f"context_count_range must satisfy 1 <= min <= max, got {self.context_count_range}")
        if self.context_len < 1 or self.target_len < 1:
            raise ValueError("context_len and target_len must be >= 1")
        if self.batch_size < 1 or self.batches_per_epoch < 1 or self.epochs < 0:
            raise ValueError("batch_size and batches_per_epoch must be >= 1, epochs >= 0")
        if self.grad_clip_norm <= 0 or self.kl_weight < 0:
            raise ValueError("grad_clip_norm must be positive and kl_weight non-negative")
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must lie in (0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["context_count_range"] = list(self.context_count_range)
        return d


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, last_checkpoint: Path | None = None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


# --- context / target splits ----------------------------------------------------


def split_context_target(
    series: TimeSeries,
    cfg: TrainConfig,
    rng: np.random.Generator,
    region: tuple[int, int] | None = None,
    n_contexts: int | None = None,
) -> tuple[list[Subsequence], Subsequence]:
    """Draw a target window inside ``region`` and context windows before it.

    Context windows end at or before the target start, so the target start is
    at least ``context_len``.
    """
    n = len(series)
    if n < cfg.target_len + cfg.context_len:
        raise DataError(
            f"series of length {n} is shorter than target_len + context_len = "
            f"{cfg.target_len + cfg.context_len}"
        )
    lo, hi = region if region is not None else (0, n)
    target_len = min(cfg.target_len, hi - max(lo, cfg.context_len))
    first = max(lo, cfg.context_len)
    last = hi - target_len
    if target_len < 1 or last < first:
        raise DataError(f"no room for a target window in region [{lo}, {hi})")
    t0 = int(rng.integers(first, last + 1))
    if n_contexts is None:
        a, b = cfg.context_count_range
        n_contexts = int(rng.integers(a, b + 1))
    starts = rng.integers(0, t0 - cfg.context_len + 1, size=n_contexts)
    context = [series.subsequence(int(s), cfg.context_len) for s in starts]
    return context, series.subsequence(t0, target_len)


@dataclass
class TaskBatch:
    """Tasks sharing context count and window lengths, stacked for batching."""

    context_feats: np.ndarray  # [B, N, Jc, F]
    target_feats: np.ndarray  # [B, Jt, F]
    target_xs: np.ndarray  # [B, Jt, dx]
    target_ys: np.ndarray  # [B, Jt, dy]

    @classmethod
    def from_tasks(cls, model: RnpModel, tasks: Sequence[tuple[Sequence[Subsequence], Subsequence]]):
        counts = {len(c) for c, _ in tasks}
        lengths = {len(s) for c, _ in tasks for s in c}
        tlens = {len(t) for _, t in tasks}
        if len(counts) != 1 or len(lengths) != 1 or len(tlens) != 1 or 0 in counts:
            raise ValueError("batched tasks need equal, non-zero context counts and equal window lengths")
        return cls(
            np.stack([np.stack([model.step_features(s) for s in c]) for c, _ in tasks]),
            np.stack([model.step_features(t) for _, t in tasks]),
            np.stack([t.xs for _, t in tasks]),
            np.stack([t.ys for _, t in tasks]),
        )

    @property
    def size(self) -> int:
        return self.target_xs.shape[0]

    @property
    def n_contexts(self) -> int:
        return self.context_feats.shape[1]


def sample_batch(model, series, cfg, rng, region=None) -> TaskBatch:
    a, b = cfg.context_count_range
    n_ctx = int(rng.integers(a, b + 1))
    tasks = [split_context_target(series, cfg, rng, region, n_ctx) for _ in range(cfg.batch_size)]
    return TaskBatch.from_tasks(model, tasks)


# --- objective ----------------------------------------------------------------------


def _sequence_nll(gs: list[DiagGaussian], ys: np.ndarray) -> Tensor:
    """Negative log-likelihood summed over steps, one entry per batch row."""
    total = None
    for t, g in enumerate(gs):
        ll = gauss_loglik(ad.constant(ys[:, t, :]), g)
        total = ll if total is None else total + ll
    return ad.scale(total, -1.0)


def _combine(nll: Tensor, kl: Tensor, kl_weight: float):
    per_task = nll + ad.scale(kl, kl_weight) if kl_weight != 1.0 else nll + kl
    loss = ad.reduce_mean(per_task)
    diag = {
        "nll": float(np.mean(nll.data)),
        "kl": float(np.mean(kl.data)),
        "loss": loss.item(),
    }
    return loss, diag


def batch_elbo_loss(model: RnpModel, batch: TaskBatch, noise: np.ndarray, kl_weight: float = 1.0):
    """Negative ELBO averaged over the tasks of ``batch``.

    ``q_all`` encodes context plus target, ``q_ctx`` the context alone;
    ``v`` is one reparameterised draw from ``q_all`` per task.
    """
    B, N = batch.size, batch.n_contexts
    h = model.config.hidden_size
    ctx_flat = batch.context_feats.reshape((B * N,) + batch.context_feats.shape[2:])
    ctx_rep = ad.reshape(model._encode_features(model.latent_encoder, model.latent_mlp, ctx_flat), (B, N, h))
    ctx_sum = ad.reduce_sum(ctx_rep, axis=1)
    tgt_rep = model._encode_features(model.latent_encoder, model.latent_mlp, batch.target_feats)
    q_ctx = model.latent_from_representation(ad.scale(ctx_sum, 1.0 / N))
    q_all = model.latent_from_representation(ad.scale(ctx_sum + tgt_rep, 1.0 / (N + 1)))
    v = q_all.mu + q_all.sigma * ad.constant(noise)
    r_det = None
    if model.config.use_deterministic_path:
        det = model._encode_features(model.det_encoder, model.det_mlp, ctx_flat)
        r_det = ad.reduce_mean(ad.reshape(det, (B, N, h)), axis=1)
    ctx = decoder_context(model, v, r_det)
    gs = decode_steps(model, ctx, batch.target_xs, batch.target_ys)
    return _combine(_sequence_nll(gs, batch.target_ys), kl_diag(q_all, q_ctx), kl_weight)


def elbo_loss(
    model: RnpModel,
    context: Sequence[Subsequence],
    target: Subsequence,
    noise=None,
    rng: np.random.Generator | None = None,
    kl_weight: float = 1.0,
):
    """Negative ELBO of one task; returns ``(loss, {"nll", "kl", "loss"})``.

    With an empty context the context posterior falls back to ``N(0, I)``.
    """
    d = model.config.latent_dim
    if noise is None:
        noise = (rng if rng is not None else np.random.default_rng()).standard_normal(d)
    # context and target are joined as a set union
    known = {s.key() for s in context}
    q_all = infer_latent(model, list(context) + ([] if target.key() in known else [target]))
    q_ctx = infer_latent(model, context) if context else DiagGaussian.standard(d)
    v = q_all.mu + q_all.sigma * ad.constant(np.reshape(noise, (d,)))
    ctx = decoder_context(model, v, deterministic_code(model, context))
    gs = decode_steps(model, ctx, target.xs[None], target.ys[None])
    return _combine(_sequence_nll(gs, target.ys[None]), ad.reshape(kl_diag(q_all, q_ctx), (1,)), kl_weight)


def np_static_elbo(model: RnpModel, context_points, target_points, noise, kl_weight: float = 1.0):
    """Negative ELBO for plain NP regression with a feedforward decoder.

    Targets include the context points, as in standard NP training.
    """
    ctx = points_to_subsequences(context_points)
    tgt = points_to_subsequences(target_points)
    d = model.config.latent_dim
    q_all = infer_latent(model, ctx + tgt)
    q_ctx = infer_latent(model, ctx)
    v = q_all.mu + q_all.sigma * ad.constant(np.reshape(noise, (d,)))
    xs = np.stack([s.xs[0] for s in tgt])
    ys = np.stack([s.ys[0] for s in tgt])
    code = decoder_context(model, v, deterministic_code(model, ctx), len(xs))
    g, _ = model.decoder_step(code, ad.constant(xs), None, None)
    nll = ad.scale(ad.reduce_sum(gauss_loglik(ad.constant(ys), g)), -1.0)
    return _combine(ad.reshape(nll, (1,)), ad.reshape(kl_diag(q_all, q_ctx), (1,)), kl_weight)


# --- optimiser ------------------------------------------------------------------------


def clip_by_global_norm(grads: Sequence[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if norm > max_norm:
        factor = max_norm / norm
        return [g * factor for g in grads], norm
    return list(grads), norm


def adam_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    moments: tuple[Sequence[np.ndarray], Sequence[np.ndarray]],
    lr: float,
    t: int,
    clip_norm: float | None = None,
    b1: float = 0.9,
    b2: float = 0.999,
    eps: float = 1e-8,
) -> bool:
    """In-place Adam update of ``params`` and ``moments``; ``t`` counts from 1.

    Returns False (and changes nothing) if any gradient is non-finite.
    """
    if t < 1:
        raise ValueError("Adam step counter starts at 1")
    if not all(np.all(np.isfinite(g)) for g in grads):
        log.warning("non-finite gradient at Adam step %d; update skipped", t)
        return False
    if clip_norm is not None:
        grads, _ = clip_by_global_norm(grads, clip_norm)
    ms, vs = moments
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, ms, vs):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return True


class Adam:
    """Adam over named parameter tensors, reading gradients from ``.grad``."""

    def __init__(self, named_params: dict[str, Tensor], lr: float, clip_norm: float | None = None):
        self.params = named_params
        self.lr = lr
        self.clip_norm = clip_norm
        self.m = {k: np.zeros_like(p.data) for k, p in named_params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in named_params.items()}
        self.t = 0
        self.skipped = 0

    def load_state(self, m: dict, v: dict, t: int) -> None:
        for k in self.params:
            if k in m:
                self.m[k][...] = m[k]
                self.v[k][...] = v[k]
        self.t = t

    def zero_grad(self) -> None:
        ad.zero_grad(self.params.values())

    def step(self) -> bool:
        keys = list(self.params)
        applied = adam_step(
            [self.params[k].data for k in keys],
            [self.params[k].grad for k in keys],
            ([self.m[k] for k in keys], [self.v[k] for k in keys]),
            self.lr,
            self.t + 1,
            self.clip_norm,
        )
        if applied:
            self.t += 1
        else:
            self.skipped += 1
        return applied


# --- training loop ------------------------------------------------------------------------


def validation_region(series: TimeSeries, cfg: TrainConfig) -> tuple[int, int]:
    n = len(series)
    cut = n - max(1, int(round(cfg.val_fraction * n)))
    return cut, n


def make_validation_batch(model, series, cfg) -> TaskBatch:
    """Fixed validation tasks with targets in the chronological tail."""
    rng = np.random.default_rng([cfg.seed, 1])
    return sample_batch(model, series, _with(cfg, batch_size=cfg.val_tasks), rng, validation_region(series, cfg))


def _with(cfg: TrainConfig, **changes) -> TrainConfig:
    d = cfg.to_dict()
    d.update(changes)
    return TrainConfig(**d)


def evaluate_batch(model: RnpModel, batch: TaskBatch) -> dict[str, float]:
    """Per-step NLL and MSE with ``v`` at the mean of ``q(v | context)``."""
    B, N = batch.size, batch.n_contexts
    h = model.config.hidden_size
    with ad.no_grad():
        flat = batch.context_feats.reshape((B * N,) + batch.context_feats.shape[2:])
        rep = model._encode_features(model.latent_encoder, model.latent_mlp, flat)
        z = ad.reduce_mean(ad.reshape(rep, (B, N, h)), axis=1)
        v = model.latent_from_representation(z).mu
        r_det = None
        if model.config.use_deterministic_path:
            det = model._encode_features(model.det_encoder, model.det_mlp, flat)
            r_det = ad.reduce_mean(ad.reshape(det, (B, N, h)), axis=1)
        gs = decode_steps(model, decoder_context(model, v, r_det), batch.target_xs, batch.target_ys)
        nll = _sequence_nll(gs, batch.target_ys)
    mus = np.stack([g.mu.data for g in gs], axis=1)
    steps = batch.target_ys.shape[1]
    return {
        "nll": float(np.mean(nll.data)) / steps,
        "mse": float(np.mean(np.sum((mus - batch.target_ys) ** 2, axis=-1))),
    }


def train(
    model: RnpModel,
    series: TimeSeries,
    cfg: TrainConfig,
    run_dir: str | Path | None = None,
    on_epoch: Callable[[dict], None] | None = None,
    record_wall_time: bool = False,
    extra_meta: dict | None = None,
) -> tuple[RnpModel, list[dict]]:
    """Fit ``model`` on ``series`` (already normalised) and return the epoch log.

    Targets for training come from the first ``1 - val_fraction`` of the
    series; validation targets from the rest.  With ``run_dir`` set, the log is
    appended to ``metrics.jsonl`` and checkpoints are written every
    ``checkpoint_every`` epochs and at the end.  ``wall_ms`` is logged as null
    unless ``record_wall_time`` is set, which keeps logs byte-reproducible.
    """
    rng = np.random.default_rng(cfg.seed)
    params = model.param_dict()
    opt = Adam(params, cfg.learning_rate, cfg.grad_clip_norm)
    cut, _ = validation_region(series, cfg)
    train_region = (0, cut)
    val_batch = make_validation_batch(model, series, cfg) if cfg.epochs > 0 else None

    run_dir = Path(run_dir) if run_dir is not None else None
    metrics_path = None
    last_ckpt: Path | None = None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        metrics_path = run_dir / "metrics.jsonl"
        metrics_path.touch()

    def _checkpoint(epoch: int, name: str) -> Path | None:
        if run_dir is None:
            return None
        path = run_dir / name
        save_checkpoint(path, checkpoint_from(model, opt, epoch, rng, extra_meta))
        return path

    history: list[dict] = []
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        losses, nlls, kls = [], [], []
        for _ in range(cfg.batches_per_epoch):
            batch = sample_batch(model, series, cfg, rng, train_region)
            noise = rng.standard_normal((batch.size, model.config.latent_dim))
            opt.zero_grad()
            loss, diag = batch_elbo_loss(model, batch, noise, cfg.kl_weight)
            if not math.isfinite(diag["loss"]):
                raise TrainingAborted(f"non-finite loss at epoch {epoch}", last_ckpt)
            ad.backward(loss)
            opt.step()
            losses.append(diag["loss"])
            nlls.append(diag["nll"])
            kls.append(diag["kl"])
        val = evaluate_batch(model, val_batch)
        record = {
            "epoch": epoch,
            "train_loss": float(np.mean(losses)),
            "train_nll": float(np.mean(nlls)),
            "train_kl": float(np.mean(kls)),
            "val_nll": val["nll"],
            "val_mse": val["mse"],
            "wall_ms": round((time.perf_counter() - t0) * 1000.0, 3) if record_wall_time else None,
        }
        history.append(record)
        if metrics_path is not None:
            with metrics_path.open("a") as fh:
                fh.write(json.dumps(record) + "\n")
        if on_epoch is not None:
            on_epoch(record)
        if cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            last_ckpt = _checkpoint(epoch, f"ckpt_epoch{epoch:06d}.rnpc")
    _checkpoint(cfg.epochs, "final.rnpc")
    return model, history
