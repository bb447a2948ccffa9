"""Recurrent Neural Process: subsequence encoders, temporal latent, decoder.

Context subsequences are encoded by an LSTM, the final hidden state goes
through an MLP to give one representation per subsequence, representations are
averaged and a latent head turns the average into ``q(v | context)``.  An
optional deterministic path with its own encoder produces an averaged code
``r_det``.  The decoder (an LSTM stack or an MLP) reads ``[v, r_det, x_t,
y_{t-1}]`` at every step and emits a diagonal Gaussian over ``y_t``.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .gaussian import DiagGaussian, gaussian_head
from .layers import Linear, LstmStack, Mlp, Module, SequenceEncoder, zeros

DECODER_KINDS = ("recurrent", "feedforward")


@dataclass
class RnpConfig:
    input_dim: int = 1
    target_dim: int = 1
    hidden_size: int = 32
    latent_dim: int = 32
    encoder_layers: int = 1
    bidirectional: bool = False
    decoder_kind: str = "recurrent"
    use_deterministic_path: bool = True
    condition_on_time: bool = False
    # divides start indices when condition_on_time is set
    time_scale: float = 1000.0

    def __post_init__(self):
        for name in ("input_dim", "target_dim", "hidden_size", "latent_dim", "encoder_layers"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.decoder_kind not in DECODER_KINDS:
            raise ValueError(f"decoder_kind must be one of {DECODER_KINDS}")
        if self.time_scale <= 0:
            raise ValueError("time_scale must be positive")

    @property
    def encoder_input_size(self) -> int:
        return self.input_dim + self.target_dim + (1 if self.condition_on_time else 0)

    @property
    def context_size(self) -> int:
        return self.latent_dim + (self.hidden_size if self.use_deterministic_path else 0)

    def to_dict(self) -> dict:
        return asdict(self)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "RnpConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown RnpConfig fields: {sorted(unknown)}")
        return cls(**d)


def _as_steps(a) -> np.ndarray:
    """1-D arrays are read as one feature per step."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2:
        raise ValueError(f"expected [steps, features], got shape {a.shape}")
    return a


@dataclass
class Subsequence:
    """Contiguous slice of a series: ``xs`` is ``[J, input_dim]``, ``ys`` ``[J, target_dim]``."""

    start_index: int
    xs: np.ndarray
    ys: np.ndarray

    def __post_init__(self):
        self.xs = _as_steps(self.xs)
        self.ys = _as_steps(self.ys)
        if len(self.xs) != len(self.ys):
            raise ValueError(f"xs has {len(self.xs)} steps but ys has {len(self.ys)}")
        if len(self.xs) < 1:
            raise ValueError("a subsequence needs at least one step")
        self.start_index = int(self.start_index)

    def __len__(self) -> int:
        return len(self.xs)

    @property
    def end_index(self) -> int:
        return self.start_index + len(self)

    def key(self) -> tuple:
        return (self.start_index, len(self), self.xs.tobytes(), self.ys.tobytes())


@dataclass
class PredictiveStep:
    mean: np.ndarray
    stddev: np.ndarray
    target: np.ndarray | None = None


class RnpModel(Module):
    """Full RNP parameter set; build with :meth:`create`."""

    _children = (
        "latent_encoder",
        "latent_mlp",
        "latent_head",
        "det_encoder",
        "det_mlp",
        "decoder_init",
        "decoder",
        "output_head",
    )

    def __init__(self, config: RnpConfig, rng: np.random.Generator):
        self.config = cfg = config
        h = cfg.hidden_size
        layers = cfg.encoder_layers
        self.latent_encoder = SequenceEncoder(cfg.encoder_input_size, h, layers, cfg.bidirectional, rng)
        self.latent_mlp = Mlp([self.latent_encoder.out_size, h, h], rng)
        self.latent_head = Mlp([h, h, 2 * cfg.latent_dim], rng)
        if cfg.use_deterministic_path:
            self.det_encoder = SequenceEncoder(cfg.encoder_input_size, h, layers, cfg.bidirectional, rng)
            self.det_mlp = Mlp([self.det_encoder.out_size, h, h], rng)
        else:
            self.det_encoder = self.det_mlp = None
        if cfg.decoder_kind == "recurrent":
            self.decoder_init = Mlp([cfg.context_size, h, layers * h], rng)
            self.decoder = LstmStack(cfg.context_size + cfg.input_dim + cfg.target_dim, h, layers, rng)
            self.output_head = Linear(h, 2 * cfg.target_dim, rng)
        else:
            self.decoder_init = None
            self.decoder = Mlp([cfg.context_size + cfg.input_dim, h, h, 2 * cfg.target_dim], rng)
            self.output_head = None

    @classmethod
    def create(cls, config: RnpConfig, seed: int = 0) -> "RnpModel":
        return cls(config, np.random.default_rng(seed))

    # --- encoders -------------------------------------------------------

    def step_features(self, s: Subsequence) -> np.ndarray:
        cfg = self.config
        if s.xs.shape[1] != cfg.input_dim or s.ys.shape[1] != cfg.target_dim:
            raise ValueError(
                f"subsequence features ({s.xs.shape[1]}, {s.ys.shape[1]}) do not match "
                f"config ({cfg.input_dim}, {cfg.target_dim})"
            )
        parts = [s.xs, s.ys]
        if cfg.condition_on_time:
            parts.append(np.full((len(s), 1), s.start_index / cfg.time_scale))
        return np.concatenate(parts, axis=1)

    def _encode_features(self, encoder: SequenceEncoder, mlp: Mlp, feats: np.ndarray) -> Tensor:
        """Representations ``[B, H]`` for step features shaped ``[B, J, F]``."""
        steps = [ad.constant(feats[:, j, :]) for j in range(feats.shape[1])]
        return mlp(encoder.final_state(steps))

    def encode_group(self, subseqs: Sequence[Subsequence], deterministic: bool = False) -> Tensor:
        """Encode equal-length subsequences together; rows follow input order."""
        if deterministic:
            encoder, mlp = self.det_encoder, self.det_mlp
        else:
            encoder, mlp = self.latent_encoder, self.latent_mlp
        feats = np.stack([self.step_features(s) for s in subseqs])
        return self._encode_features(encoder, mlp, feats)

    def latent_from_representation(self, z: Tensor) -> DiagGaussian:
        return gaussian_head(self.latent_head(z))

    # --- decoder --------------------------------------------------------

    def decoder_start(self, ctx: Tensor):
        """Initial decoder state inferred from the ``[v, r_det]`` code."""
        if self.config.decoder_kind != "recurrent":
            return None
        h = self.config.hidden_size
        batch = ctx.shape[0]
        h0 = ad.tanh(self.decoder_init(ctx))
        return [
            (ad.slice_(h0, 1, k * h, (k + 1) * h), zeros(batch, h))
            for k in range(self.config.encoder_layers)
        ]

    def decoder_step(self, ctx: Tensor, x: Tensor, y_prev: Tensor, state):
        """One decoder step; returns the predictive Gaussian and the new state."""
        if self.config.decoder_kind == "feedforward":
            return gaussian_head(self.decoder(ad.concat([ctx, x], axis=1))), state
        inp = ad.concat([ctx, x, y_prev], axis=1)
        new_state = []
        for cell, (h, c) in zip(self.decoder.cells, state):
            h, c = cell.step(inp, h, c)
            new_state.append((h, c))
            inp = h
        return gaussian_head(self.output_head(inp)), new_state


def _as_batch(t, batch: int | None = None) -> Tensor:
    t = t if isinstance(t, Tensor) else ad.constant(t)
    if t.data.ndim == 1:
        t = ad.reshape(t, (1, t.shape[0]))
    if batch is not None and t.shape[0] != batch:
        if t.shape[0] != 1:
            raise ValueError(f"cannot use batch of {t.shape[0]} rows with {batch}")
        t = ad.concat([t] * batch, axis=0)
    return t


# --- aggregation and latent inference ------------------------------------


def _canonical_counts(items: Sequence, key) -> tuple[list, list[float]]:
    """Distinct items in sorted-key order with multiplicity weights ``count / n``."""
    counts = Counter()
    first = {}
    for it in items:
        k = key(it)
        counts[k] += 1
        first.setdefault(k, it)
    n = len(items)
    keys = sorted(counts)
    return [first[k] for k in keys], [counts[k] / n for k in keys]


def aggregate(reps: Sequence) -> Tensor:
    """Elementwise mean of representation vectors.

    Summation runs over distinct vectors in sorted byte order, each weighted by
    its multiplicity, so the result is bitwise independent of list order and of
    uniform duplication.
    """
    if not reps:
        raise ValueError("cannot aggregate an empty list of representations")
    reps = [r if isinstance(r, Tensor) else ad.constant(r) for r in reps]
    shape = reps[0].shape
    if any(r.shape != shape for r in reps):
        raise ValueError("representations have mixed lengths")
    groups: dict[bytes, list[Tensor]] = {}
    for r in reps:
        groups.setdefault(r.data.tobytes(), []).append(r)
    n = len(reps)
    keys = sorted(groups)
    return ad.weighted_sum([ad.tie(groups[k]) for k in keys], [len(groups[k]) / n for k in keys])


def _encode_unique(model: RnpModel, subseqs: Sequence[Subsequence], deterministic: bool):
    """Representations of distinct subsequences (canonical order) and their weights."""
    if not subseqs:
        raise ValueError("context is empty")
    unique, weights = _canonical_counts(subseqs, Subsequence.key)
    reps: list[Tensor | None] = [None] * len(unique)
    by_len: dict[int, list[int]] = {}
    for i, s in enumerate(unique):
        by_len.setdefault(len(s), []).append(i)
    h = model.config.hidden_size
    for length in sorted(by_len):
        idx = by_len[length]
        rows = model.encode_group([unique[i] for i in idx], deterministic)
        for r, i in enumerate(idx):
            reps[i] = ad.reshape(ad.slice_(rows, 0, r, r + 1), (h,))
    return reps, weights


def encode_subsequence(model: RnpModel, s: Subsequence, deterministic: bool = False) -> Tensor:
    """Representation vector ``[hidden_size]`` of one subsequence."""
    return ad.reshape(model.encode_group([s], deterministic), (model.config.hidden_size,))


def summarize_context(model: RnpModel, subseqs: Sequence[Subsequence], deterministic: bool = False) -> Tensor:
    """Mean representation ``[hidden_size]`` of a context set."""
    reps, weights = _encode_unique(model, subseqs, deterministic)
    return ad.weighted_sum(reps, weights)


def infer_latent(model: RnpModel, subseqs: Sequence[Subsequence]) -> DiagGaussian:
    """``q(v | subsequences)`` with ``[latent_dim]`` mean and stddev."""
    z = summarize_context(model, subseqs)
    g = model.latent_from_representation(ad.reshape(z, (1, z.shape[0])))
    d = model.config.latent_dim
    return DiagGaussian(ad.reshape(g.mu, (d,)), ad.reshape(g.sigma, (d,)))


def deterministic_code(model: RnpModel, subseqs: Sequence[Subsequence]) -> Tensor | None:
    if not model.config.use_deterministic_path:
        return None
    if not subseqs:
        return ad.constant(np.zeros(model.config.hidden_size))
    return summarize_context(model, subseqs, deterministic=True)


# --- decoding -------------------------------------------------------------


def decoder_context(model: RnpModel, v, r_det=None, batch: int | None = None) -> Tensor:
    v = _as_batch(v, batch)
    if v.shape[1] != model.config.latent_dim:
        raise ValueError(f"v has {v.shape[1]} dims, model expects {model.config.latent_dim}")
    if not model.config.use_deterministic_path:
        return v
    if r_det is None:
        raise ValueError("model uses a deterministic path but r_det is missing")
    return ad.concat([v, _as_batch(r_det, v.shape[0])], axis=1)


def decode_steps(model: RnpModel, ctx: Tensor, xs: np.ndarray, ys: np.ndarray | None) -> list[DiagGaussian]:
    """Teacher-forced decoding of ``xs`` ``[B, T, dx]`` given true ``ys`` ``[B, T, dy]``.

    The previous target fed at step 0 is zero.
    """
    batch, steps = xs.shape[0], xs.shape[1]
    if steps < 1:
        raise ValueError("target sequence is empty")
    dy = model.config.target_dim
    state = model.decoder_start(ctx)
    out = []
    y_prev = np.zeros((batch, dy))
    for t in range(steps):
        g, state = model.decoder_step(ctx, ad.constant(xs[:, t, :]), ad.constant(y_prev), state)
        out.append(g)
        if ys is not None:
            y_prev = ys[:, t, :]
    return out


def decode_teacher_forced(model: RnpModel, v, r_det, target: Subsequence) -> list[PredictiveStep]:
    ctx = decoder_context(model, v, r_det)
    gs = decode_steps(model, ctx, target.xs[None], target.ys[None])
    return [
        PredictiveStep(g.mu.data[0].copy(), g.sigma.data[0].copy(), target.ys[t].copy())
        for t, g in enumerate(gs)
    ]


def _percentiles(samples: np.ndarray, lo: float = 5.0, hi: float = 95.0):
    return np.percentile(samples, lo, axis=1), np.percentile(samples, hi, axis=1)


def _draw_context(model, context, n_samples, rng):
    q = infer_latent(model, context)
    eps = rng.standard_normal((n_samples, model.config.latent_dim))
    v = q.mu.data[None, :] + q.sigma.data[None, :] * eps
    r_det = deterministic_code(model, context)
    return decoder_context(model, v, r_det, n_samples)


def predict_autoregressive(
    model: RnpModel,
    context: Sequence[Subsequence],
    xs: np.ndarray,
    n_samples: int = 200,
    rng: np.random.Generator | None = None,
) -> dict[str, np.ndarray]:
    """Free-running forecast feeding back predicted means.

    Returns ``mean``, ``p5``, ``p95`` (each ``[T, target_dim]``) and the raw
    ``samples`` ``[T, n_samples, target_dim]``.
    """
    if n_samples < 2:
        raise ValueError("n_samples must be at least 2")
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    if len(xs) == 0:
        raise ValueError("no future inputs given")
    rng = rng if rng is not None else np.random.default_rng(0)
    dy = model.config.target_dim
    with ad.no_grad():
        ctx = _draw_context(model, context, n_samples, rng)
        state = model.decoder_start(ctx)
        y_prev = np.zeros((n_samples, dy))
        samples = np.empty((len(xs), n_samples, dy))
        for t in range(len(xs)):
            x_t = np.repeat(xs[t][None, :], n_samples, axis=0)
            g, state = model.decoder_step(ctx, ad.constant(x_t), ad.constant(y_prev), state)
            mu, sigma = g.mu.data, g.sigma.data
            samples[t] = mu + sigma * rng.standard_normal(mu.shape)
            y_prev = mu
    p5, p95 = _percentiles(samples)
    return {"mean": samples.mean(axis=1), "p5": p5, "p95": p95, "samples": samples}


def predict_one_step(
    model: RnpModel,
    context: Sequence[Subsequence],
    target: Subsequence,
    n_samples: int = 200,
    rng: np.random.Generator | None = None,
) -> dict[str, np.ndarray]:
    """One-step-ahead predictions over ``target`` using the true previous ``y``.

    ``mean`` averages the predicted means over latent draws; ``samples`` holds
    one observation draw per latent draw and step.
    """
    if n_samples < 2:
        raise ValueError("n_samples must be at least 2")
    rng = rng if rng is not None else np.random.default_rng(0)
    with ad.no_grad():
        ctx = _draw_context(model, context, n_samples, rng)
        xs = np.repeat(target.xs[None], n_samples, axis=0)
        ys = np.repeat(target.ys[None], n_samples, axis=0)
        gs = decode_steps(model, ctx, xs, ys)
    mus = np.stack([g.mu.data for g in gs])  # [T, S, dy]
    sigmas = np.stack([g.sigma.data for g in gs])
    samples = mus + sigmas * rng.standard_normal(mus.shape)
    p5, p95 = _percentiles(samples)
    return {
        "mean": mus.mean(axis=1),
        "stddev": np.sqrt((sigmas**2 + mus**2).mean(axis=1) - mus.mean(axis=1) ** 2),
        "p5": p5,
        "p95": p95,
        "samples": samples,
        "target": target.ys.copy(),
    }


def np_static_predict(model: RnpModel, context_points, x_targets) -> list[PredictiveStep]:
    """Plain NP regression: each context ``(x, y)`` point is a length-1 subsequence.

    Needs a feedforward decoder; predictions use the posterior mean of ``v``.
    """
    if model.config.decoder_kind != "feedforward":
        raise ValueError("static NP prediction needs decoder_kind='feedforward'")
    context = points_to_subsequences(context_points)
    if not context:
        raise ValueError("context is empty")
    xt = np.asarray(x_targets, dtype=np.float64).reshape(len(x_targets), -1)
    with ad.no_grad():
        q = infer_latent(model, context)
        ctx = decoder_context(model, q.mu, deterministic_code(model, context), len(xt))
        g, _ = model.decoder_step(ctx, ad.constant(xt), None, None)
    return [PredictiveStep(g.mu.data[i].copy(), g.sigma.data[i].copy()) for i in range(len(xt))]


def points_to_subsequences(points) -> list[Subsequence]:
    return [
        Subsequence(0, np.reshape(np.asarray(x, dtype=np.float64), (1, -1)),
                    np.reshape(np.asarray(y, dtype=np.float64), (1, -1)))
        for x, y in points
    ]
