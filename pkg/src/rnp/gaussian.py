"""Diagonal Gaussians: heads, reparameterised samples, KL and log-likelihood."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

SIGMA_FLOOR = 0.01
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass
class DiagGaussian:
    """Mean and standard deviation along the last axis (batched rows allowed)."""

    mu: Tensor
    sigma: Tensor

    def __post_init__(self):
        if self.mu.shape != self.sigma.shape:
            raise ValueError(f"mu {self.mu.shape} and sigma {self.sigma.shape} differ")

    @property
    def dim(self) -> int:
        return self.mu.shape[-1]

    @classmethod
    def standard(cls, dim: int, batch: int | None = None) -> "DiagGaussian":
        shape = (dim,) if batch is None else (batch, dim)
        return cls(ad.constant(np.zeros(shape)), ad.constant(np.ones(shape)))


def positive_sigma(raw: Tensor, floor: float = SIGMA_FLOOR) -> Tensor:
    return ad.shift(ad.scale(ad.softplus(raw), 1.0 - floor), floor)


def gaussian_head(h: Tensor, head=None, floor: float = SIGMA_FLOOR) -> DiagGaussian:
    """Split a head output ``[..., 2*d]`` into mean and floored softplus stddev.

    If ``head`` is given it is applied to ``h`` first.
    """
    out = head(h) if head is not None else h
    n = out.shape[-1]
    if n % 2:
        raise ValueError(f"head output size {n} is odd; expected 2 * latent_dim")
    axis = out.data.ndim - 1
    d = n // 2
    mu = ad.slice_(out, axis, 0, d)
    sigma = positive_sigma(ad.slice_(out, axis, d, n), floor)
    return DiagGaussian(mu, sigma)


def sample_reparam(g: DiagGaussian, noise) -> Tensor:
    """``mu + sigma * noise``; noise is a constant standard-normal draw."""
    noise = noise if isinstance(noise, Tensor) else ad.constant(noise)
    if noise.shape != g.mu.shape:
        raise ValueError(f"noise shape {noise.shape} does not match {g.mu.shape}")
    return g.mu + g.sigma * noise


def kl_diag(q: DiagGaussian, p: DiagGaussian) -> Tensor:
    """KL(q || p) summed over the last axis."""
    if q.mu.shape != p.mu.shape:
        raise ValueError(f"KL between mismatched shapes {q.mu.shape} and {p.mu.shape}")
    log_sq = ad.log(q.sigma)
    log_sp = ad.log(p.sigma)
    inv_var_p = ad.exp(ad.scale(log_sp, -2.0))
    num = ad.square(q.sigma) + ad.square(q.mu - p.mu)
    terms = (log_sp - log_sq) + ad.scale(num * inv_var_p, 0.5)
    axis = terms.data.ndim - 1
    return ad.shift(ad.reduce_sum(terms, axis), -0.5 * q.mu.shape[-1])


def gauss_loglik(y, g: DiagGaussian) -> Tensor:
    """Log density of ``y`` under ``g``, summed over the last axis."""
    y = y if isinstance(y, Tensor) else ad.constant(y)
    if y.shape != g.mu.shape:
        raise ValueError(f"target shape {y.shape} does not match {g.mu.shape}")
    log_s = ad.log(g.sigma)
    z = (y - g.mu) * ad.exp(ad.scale(log_s, -1.0))
    terms = ad.scale(ad.square(z), -0.5) - log_s
    axis = terms.data.ndim - 1
    return ad.shift(ad.reduce_sum(terms, axis), -HALF_LOG_2PI * y.shape[-1])
