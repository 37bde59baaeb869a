"""Random-Fourier-feature draws from an RBF Gaussian process.

A sampled function is ``sqrt(v) * sum_l w_l sqrt(2/L) cos(a_l . x + b_l)`` minus
its analytic mean over the unit cube, so every draw is cheap to evaluate at
arbitrary inputs and consistent across evaluations.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import torch
from torch import Tensor

from .kernel_gp import DTYPE, KernelConfig, as_tensor

# a feature dimension with |a_d| below this counts as zero in the window integral
NEAR_ZERO = 1e-5
GUARD_MAGNITUDE = 1e5


@dataclass(frozen=True)
class SampledFunction:
    """Feature weights ``weights`` (``... x L``), frequencies ``freqs``
    (``... x L x D``), phases ``phases`` (``... x L``), amplitude
    ``variance_scale`` (``...``) and the cached ``window_mean_shift``."""

    weights: Tensor
    freqs: Tensor
    phases: Tensor
    variance_scale: Tensor
    window_mean_shift: Tensor

    @property
    def num_features(self) -> int:
        return self.weights.shape[-1]

    @property
    def dim(self) -> int:
        return self.freqs.shape[-1]

    @property
    def batch_shape(self) -> torch.Size:
        return self.weights.shape[:-1]

    @classmethod
    def from_features(cls, weights, freqs, phases, variance) -> "SampledFunction":
        """Build a centered function from explicit feature parameters."""
        weights = as_tensor(weights)
        freqs = as_tensor(freqs)
        phases = as_tensor(phases)
        scale = torch.sqrt(as_tensor(variance))
        shift = torch.zeros_like(scale)
        raw = cls(weights, freqs, phases, scale, shift)
        return cls(weights, freqs, phases, scale, window_mean(raw))

    def uncentered(self) -> "SampledFunction":
        return SampledFunction(
            self.weights,
            self.freqs,
            self.phases,
            self.variance_scale,
            torch.zeros_like(self.window_mean_shift),
        )

    def __getitem__(self, idx) -> "SampledFunction":
        return SampledFunction(
            self.weights[idx],
            self.freqs[idx],
            self.phases[idx],
            self.variance_scale[idx],
            self.window_mean_shift[idx],
        )

    def __call__(self, X) -> Tensor:
        return evaluate(self, X)


def sample_function(
    cfg: KernelConfig, L: int = 100, generator: torch.Generator | None = None
) -> SampledFunction:
    """Draw one function per entry of ``cfg``'s batch shape."""
    if L < 1:
        raise ValueError("need at least one feature")
    batch = cfg.batch_shape
    D = cfg.dim
    weights = torch.randn(batch + (L,), generator=generator, dtype=DTYPE)
    freqs = torch.randn(batch + (L, D), generator=generator, dtype=DTYPE)
    freqs = freqs / cfg.lengthscales.unsqueeze(-2)
    phases = 2.0 * math.pi * torch.rand(batch + (L,), generator=generator, dtype=DTYPE)
    return SampledFunction.from_features(weights, freqs, phases, cfg.variance)


def evaluate(f: SampledFunction, X) -> Tensor:
    """Values at ``X`` (``... x n x D``); batch dims broadcast against ``f``'s."""
    X = as_tensor(X)
    L = f.num_features
    # (..., n, L), accumulated per dimension rather than by matmul so that a
    # point's value does not depend on the batch it is evaluated in
    arg = f.phases.unsqueeze(-2)
    for d in range(f.dim):
        arg = arg + X[..., d : d + 1] * f.freqs[..., d].unsqueeze(-2)
    feats = torch.cos(arg) * math.sqrt(2.0 / L)
    raw = (feats * f.weights.unsqueeze(-2)).sum(-1)
    return f.variance_scale[..., None] * raw - f.window_mean_shift[..., None]


def _antiderivative(x: Tensor, order: int) -> Tensor:
    # order-th antiderivative of cos
    return torch.cos(x - order * math.pi / 2.0)


def window_mean(f: SampledFunction) -> Tensor:
    """Analytic mean of the uncentered function over ``[0, 1]^D``.

    Each feature integrates separably; features whose frequency vector has a
    near-zero component use the guard magnitude in place of ``|1 / prod a_d|``
    with the sign of the product kept.
    """
    a = f.freqs
    D = f.dim
    total = torch.zeros(a.shape[:-1], dtype=DTYPE)
    for corner in itertools.product((0.0, 1.0), repeat=D):
        s = torch.tensor(corner, dtype=DTYPE)
        sign = (-1.0) ** (D - int(sum(corner)))
        total = total + sign * _antiderivative(a @ s + f.phases, D)
    prod = a.prod(-1)
    small = (a.abs() < NEAR_ZERO).any(-1)
    prod_sign = torch.where(prod < 0, -1.0, 1.0).to(DTYPE)
    safe = torch.where(small, torch.ones_like(prod), prod)
    inv = torch.where(small, prod_sign * GUARD_MAGNITUDE, 1.0 / safe)
    L = f.num_features
    per_feature = f.weights * math.sqrt(2.0 / L) * inv * total
    return f.variance_scale * per_feature.sum(-1)
