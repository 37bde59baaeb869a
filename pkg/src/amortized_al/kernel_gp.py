"""Exact Gaussian-process algebra for an RBF (ARD) kernel.

Every function accepts optional leading batch dimensions so that thousands of
simulated experiments can be conditioned in one call. Tensors are float64
throughout; all operations are differentiable with torch autograd.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
from torch import Tensor

DTYPE = torch.float64
JITTER_LADDER = (1e-8, 1e-7, 1e-6, 1e-5, 1e-4)
LOG_2PI = math.log(2.0 * math.pi)


class FactorizationError(RuntimeError):
    """Cholesky failed even after jitter escalation.

    ``indices`` lists the batch positions whose matrices failed.
    """

    def __init__(self, message: str, indices: list | None = None):
        super().__init__(message)
        self.indices = indices or []


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x if x.dtype == DTYPE else x.to(DTYPE)
    return torch.as_tensor(x, dtype=DTYPE)


@dataclass(frozen=True)
class KernelConfig:
    """RBF hyperparameters plus observation noise.

    ``variance`` has shape ``batch``, ``lengthscales`` ``batch + (D,)`` and
    ``noise_variance`` ``batch``; an empty batch shape is a single config.
    """

    variance: Tensor
    lengthscales: Tensor
    noise_variance: Tensor

    def __post_init__(self):
        v = as_tensor(self.variance)
        ls = as_tensor(self.lengthscales)
        s2 = as_tensor(self.noise_variance)
        if ls.dim() == 0:
            ls = ls.reshape(1)
        object.__setattr__(self, "variance", v)
        object.__setattr__(self, "lengthscales", ls)
        object.__setattr__(self, "noise_variance", s2)
        if ls.shape[:-1] != v.shape or s2.shape != v.shape:
            raise ValueError(
                f"inconsistent batch shapes: variance {tuple(v.shape)}, "
                f"lengthscales {tuple(ls.shape)}, noise {tuple(s2.shape)}"
            )
        with torch.no_grad():
            if not (bool((v > 0).all()) and bool((ls > 0).all()) and bool((s2 > 0).all())):
                raise ValueError("kernel hyperparameters must be strictly positive")

    @property
    def dim(self) -> int:
        return self.lengthscales.shape[-1]

    @property
    def batch_shape(self) -> torch.Size:
        return self.variance.shape

    @classmethod
    def stack(cls, configs: Sequence["KernelConfig"]) -> "KernelConfig":
        return cls(
            torch.stack([c.variance for c in configs]),
            torch.stack([c.lengthscales for c in configs]),
            torch.stack([c.noise_variance for c in configs]),
        )

    def __getitem__(self, idx) -> "KernelConfig":
        return KernelConfig(
            self.variance[idx], self.lengthscales[idx], self.noise_variance[idx]
        )

    def to_dict(self) -> dict:
        return {
            "variance": self.variance.tolist(),
            "lengthscales": self.lengthscales.tolist(),
            "noise_variance": self.noise_variance.tolist(),
        }


@dataclass(frozen=True)
class Dataset:
    """Ordered inputs ``X`` (``... x N x D``) and outputs ``Y`` (``... x N``)."""

    X: Tensor
    Y: Tensor

    def __post_init__(self):
        X = as_tensor(self.X)
        Y = as_tensor(self.Y)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Y", Y)
        if X.dim() < 2 or X.shape[:-1] != Y.shape:
            raise ValueError(f"X {tuple(X.shape)} and Y {tuple(Y.shape)} do not pair up")

    @classmethod
    def empty(cls, dim: int) -> "Dataset":
        return cls(torch.zeros(0, dim, dtype=DTYPE), torch.zeros(0, dtype=DTYPE))

    def __len__(self) -> int:
        return self.X.shape[-2]

    @property
    def dim(self) -> int:
        return self.X.shape[-1]

    def append(self, x, y) -> "Dataset":
        x = as_tensor(x).unsqueeze(-2)
        y = as_tensor(y).unsqueeze(-1)
        return Dataset(torch.cat([self.X, x], dim=-2), torch.cat([self.Y, y], dim=-1))

    def concat(self, other: "Dataset") -> "Dataset":
        return Dataset(
            torch.cat([self.X, other.X], dim=-2), torch.cat([self.Y, other.Y], dim=-1)
        )


@dataclass(frozen=True)
class GaussianPredictive:
    mean: Tensor
    cov: Tensor

    @property
    def size(self) -> int:
        return self.mean.shape[-1]


def cholesky(A: Tensor, jitter: float = 0.0) -> Tensor:
    """Lower Cholesky factor of ``A + jitter*I``, escalating the jitter on failure.

    The ladder tries ``jitter`` first, then 1e-8 up to 1e-4 (x10 per rung).
    """
    eye = torch.eye(A.shape[-1], dtype=A.dtype)
    rungs = [jitter] + [j for j in JITTER_LADDER if j > jitter]
    for j in rungs:
        L, info = torch.linalg.cholesky_ex(A + j * eye if j else A)
        if not bool((info != 0).any()):
            return L
    bad = [tuple(i) for i in (info != 0).nonzero().tolist()]
    raise FactorizationError(
        f"Cholesky failed with jitter up to {JITTER_LADDER[-1]:g} at batch "
        f"indices {bad[:10]}; covariance is ill-conditioned (check hyperparameters)",
        bad,
    )


def rbf_kernel(x, x2, cfg: KernelConfig) -> Tensor:
    """``v * exp(-0.5 * sum_d ((x_d - x2_d) / l_d)^2)`` for single points."""
    x = as_tensor(x)
    x2 = as_tensor(x2)
    z = (x - x2) / cfg.lengthscales
    return cfg.variance * torch.exp(-0.5 * (z * z).sum(-1))


def gram(Xa, Xb, cfg: KernelConfig) -> Tensor:
    Xa = as_tensor(Xa)
    Xb = as_tensor(Xb)
    ls = cfg.lengthscales.unsqueeze(-2)
    A = Xa / ls
    B = Xb / ls
    diff = A.unsqueeze(-2) - B.unsqueeze(-3)
    sq = (diff * diff).sum(-1)
    return cfg.variance[..., None, None] * torch.exp(-0.5 * sq)


def _noise_eye(cfg: KernelConfig, n: int) -> Tensor:
    return cfg.noise_variance[..., None, None] * torch.eye(n, dtype=DTYPE)


def gp_posterior(
    data: Dataset, X_test, cfg: KernelConfig, jitter: float = 0.0
) -> GaussianPredictive:
    """Predictive distribution of noisy outputs at ``X_test`` given ``data``.

    The covariance includes the observation noise on its diagonal. With an
    empty dataset the zero-mean prior is returned.
    """
    X_test = as_tensor(X_test)
    n = X_test.shape[-2]
    if n == 0:
        raise ValueError("X_test must be nonempty")
    K_tt = gram(X_test, X_test, cfg) + _noise_eye(cfg, n)
    if len(data) == 0:
        batch = K_tt.shape[:-2]
        return GaussianPredictive(torch.zeros(batch + (n,), dtype=DTYPE), K_tt)
    N = len(data)
    batch = torch.broadcast_shapes(data.X.shape[:-2], X_test.shape[:-2], cfg.batch_shape)
    L = cholesky(gram(data.X, data.X, cfg) + _noise_eye(cfg, N), jitter)
    L = L.expand(batch + (N, N))
    K_xt = gram(data.X, X_test, cfg).expand(batch + (N, n))
    Y = data.Y.expand(batch + (N,))
    V = torch.linalg.solve_triangular(L, K_xt, upper=False)
    alpha = torch.linalg.solve_triangular(L, Y.unsqueeze(-1), upper=False)
    mean = (V.transpose(-1, -2) @ alpha).squeeze(-1)
    cov = K_tt - V.transpose(-1, -2) @ V
    cov = 0.5 * (cov + cov.transpose(-1, -2))
    return GaussianPredictive(mean, cov)


def predictive_variance(data: Dataset, X_test, cfg: KernelConfig, jitter: float = 0.0) -> Tensor:
    """Diagonal of :func:`gp_posterior`'s covariance without forming the full matrix."""
    X_test = as_tensor(X_test)
    prior = cfg.variance[..., None] + cfg.noise_variance[..., None]
    prior = prior.expand(torch.broadcast_shapes(prior.shape, X_test.shape[:-1]))
    if len(data) == 0:
        return prior.clone()
    N = len(data)
    batch = torch.broadcast_shapes(data.X.shape[:-2], X_test.shape[:-2], cfg.batch_shape)
    L = cholesky(gram(data.X, data.X, cfg) + _noise_eye(cfg, N), jitter).expand(batch + (N, N))
    K_xt = gram(data.X, X_test, cfg).expand(batch + (N, X_test.shape[-2]))
    V = torch.linalg.solve_triangular(L, K_xt, upper=False)
    return prior - (V * V).sum(-2)


def gaussian_log_pdf(y, pred: GaussianPredictive, jitter: float = 0.0) -> Tensor:
    y = as_tensor(y)
    if y.shape[-1] != pred.size:
        raise ValueError(f"y has {y.shape[-1]} entries, predictive has {pred.size}")
    L = cholesky(pred.cov, jitter)
    r = y - pred.mean
    batch = torch.broadcast_shapes(r.shape[:-1], L.shape[:-2])
    n = pred.size
    z = torch.linalg.solve_triangular(
        L.expand(batch + (n, n)), r.expand(batch + (n,)).unsqueeze(-1), upper=False
    ).squeeze(-1)
    logdet = 2.0 * torch.log(torch.diagonal(L, dim1=-2, dim2=-1)).sum(-1)
    return -0.5 * (n * LOG_2PI + logdet) - 0.5 * (z * z).sum(-1)


def gaussian_entropy(pred: GaussianPredictive, jitter: float = 0.0) -> Tensor:
    L = cholesky(pred.cov, jitter)
    logdet = 2.0 * torch.log(torch.diagonal(L, dim1=-2, dim2=-1)).sum(-1)
    n = pred.size
    return 0.5 * n * (LOG_2PI + 1.0) + 0.5 * logdet
