"""Type-II maximum likelihood for RBF GP hyperparameters."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.optimize import minimize

from .kernel_gp import DTYPE, Dataset, FactorizationError, KernelConfig, cholesky, gram

log = logging.getLogger(__name__)

VARIANCE_BOUNDS = (0.01, 2.0)
LENGTHSCALE_BOUNDS = (0.01, 2.0)
NOISE_BOUNDS = (1e-4, 1.0)


class FitError(RuntimeError):
    def __init__(self, message: str, diagnostics: list | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or []


@dataclass
class FitResult:
    config: KernelConfig
    log_marginal_likelihood: float
    restart_index: int
    converged: bool
    init_log_marginal_likelihoods: list = field(default_factory=list)


def _unpack(theta: torch.Tensor, dim: int) -> KernelConfig:
    e = torch.exp(theta)
    return KernelConfig(e[0], e[1:1 + dim], e[1 + dim])


def log_marginal_likelihood(theta, data: Dataset) -> torch.Tensor:
    """``log N(Y | 0, K + noise*I)`` at log-parameters ``(log v, log l_1..D, log noise)``."""
    theta = torch.as_tensor(theta, dtype=DTYPE)
    cfg = _unpack(theta, data.dim)
    n = len(data)
    K = gram(data.X, data.X, cfg) + cfg.noise_variance * torch.eye(n, dtype=DTYPE)
    L = cholesky(K)
    alpha = torch.linalg.solve_triangular(L, data.Y.unsqueeze(-1), upper=False).squeeze(-1)
    logdet = 2.0 * torch.log(torch.diagonal(L)).sum()
    return -0.5 * (alpha @ alpha) - 0.5 * logdet - 0.5 * n * math.log(2 * math.pi)


def log_bounds(dim: int) -> list[tuple[float, float]]:
    b = [VARIANCE_BOUNDS] + [LENGTHSCALE_BOUNDS] * dim + [NOISE_BOUNDS]
    return [(math.log(lo), math.log(hi)) for lo, hi in b]


def fit_gp_type2(
    data: Dataset, rng: np.random.Generator | int | None = None, restarts: int = 5, maxiter: int = 200
) -> FitResult:
    """Maximize the marginal likelihood from ``restarts`` random starts (L-BFGS-B
    on log-parameters); the best restart wins."""
    if len(data) < 2:
        raise ValueError("need at least two observations to fit hyperparameters")
    rng = np.random.default_rng(rng)
    bounds = log_bounds(data.dim)
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])

    def objective(x):
        theta = torch.tensor(x, dtype=DTYPE, requires_grad=True)
        lml = log_marginal_likelihood(theta, data)
        (grad,) = torch.autograd.grad(lml, theta)
        return -lml.item(), -grad.numpy()

    best = None
    inits, failures = [], []
    for i in range(restarts):
        x0 = rng.uniform(lo, hi)
        try:
            f0, _ = objective(x0)
        except FactorizationError as exc:
            failures.append({"restart": i, "x0": x0.tolist(), "error": str(exc)})
            continue
        inits.append(-f0)
        candidates = [(f0, x0, False)]
        try:
            res = minimize(objective, x0, jac=True, method="L-BFGS-B", bounds=bounds,
                           options={"maxiter": maxiter})
            if np.isfinite(res.fun):
                candidates.append((res.fun, res.x, bool(res.success)))
        except FactorizationError as exc:
            failures.append({"restart": i, "x0": x0.tolist(), "error": str(exc)})
        f, x, ok = min(candidates, key=lambda c: c[0])
        if best is None or f < best[0]:
            best = (f, x, ok, i)
    if best is None:
        raise FitError("all restarts failed", failures)
    f, x, ok, i = best
    cfg = _unpack(torch.tensor(x, dtype=DTYPE), data.dim)
    return FitResult(cfg, -float(f), i, ok, inits)


def posterior_mean(cfg: KernelConfig, data: Dataset, X) -> np.ndarray:
    """Noise-free predictive mean at ``X``."""
    X = torch.as_tensor(np.asarray(X), dtype=DTYPE)
    n = len(data)
    K = gram(data.X, data.X, cfg) + cfg.noise_variance * torch.eye(n, dtype=DTYPE)
    L = cholesky(K)
    alpha = torch.cholesky_solve(data.Y.unsqueeze(-1), L).squeeze(-1)
    return (gram(X, data.X, cfg) @ alpha).numpy()
