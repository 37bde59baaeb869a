"""Fast numerical oracle checks runnable from an installed package."""

from __future__ import annotations

import itertools
import math

import numpy as np
import torch

from .evalreport import wilcoxon_signed_rank
from .kernel_gp import DTYPE, Dataset, KernelConfig, gaussian_entropy, gaussian_log_pdf, gp_posterior
from .rff import SampledFunction


def _check_posterior(rng) -> float:
    worst = 0.0
    for _ in range(20):
        D = int(rng.integers(1, 3))
        n, m = int(rng.integers(0, 5)), int(rng.integers(1, 4))
        v, s2 = rng.uniform(0.5, 1.0), rng.uniform(0.01, 0.5)
        ls = rng.uniform(0.1, 1.0, size=D)
        X = rng.uniform(size=(n + m, D))
        Y = rng.normal(size=n + m)
        d = (X[:, None, :] - X[None, :, :]) / ls
        C = v * np.exp(-0.5 * (d**2).sum(-1)) + s2 * np.eye(n + m)
        A, B, Cm = C[:n, :n], C[:n, n:], C[n:, n:]
        mu = B.T @ np.linalg.solve(A, Y[:n]) if n else np.zeros(m)
        S = Cm - (B.T @ np.linalg.solve(A, B) if n else 0)
        lp = -0.5 * (m * math.log(2 * math.pi) + np.linalg.slogdet(S)[1]) - 0.5 * (Y[n:] - mu) @ np.linalg.solve(S, Y[n:] - mu)
        cfg = KernelConfig(v, ls, s2)
        pred = gp_posterior(Dataset(torch.tensor(X[:n]).reshape(n, D), torch.tensor(Y[:n])), torch.tensor(X[n:]), cfg)
        ent = 0.5 * m * math.log(2 * math.pi * math.e) + 0.5 * np.linalg.slogdet(S)[1]
        worst = max(
            worst,
            np.abs(pred.mean.numpy() - mu).max(),
            np.abs(pred.cov.numpy() - S).max(),
            abs(float(gaussian_log_pdf(torch.tensor(Y[n:]), pred)) - lp),
            abs(float(gaussian_entropy(pred)) - ent),
        )
    return worst


def _check_wilcoxon(rng) -> float:
    worst = 0.0
    for n in range(5, 11):
        a, b = rng.normal(size=n), rng.normal(size=n)
        d = a - b
        ranks = np.argsort(np.argsort(np.abs(d))) + 1
        obs = ranks[d > 0].sum()
        hits = sum(ranks[np.array(s, bool)].sum() <= obs for s in itertools.product((0, 1), repeat=n))
        worst = max(worst, abs(wilcoxon_signed_rank(a, b) - hits / 2**n))
    return worst


def _check_window_mean(rng) -> float:
    worst = 0.0
    grid = (np.arange(300) + 0.5) / 300
    for _ in range(10):
        a = rng.normal(size=(1, 2)) * 5
        b = rng.uniform(0, 2 * math.pi, size=1)
        f = SampledFunction.from_features(torch.ones(1, dtype=DTYPE), torch.tensor(a), torch.tensor(b), 1.0)
        g1, g2 = np.meshgrid(grid, grid, indexing="ij")
        vals = math.sqrt(2.0) * np.cos(a[0, 0] * g1 + a[0, 1] * g2 + b[0])
        worst = max(worst, abs(float(f.window_mean_shift) - vals.mean()))
    return worst


CHECKS = [
    ("GP posterior / log-pdf / entropy vs dense conditioning", _check_posterior, 1e-8),
    ("signed-rank p-value vs sign enumeration", _check_wilcoxon, 1e-12),
    ("RFF window mean vs 300x300 midpoint quadrature", _check_window_mean, 1e-3),
]


def run_selftest(seed: int = 0) -> bool:
    rng = np.random.default_rng(seed)
    ok = True
    for name, fn, tol in CHECKS:
        err = fn(rng)
        passed = err < tol
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'}  {name}: max error {err:.2e} (tol {tol:g})")
    return ok
