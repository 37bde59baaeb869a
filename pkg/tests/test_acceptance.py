"""Acceptance criteria, one test per criterion. A PASS/FAIL line per criterion
is printed in the terminal summary."""

import math
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from amortized_al.benchmarks import get_problem, ingest_airline, ingest_lgbb
from amortized_al.cli import main
from amortized_al.deploy import ALTrace, deploy
from amortized_al.evalreport import trace_rmse, wilcoxon_signed_rank
from amortized_al.fit import log_marginal_likelihood
from amortized_al.kernel_gp import DTYPE, Dataset, KernelConfig, gaussian_entropy, gaussian_log_pdf, gp_posterior
from amortized_al.objectives import LOSSES
from amortized_al.policy import init_policy, save_checkpoint
from amortized_al.rff import evaluate, sample_function, window_mean
from amortized_al.trainer import TrainConfig, lr_at, sample_episodes, sample_prior, simulate, train
from conftest import random_config
from oracles import central_difference, entropy_dense, logpdf_dense, posterior_dense, signed_rank_p_enumerated
from test_objectives import dense_losses, make_batch, random_instance
from test_rff import trapezoid_mean_1d, trapezoid_mean_2d

pytestmark = pytest.mark.acceptance


def t(x):
    return torch.as_tensor(np.asarray(x, dtype=float), dtype=DTYPE)


def test_criterion_1_gp_math_oracle_equivalence():
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    for _ in range(60):
        D = int(rng.integers(1, 3))
        # kernel_gp operations
        n, m = int(rng.integers(0, 7)), int(rng.integers(1, 6))
        cfg = random_config(rng, D)
        v, ls, s2 = float(cfg.variance), cfg.lengthscales.numpy(), float(cfg.noise_variance)
        X, Y, Xt, yt = rng.uniform(size=(n, D)), rng.normal(size=n), rng.uniform(size=(m, D)), rng.normal(size=m)
        pred = gp_posterior(Dataset(t(X).reshape(n, D), t(Y)), t(Xt), cfg)
        mu, S = posterior_dense(X, Y, Xt, v, ls, s2)
        assert np.abs(pred.mean.numpy() - mu).max() < 1e-6
        assert np.abs(pred.cov.numpy() - S).max() < 1e-6
        assert abs(float(gaussian_log_pdf(t(yt), pred)) - logpdf_dense(yt, mu, S)) < 1e-6
        assert abs(float(gaussian_entropy(pred)) - entropy_dense(S)) < 1e-6
        # all four losses, N_init + T + N_grid <= 12
        N, T = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        G = int(rng.integers(0, 12 - N - T + 1))
        cfgs, a = random_instance(rng, 2, N, T, G, D)
        batch = make_batch(cfgs, **a)
        want = dense_losses(cfgs, a)
        for name, fn in LOSSES.items():
            assert abs(float(fn(batch)) - want[name]) < 1e-6, name
    assert time.perf_counter() - start < 60


def test_criterion_2_rff_fidelity():
    start = time.perf_counter()
    N = 50_000
    base = KernelConfig(1.0, [0.3], 0.01)
    f = sample_function(KernelConfig.stack([base] * N), 100, torch.Generator().manual_seed(7)).uncentered()
    pairs = np.random.default_rng(7).uniform(size=(10, 2))
    vals = evaluate(f, t(pairs.reshape(1, 20, 1))).numpy()
    for i, (x, xp) in enumerate(pairs):
        emp = np.mean(vals[:, 2 * i] * vals[:, 2 * i + 1])
        k = math.exp(-0.5 * ((x - xp) / 0.3) ** 2)
        assert abs(emp - k) < 0.02
    gen = torch.Generator().manual_seed(8)
    for D, quad in ((1, trapezoid_mean_1d), (2, trapezoid_mean_2d)):
        fs = sample_function(KernelConfig.stack([KernelConfig(1.0, [0.3] * D, 0.01)] * 5), 100, gen).uncentered()
        for k in range(5):
            assert abs(float(window_mean(fs[k])) - quad(fs[k])) < 1e-3
    assert time.perf_counter() - start < 300


def _rel_err(analytic, fd):
    return np.linalg.norm(np.asarray(analytic) - fd) / max(np.linalg.norm(fd), 1e-8)


def test_criterion_3_gradient_contract():
    rng = np.random.default_rng(3)
    h = 1e-4
    policy = init_policy(2, seed=3)

    def probe(evaluate_fn):
        """Central differences over a random subset of parameter entries."""
        picks = []
        for prm in policy.parameters():
            flat = prm.data.view(-1)
            for i in rng.choice(flat.numel(), size=min(2, flat.numel()), replace=False):
                picks.append((prm, int(i)))
        analytic, fd = [], []
        for prm, i in picks:
            analytic.append(float(prm.grad.view(-1)[i]))
            flat = prm.data.view(-1)
            orig = float(flat[i])
            with torch.no_grad():
                flat[i] = orig + h
                up = evaluate_fn()
                flat[i] = orig - h
                down = evaluate_fn()
                flat[i] = orig
            fd.append((up - down) / (2 * h))
        return np.array(analytic), np.array(fd)

    # policy forward
    X, Y = t(rng.uniform(size=(6, 2))), t(rng.normal(size=6))
    policy.zero_grad()
    policy(X, Y).sum().backward()
    a, fd = probe(lambda: float(policy(X, Y).sum()))
    assert _rel_err(a, fd) < 1e-2

    # all four losses through a frozen rollout
    gen = torch.Generator().manual_seed(4)
    episodes = sample_episodes(sample_prior(gen, 2, (2,)), 1, 2, 1, 2, gen, num_features=20, n_grid=10)
    for name, loss in LOSSES.items():
        policy.zero_grad()
        loss(simulate(policy, episodes)).backward()
        a, fd = probe(lambda: float(loss(simulate(policy, episodes))))
        assert _rel_err(a, fd) < 1e-2, name

    # Type-II ML objective
    data = Dataset(t(rng.uniform(size=(15, 2))), t(rng.normal(size=15)))
    theta0 = np.log([0.7, 0.3, 0.6, 0.05])
    theta = torch.tensor(theta0, requires_grad=True)
    (g,) = torch.autograd.grad(log_marginal_likelihood(theta, data), theta)
    fd = central_difference(lambda th: float(log_marginal_likelihood(th, data)), theta0, h)
    assert _rel_err(g.numpy(), fd) < 1e-2


def test_criterion_4_structural_fidelity(tmp_path):
    for D, problem, total in ((1, "sin", 11), (2, "branin", 21)):
        ckpt = tmp_path / f"p{D}.ckpt"
        save_checkpoint(init_policy(D), ckpt)
        out = tmp_path / f"traces{D}"
        assert main(["deploy", "--method", "policy", "--problem", problem, "--ckpt", str(ckpt),
                     "--seeds", "0", "--out", str(out)]) == 0
        trace = ALTrace.load(out / problem / "policy" / "seed_0.json")
        assert len(trace.final_dataset()) == total
    assert TrainConfig().experiments_per_step == 6250
    rec = train(TrainConfig(T=1, num_kernels=1, noise_sets=1, functions_per_prior=1, num_features=5, steps=101))
    lr0 = TrainConfig().lr
    for step in (0, 50, 100):
        assert rec.lrs[step] == pytest.approx(lr_at(step, lr0), rel=1e-12)
    assert rec.lrs[50] == pytest.approx(0.98 * lr0, rel=1e-12)
    assert rec.lrs[100] == pytest.approx(0.98**2 * lr0, rel=1e-12)
    prior = sample_prior(torch.Generator().manual_seed(0), 2, (10_000,))
    assert float((prior.variance + prior.noise_variance - 1.01).abs().max()) < 1e-12


def test_criterion_5_desk_scale_training_progress():
    start = time.perf_counter()
    cfg = TrainConfig(dim=1, T=5, n_init=1, loss="entropy", num_kernels=5, noise_sets=2,
                      functions_per_prior=5, steps=300)
    results = []
    for seed in (0, 1):  # one retry on a new seed is permitted
        rec = train(cfg, seed=seed)
        first, last = rec.epoch_means[0], rec.epoch_means[-1]
        results.append((seed, first, last))
        if last < first:
            break
    print(f"desk training (seed, first epoch, last epoch): {results}")
    assert results[-1][2] < results[-1][1]
    assert time.perf_counter() - start < 900


def test_criterion_6_latency():
    policy2 = init_policy(2)
    rng = np.random.default_rng(6)
    X, Y = t(rng.uniform(size=(21, 2))), t(rng.normal(size=21))
    with torch.no_grad():
        policy2(X, Y)
        t0 = time.perf_counter()
        for _ in range(10):
            policy2(X, Y)
    assert (time.perf_counter() - t0) / 10 < 0.1

    prob = get_problem("branin")
    policy_ms = gp_ms = 0.0
    for seed in range(5):
        tp = deploy("policy", prob, T=20, seed=seed, policy=policy2)
        tg = deploy("gp_al", prob, T=20, seed=seed)
        assert max(tp.wall_ms) < 100
        policy_ms += tp.total_wall_ms
        gp_ms += tg.total_wall_ms
    print(f"branin T=20, 5 seeds: policy {policy_ms:.1f} ms, GP-AL {gp_ms:.1f} ms")
    assert policy_ms < gp_ms


def test_criterion_7_gp_al_beats_random_on_sin():
    start = time.perf_counter()
    prob = get_problem("sin")
    wins = []
    for rep in range(3):
        seeds = range(5 * rep, 5 * rep + 5)
        gp = [trace_rmse(deploy("gp_al", prob, T=10, n_init=1, seed=s), prob) for s in seeds]
        rnd = [trace_rmse(deploy("random", prob, T=10, n_init=1, seed=s), prob) for s in seeds]
        wins.append(np.mean(gp) < np.mean(rnd))
        print(f"replication {rep}: GP-AL {np.mean(gp):.4f} vs Random {np.mean(rnd):.4f}")
    assert sum(wins) >= 2
    assert time.perf_counter() - start < 600


def test_criterion_8_wilcoxon_exactness():
    assert wilcoxon_signed_rank([0.1, 0.2, 0.3, 0.4, 0.5], [1.1, 1.2, 1.3, 1.4, 1.5]) == 0.03125
    rng = np.random.default_rng(8)
    for n in range(5, 13):
        for trial in range(10):
            a = rng.normal(size=n)
            b = a + rng.normal(0.2, 1.0, size=n)
            if trial % 2:
                b = a + np.round(2 * (b - a)) / 2  # tied magnitudes and zeros
            if np.all(a == b):
                continue
            assert wilcoxon_signed_rank(a, b) == pytest.approx(signed_rank_p_enumerated(a, b), abs=1e-12)


def test_criterion_9_ingestion_fidelity(tmp_path):
    air = ingest_airline(Path(__file__).parent / "airline_sample.csv")
    assert air.pool_X[0, 0] == 0.0 and air.pool_X[-1, 0] == 1.0
    assert abs(air.pool_Y.mean()) < 1e-9 and abs(air.pool_Y.std() - 1) < 1e-9
    path = tmp_path / "lgbb_original.txt"
    path.write_text("mach alpha beta lift\n6 -5 0 0.4\n0 30 0 0.1\n3 10 0 0.3\n")
    lg = ingest_lgbb(path)
    assert lg.pool_X[0].tolist() == [1.0, 0.0] and lg.pool_X[1].tolist() == [0.0, 1.0]
    assert abs(lg.pool_Y.mean()) < 1e-9 and abs(lg.pool_Y.std() - 1) < 1e-9
