"""Active-learning deployment: trained policy, GP entropy baseline, random."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from .benchmarks import Problem
from .fit import FitError, fit_gp_type2
from .kernel_gp import DTYPE, Dataset, FactorizationError, KernelConfig, predictive_variance
from .policy import Policy

log = logging.getLogger(__name__)

METHODS = ("policy", "gp_al", "random")
GP_CANDIDATES = 5000
TRACE_VERSION = 1
# used by the GP baseline before two labels exist to fit on
DEFAULT_KERNEL = dict(variance=1.0, lengthscale=0.2, noise_variance=0.01)


class PoolExhaustedError(RuntimeError):
    pass


def default_kernel(dim: int) -> KernelConfig:
    return KernelConfig(
        DEFAULT_KERNEL["variance"], [DEFAULT_KERNEL["lengthscale"]] * dim, DEFAULT_KERNEL["noise_variance"]
    )


@dataclass
class ALTrace:
    problem: str
    method: str
    seed: int
    dim: int
    init_X: list
    init_Y: list
    queries: list = field(default_factory=list)
    labels: list = field(default_factory=list)
    wall_ms: list = field(default_factory=list)
    pool_indices: Optional[list] = None
    init_pool_indices: Optional[list] = None
    checkpoint_sha256: Optional[str] = None
    config: dict = field(default_factory=dict)

    @property
    def T(self) -> int:
        return len(self.queries)

    @property
    def total_wall_ms(self) -> float:
        return float(sum(self.wall_ms))

    def final_dataset(self) -> Dataset:
        X = np.asarray(self.init_X + self.queries, dtype=float).reshape(-1, self.dim)
        Y = np.asarray(self.init_Y + self.labels, dtype=float)
        return Dataset(torch.as_tensor(X, dtype=DTYPE), torch.as_tensor(Y, dtype=DTYPE))

    def to_json(self, problem: Problem | None = None) -> dict:
        header = {
            "version": TRACE_VERSION,
            "problem": self.problem,
            "method": self.method,
            "seed": self.seed,
            "dim": self.dim,
            "checkpoint_sha256": self.checkpoint_sha256,
            "config": self.config,
        }
        native = (lambda x: problem.to_native(np.asarray(x)).tolist()) if problem else (lambda x: None)
        initial = [
            {"x": x, "x_native": native(x), "y": y,
             **({"pool_index": i} if self.init_pool_indices is not None else {})}
            for x, y, i in zip(self.init_X, self.init_Y, self.init_pool_indices or [None] * len(self.init_X))
        ]
        records = []
        for t, (x, y, ms) in enumerate(zip(self.queries, self.labels, self.wall_ms), start=1):
            rec = {"t": t, "x": x, "x_native": native(x), "y": y, "wall_ms": ms}
            if self.pool_indices is not None:
                rec["pool_index"] = self.pool_indices[t - 1]
            records.append(rec)
        return {"header": header, "initial": initial, "records": records}

    def save(self, path, problem: Problem | None = None):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_text(json.dumps(self.to_json(problem), indent=1))
        tmp.replace(path)

    @classmethod
    def load(cls, path) -> "ALTrace":
        raw = json.loads(Path(path).read_text())
        h = raw["header"]
        if h.get("version") != TRACE_VERSION:
            raise ValueError(f"{path}: unsupported trace version {h.get('version')}")
        recs = raw["records"]
        pool = "pool_index" in recs[0] if recs else False
        return cls(
            problem=h["problem"],
            method=h["method"],
            seed=h["seed"],
            dim=h["dim"],
            init_X=[r["x"] for r in raw["initial"]],
            init_Y=[r["y"] for r in raw["initial"]],
            queries=[r["x"] for r in recs],
            labels=[r["y"] for r in recs],
            wall_ms=[r["wall_ms"] for r in recs],
            pool_indices=[r["pool_index"] for r in recs] if pool else None,
            init_pool_indices=[r["pool_index"] for r in raw["initial"]] if pool else None,
            checkpoint_sha256=h.get("checkpoint_sha256"),
            config=h.get("config", {}),
        )


def _streams(seed: int):
    """Independent generators for initial inputs, label noise and the method."""
    ss = np.random.SeedSequence(seed)
    return [np.random.default_rng(s) for s in ss.spawn(3)]


class _Session:
    """Mutable AL state: labeled data plus remaining pool candidates."""

    def __init__(self, problem: Problem, n_init: int, seed: int):
        if n_init < 1:
            raise ValueError("deployment needs at least one initial point")
        self.problem = problem
        init_rng, self.label_rng, self.method_rng = _streams(seed)
        D = problem.dim
        if problem.is_pool:
            if n_init > problem.pool_size:
                raise PoolExhaustedError("pool smaller than the initial dataset")
            idx = sorted(init_rng.choice(problem.pool_size, size=n_init, replace=False).tolist())
            self.init_pool_indices = [int(i) for i in idx]
            self.available = [i for i in range(problem.pool_size) if i not in set(idx)]
            X = problem.pool_X[idx]
            Y = problem.pool_Y[idx]
        else:
            self.init_pool_indices = None
            self.available = None
            X = init_rng.uniform(size=(n_init, D))
            Y = problem.label(X, self.label_rng)
        self.X = [list(map(float, x)) for x in X]
        self.Y = [float(y) for y in Y]
        self.init_X = list(self.X)
        self.init_Y = list(self.Y)

    def arrays(self):
        return np.asarray(self.X, dtype=float), np.asarray(self.Y, dtype=float)

    def candidates(self) -> np.ndarray:
        if not self.available:
            raise PoolExhaustedError("every pool point has been labeled")
        return self.problem.pool_X[self.available]

    def label(self, choice):
        """Label a continuous point or a pool position (index into ``available``)."""
        if self.problem.is_pool:
            idx = self.available.pop(int(choice))
            return list(map(float, self.problem.pool_X[idx])), float(self.problem.pool_Y[idx]), idx
        x = np.asarray(choice, dtype=float).reshape(self.problem.dim)
        y = float(self.problem.label(x[None, :], self.label_rng)[0])
        return x.tolist(), y, None


def run_loop(
    problem: Problem,
    select: Callable[["_Session"], object],
    T: int,
    n_init: int,
    seed: int,
    method: str,
    **meta,
) -> ALTrace:
    s = _Session(problem, n_init, seed)
    trace = ALTrace(
        problem=problem.name, method=method, seed=seed, dim=problem.dim,
        init_X=s.init_X, init_Y=s.init_Y,
        pool_indices=[] if problem.is_pool else None,
        init_pool_indices=s.init_pool_indices, **meta,
    )
    for _ in range(T):
        t0 = time.perf_counter()
        choice = select(s)
        ms = (time.perf_counter() - t0) * 1e3
        x, y, idx = s.label(choice)
        s.X.append(x)
        s.Y.append(y)
        trace.queries.append(x)
        trace.labels.append(y)
        trace.wall_ms.append(ms)
        if idx is not None:
            trace.pool_indices.append(int(idx))
    return trace


def nearest_candidate(x, candidates: np.ndarray) -> int:
    """Position of the Euclidean-nearest candidate; ties go to the lowest position."""
    d = ((candidates - np.asarray(x)[None, :]) ** 2).sum(-1)
    return int(np.argmin(d))


def deploy_policy(
    policy: Policy, problem: Problem, T: int, n_init: int = 1, seed: int = 0,
    checkpoint_sha256: str | None = None,
) -> ALTrace:
    if policy.dim != problem.dim:
        raise ValueError(f"policy is {policy.dim}-D but problem {problem.name!r} is {problem.dim}-D")
    policy.eval()

    def select(s: _Session):
        X, Y = s.arrays()
        with torch.no_grad():
            x = policy(torch.as_tensor(X, dtype=DTYPE), torch.as_tensor(Y, dtype=DTYPE)).numpy()
        if problem.is_pool:
            return nearest_candidate(x, s.candidates())
        return x

    return run_loop(problem, select, T, n_init, seed, "policy",
                    checkpoint_sha256=checkpoint_sha256, config={"T": T, "n_init": n_init})


def entropy_scores(data: Dataset, candidates: np.ndarray, cfg: KernelConfig) -> np.ndarray:
    """Predictive entropy of a single noisy output at each candidate."""
    var = predictive_variance(data, torch.as_tensor(candidates, dtype=DTYPE), cfg)
    return (0.5 * torch.log(2 * math.pi * math.e * var)).numpy()


def deploy_gp_al(
    problem: Problem, T: int, n_init: int = 1, seed: int = 0,
    n_candidates: int = GP_CANDIDATES, restarts: int = 5,
) -> ALTrace:
    """Refit the GP every iteration and query the maximum-entropy candidate."""
    state = {"cfg": default_kernel(problem.dim)}

    def select(s: _Session):
        X, Y = s.arrays()
        data = Dataset(torch.as_tensor(X, dtype=DTYPE), torch.as_tensor(Y, dtype=DTYPE))
        if len(data) >= 2:
            try:
                state["cfg"] = fit_gp_type2(data, s.method_rng, restarts=restarts).config
            except (FitError, FactorizationError) as exc:
                log.warning("GP fit failed on %d points (%s); keeping previous hyperparameters", len(data), exc)
        if problem.is_pool:
            cands = s.candidates()
        else:
            cands = s.method_rng.uniform(size=(n_candidates, problem.dim))
        best = int(np.argmax(entropy_scores(data, cands, state["cfg"])))
        return best if problem.is_pool else cands[best]

    return run_loop(problem, select, T, n_init, seed, "gp_al",
                    config={"T": T, "n_init": n_init, "n_candidates": n_candidates, "restarts": restarts})


def deploy_random(problem: Problem, T: int, n_init: int = 1, seed: int = 0) -> ALTrace:
    def select(s: _Session):
        if problem.is_pool:
            return int(s.method_rng.integers(len(s.candidates())))
        return s.method_rng.uniform(size=problem.dim)

    return run_loop(problem, select, T, n_init, seed, "random", config={"T": T, "n_init": n_init})


def deploy(method: str, problem: Problem, T: int, n_init: int = 1, seed: int = 0,
           policy: Policy | None = None, checkpoint_sha256: str | None = None) -> ALTrace:
    if method == "policy":
        if policy is None:
            raise ValueError("method 'policy' needs a trained policy checkpoint")
        return deploy_policy(policy, problem, T, n_init, seed, checkpoint_sha256)
    if method == "gp_al":
        return deploy_gp_al(problem, T, n_init, seed)
    if method == "random":
        return deploy_random(problem, T, n_init, seed)
    raise ValueError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")


def replay_labels(trace: ALTrace, problem: Problem) -> list[float]:
    """Re-label the trace's initial points and queries from its seed."""
    if problem.is_pool:
        idx = list(trace.init_pool_indices) + list(trace.pool_indices)
        return [float(problem.pool_Y[i]) for i in idx]
    _, label_rng, _ = _streams(trace.seed)
    init = problem.label(np.asarray(trace.init_X, dtype=float), label_rng)
    out = [float(y) for y in init]
    for x in trace.queries:
        out.append(float(problem.label(np.asarray(x, dtype=float)[None, :], label_rng)[0]))
    return out
