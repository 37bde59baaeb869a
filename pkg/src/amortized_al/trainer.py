"""Simulation-based policy training (nonmyopic and myopic variants)."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import torch
from torch import Tensor

from .kernel_gp import DTYPE, KernelConfig
from .objectives import GRID_LOSSES, LOSSES, RolloutBatch, get_loss
from .policy import Policy, init_policy, save_checkpoint
from .rff import SampledFunction, evaluate, sample_function

log = logging.getLogger(__name__)

ALGORITHMS = ("nonmyopic", "myopic")
EPOCH_STEPS = 50


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field path."""


class NonFiniteLossError(RuntimeError):
    pass


@dataclass
class PriorConfig:
    variance_range: tuple = (0.505, 1.0)
    total_variance: float = 1.01
    lengthscale_range: tuple = (0.05, 1.0)

    def validate(self, prefix: str = "prior"):
        lo, hi = self.variance_range
        if not 0 < lo <= hi:
            raise ConfigError(f"{prefix}.variance_range: need 0 < low <= high, got {self.variance_range}")
        if hi >= self.total_variance:
            raise ConfigError(f"{prefix}.total_variance: must exceed the largest variance")
        lo, hi = self.lengthscale_range
        if not 0 < lo <= hi:
            raise ConfigError(f"{prefix}.lengthscale_range: need 0 < low <= high, got {self.lengthscale_range}")


@dataclass
class TrainConfig:
    dim: int = 1
    T: int = 10
    n_init: int = 1
    n_grid: int = 100
    num_features: int = 100
    loss: str = "entropy"
    algorithm: str = "nonmyopic"
    num_kernels: Optional[int] = None
    noise_sets: int = 10
    functions_per_prior: int = 25
    num_chunks: int = 20
    steps: Optional[int] = None
    lr: float = 1e-4
    lr_decay: float = 0.98
    decay_every: int = EPOCH_STEPS
    grad_clip: float = 10.0
    checkpoint_every: int = 1
    seed: int = 0
    prior: PriorConfig = field(default_factory=PriorConfig)

    def __post_init__(self):
        if isinstance(self.prior, dict):
            self.prior = PriorConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in self.prior.items()})
        if self.num_kernels is None:
            self.num_kernels = 25 if self.algorithm == "nonmyopic" else 250
        if self.steps is None:
            self.steps = 10_000 if self.loss in GRID_LOSSES else 20_000

    @property
    def experiments_per_step(self) -> int:
        return self.num_kernels * self.noise_sets * self.functions_per_prior

    def validate(self) -> "TrainConfig":
        if self.loss not in LOSSES:
            raise ConfigError(f"train.loss: unknown loss {self.loss!r}; valid losses: {', '.join(LOSSES)}")
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"train.algorithm: must be one of {', '.join(ALGORITHMS)}")
        for name in ("dim", "T", "n_init", "num_features", "num_kernels", "noise_sets",
                     "functions_per_prior", "num_chunks", "steps", "decay_every", "checkpoint_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"train.{name}: must be positive, got {getattr(self, name)}")
        if self.loss in GRID_LOSSES and self.n_grid < 5 * self.T:
            raise ConfigError(f"train.n_grid: regularized losses need n_grid >= 5*T ({5 * self.T}), got {self.n_grid}")
        if self.algorithm == "myopic" and self.num_chunks > self.num_kernels:
            raise ConfigError("train.num_chunks: cannot exceed num_kernels")
        if not self.lr > 0:
            raise ConfigError("train.lr: must be positive")
        self.prior.validate()
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        raw = dict(raw)
        train = dict(raw.pop("train", {}))
        prior = raw.pop("prior", None)
        unknown = set(raw) - {"deploy", "data"}
        if unknown:
            raise ConfigError(f"unknown config section(s): {', '.join(sorted(unknown))}")
        names = {f.name for f in dataclasses.fields(cls)}
        bad = set(train) - names
        if bad:
            raise ConfigError(f"train.{sorted(bad)[0]}: unknown field")
        if prior is not None:
            pnames = {f.name for f in dataclasses.fields(PriorConfig)}
            if set(prior) - pnames:
                raise ConfigError(f"prior.{sorted(set(prior) - pnames)[0]}: unknown field")
            train["prior"] = prior
        return cls(**train).validate()

    @classmethod
    def from_toml(cls, path) -> "TrainConfig":
        return cls.from_dict(load_toml(path))


def load_toml(path) -> dict:
    try:
        import tomllib
    except ModuleNotFoundError:
        import tomli as tomllib
    with open(path, "rb") as fh:
        try:
            return tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc


def sample_prior(
    generator: torch.Generator, dim: int = 1, shape: Sequence[int] = (), prior: PriorConfig | None = None
) -> KernelConfig:
    """Kernel variance, lengthscales and noise with ``v + noise == total``."""
    prior = prior or PriorConfig()
    shape = tuple(shape)
    vlo, vhi = prior.variance_range
    llo, lhi = prior.lengthscale_range
    v = vlo + (vhi - vlo) * torch.rand(shape, generator=generator, dtype=DTYPE)
    ls = llo + (lhi - llo) * torch.rand(shape + (dim,), generator=generator, dtype=DTYPE)
    return KernelConfig(v, ls, prior.total_variance - v)


def lr_at(step: int, lr0: float, decay: float = 0.98, every: int = EPOCH_STEPS) -> float:
    return lr0 * decay ** (step // every)


# -- rollouts -----------------------------------------------------------------


@dataclass
class Episodes:
    """Frozen randomness for a flat batch of simulated experiments."""

    cfg: KernelConfig
    function: SampledFunction
    X_init: Tensor
    init_noise: Tensor
    query_noise: Tensor
    X_grid: Optional[Tensor] = None
    grid_noise: Optional[Tensor] = None

    def __len__(self) -> int:
        return self.X_init.shape[0]

    @property
    def steps(self) -> int:
        return self.query_noise.shape[-1]


def _expand_cfg(cfg: KernelConfig, shape) -> KernelConfig:
    return KernelConfig(
        cfg.variance.expand(shape).reshape(-1),
        cfg.lengthscales.expand(tuple(shape) + (cfg.dim,)).reshape(-1, cfg.dim),
        cfg.noise_variance.expand(shape).reshape(-1),
    )


def _expand_function(f: SampledFunction, shape) -> SampledFunction:
    shape = tuple(shape)
    L, D = f.num_features, f.dim
    return SampledFunction(
        f.weights.expand(shape + (L,)).reshape(-1, L),
        f.freqs.expand(shape + (L, D)).reshape(-1, L, D),
        f.phases.expand(shape + (L,)).reshape(-1, L),
        f.variance_scale.expand(shape).reshape(-1),
        f.window_mean_shift.expand(shape).reshape(-1),
    )


def sample_episodes(
    kernels: KernelConfig,
    noise_sets: int,
    functions_per_prior: int,
    n_context: int,
    steps: int,
    generator: torch.Generator,
    num_features: int = 100,
    n_grid: int = 0,
) -> Episodes:
    """Draw functions, initial inputs and noise for ``K x S x F`` experiments.

    Each of the ``K`` kernels gets ``F`` functions; the ``S`` noise sets are
    shared across the functions of a kernel. The flat experiment index is
    ``(k * S + s) * F + f``.
    """
    K, S, F, D = kernels.batch_shape[0], noise_sets, functions_per_prior, kernels.dim
    full = (K, S, F)
    kcfg = kernels[:, None, None]
    funcs = sample_function(_expand_cfg(kcfg, (K, 1, F)), num_features, generator)
    funcs = SampledFunction(
        funcs.weights.reshape(K, 1, F, -1),
        funcs.freqs.reshape(K, 1, F, num_features, D),
        funcs.phases.reshape(K, 1, F, -1),
        funcs.variance_scale.reshape(K, 1, F),
        funcs.window_mean_shift.reshape(K, 1, F),
    )
    function = _expand_function(funcs, full)
    cfg = _expand_cfg(kcfg, full)
    sd = cfg.noise_variance.sqrt()
    X_init = torch.rand((K * S * F, n_context, D), generator=generator, dtype=DTYPE)
    eps_init = torch.randn((K, S, 1, n_context), generator=generator, dtype=DTYPE)
    eps_query = torch.randn((K, S, 1, steps), generator=generator, dtype=DTYPE)
    init_noise = eps_init.expand(full + (n_context,)).reshape(-1, n_context) * sd[:, None]
    query_noise = eps_query.expand(full + (steps,)).reshape(-1, steps) * sd[:, None]
    X_grid = grid_noise = None
    if n_grid:
        X_grid = torch.rand((K * S * F, n_grid, D), generator=generator, dtype=DTYPE)
        grid_noise = torch.randn((K * S * F, n_grid), generator=generator, dtype=DTYPE) * sd[:, None]
    return Episodes(cfg, function, X_init, init_noise, query_noise, X_grid, grid_noise)


def simulate(policy: Policy, episodes: Episodes) -> RolloutBatch:
    """Run the policy sequentially on frozen episodes; differentiable in the policy."""
    f = episodes.function
    N = episodes.X_init.shape[1]
    X = episodes.X_init
    Y = evaluate(f, X) + episodes.init_noise
    calls = 0
    for t in range(episodes.steps):
        x = policy(X, Y)
        calls += 1
        y = evaluate(f, x.unsqueeze(-2)).squeeze(-1) + episodes.query_noise[:, t]
        X = torch.cat([X, x.unsqueeze(-2)], dim=-2)
        Y = torch.cat([Y, y.unsqueeze(-1)], dim=-1)
    Y_grid = None
    if episodes.X_grid is not None:
        Y_grid = evaluate(f, episodes.X_grid) + episodes.grid_noise
    return RolloutBatch(
        cfg=episodes.cfg,
        X_init=X[:, :N],
        Y_init=Y[:, :N],
        X_query=X[:, N:],
        Y_query=Y[:, N:],
        X_grid=episodes.X_grid,
        Y_grid=Y_grid,
        function=f,
        query_noise=episodes.query_noise,
        forward_calls=calls,
    )


def rollout_nonmyopic(policy: Policy, config: TrainConfig, generator: torch.Generator) -> RolloutBatch:
    kernels = sample_prior(generator, config.dim, (config.num_kernels,), config.prior)
    n_grid = config.n_grid if config.loss in GRID_LOSSES else 0
    episodes = sample_episodes(
        kernels, config.noise_sets, config.functions_per_prior, config.n_init, config.T,
        generator, config.num_features, n_grid,
    )
    return simulate(policy, episodes)


def chunk_kernels(num_kernels: int, num_chunks: int) -> list[list[int]]:
    """Round-robin assignment of kernel indices to chunks."""
    return [list(range(c, num_kernels, num_chunks)) for c in range(num_chunks)]


def rollout_myopic(
    policy: Policy, config: TrainConfig, generator: torch.Generator
) -> list[RolloutBatch]:
    """One policy step per experiment after a random-size context.

    Each chunk of kernels draws its own context size from
    ``{n_init, ..., n_init + T - 1}``; the loss is then taken as if ``T = 1``.
    """
    kernels = sample_prior(generator, config.dim, (config.num_kernels,), config.prior)
    n_grid = config.n_grid if config.loss in GRID_LOSSES else 0
    batches = []
    for idx in chunk_kernels(config.num_kernels, config.num_chunks):
        if config.T > 1:
            n_ctx = config.n_init + int(torch.randint(config.T, (), generator=generator))
        else:
            n_ctx = config.n_init
        episodes = sample_episodes(
            kernels[torch.tensor(idx)], config.noise_sets, config.functions_per_prior,
            n_ctx, 1, generator, config.num_features, n_grid,
        )
        batches.append(simulate(policy, episodes))
    return batches


def batch_loss(loss_name: str, batches: RolloutBatch | list[RolloutBatch]) -> Tensor:
    """Experiment-weighted mean of the loss over one or more batches."""
    fn = get_loss(loss_name)
    if isinstance(batches, RolloutBatch):
        return fn(batches)
    total = sum(len(b) for b in batches)
    return sum(fn(b) * (len(b) / total) for b in batches)


# -- training -----------------------------------------------------------------


@dataclass
class TrainRecord:
    seed: int
    losses: list = field(default_factory=list)
    lrs: list = field(default_factory=list)
    wall_ms: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)
    run_dir: Optional[Path] = None
    policy: Optional[Policy] = field(default=None, repr=False)

    @property
    def epoch_means(self) -> list[float]:
        n = len(self.losses) // EPOCH_STEPS
        return [
            sum(self.losses[e * EPOCH_STEPS:(e + 1) * EPOCH_STEPS]) / EPOCH_STEPS for e in range(n)
        ]

    @property
    def last10_mean(self) -> float:
        means = self.epoch_means[-10:]
        if not means:
            return sum(self.losses) / len(self.losses)
        return sum(means) / len(means)

    @property
    def final_checkpoint(self) -> Optional[Path]:
        return Path(self.checkpoints[-1]) if self.checkpoints else None

    def write_csv(self, path):
        path = Path(path)
        tmp = path.with_suffix(".csv.tmp")
        with open(tmp, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "loss", "lr", "wall_ms"])
            for i, (loss, lr, ms) in enumerate(zip(self.losses, self.lrs, self.wall_ms)):
                w.writerow([i, repr(loss), repr(lr), f"{ms:.3f}"])
        tmp.replace(path)


def _dump_nonfinite(batch, step: int, run_dir: Optional[Path]) -> str:
    if isinstance(batch, list):
        batch = batch[0] if len(batch) == 1 else batch
    bad = []
    batches = batch if isinstance(batch, list) else [batch]
    for bi, b in enumerate(batches):
        finite = torch.isfinite(b.X_query).all(-1).all(-1) & torch.isfinite(b.Y_query).all(-1)
        bad += [(bi, int(i)) for i in (~finite).nonzero().flatten()]
    msg = f"non-finite loss at step {step}; experiments with non-finite rollouts: {bad[:10]}"
    if run_dir is not None:
        path = Path(run_dir) / f"nonfinite_step{step}.pt"
        torch.save(
            [
                {k: getattr(b, k).detach() for k in ("X_init", "Y_init", "X_query", "Y_query")}
                | {"cfg": b.cfg.to_dict()}
                for b in batches
            ],
            path,
        )
        msg += f"; batch dumped to {path}"
    return msg


def train(config: TrainConfig, out_dir=None, seed: Optional[int] = None) -> TrainRecord:
    """Optimize a fresh policy; checkpoints land in ``out_dir/run_<seed>/``."""
    config.validate()
    seed = config.seed if seed is None else seed
    run_dir = None
    if out_dir is not None:
        run_dir = Path(out_dir) / f"run_{seed}"
        run_dir.mkdir(parents=True, exist_ok=True)
    generator = torch.Generator().manual_seed(seed)
    policy = init_policy(config.dim, seed)
    opt = torch.optim.RAdam(policy.parameters(), lr=config.lr)
    sched = torch.optim.lr_scheduler.StepLR(opt, step_size=config.decay_every, gamma=config.lr_decay)
    rollout = rollout_nonmyopic if config.algorithm == "nonmyopic" else rollout_myopic
    record = TrainRecord(seed=seed, run_dir=run_dir)

    for step in range(config.steps):
        t0 = time.perf_counter()
        lr = opt.param_groups[0]["lr"]
        batches = rollout(policy, config, generator)
        loss = batch_loss(config.loss, batches)
        if not torch.isfinite(loss.detach()):
            raise NonFiniteLossError(_dump_nonfinite(batches, step, run_dir))
        opt.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(policy.parameters(), config.grad_clip)
        opt.step()
        sched.step()
        record.losses.append(loss.item())
        record.lrs.append(lr)
        record.wall_ms.append((time.perf_counter() - t0) * 1e3)

        if (step + 1) % EPOCH_STEPS == 0:
            epoch = (step + 1) // EPOCH_STEPS
            log.info("seed %d epoch %d mean loss %.5f", seed, epoch, record.epoch_means[-1])
            if run_dir is not None and (epoch % config.checkpoint_every == 0 or step + 1 == config.steps):
                path = run_dir / f"epoch_{epoch}.ckpt"
                save_checkpoint(policy, path)
                record.checkpoints.append(str(path))
                record.write_csv(run_dir / "record.csv")

    if run_dir is not None:
        if config.steps % EPOCH_STEPS:
            path = run_dir / "final.ckpt"
            save_checkpoint(policy, path)
            record.checkpoints.append(str(path))
        record.write_csv(run_dir / "record.csv")
        summary = {
            "seed": seed,
            "steps": len(record.losses),
            "epoch_means": record.epoch_means,
            "last10_mean": record.last10_mean,
            "final_checkpoint": str(record.final_checkpoint),
            "config": config.to_dict(),
        }
        (run_dir / "summary.json").write_text(json.dumps(summary, indent=2))
    record.policy = policy
    return record


def select_best(records: Sequence[TrainRecord]) -> TrainRecord:
    """Record with the smallest last-10-epoch mean loss; ties go to the lower seed."""
    if not records:
        raise ValueError("no training records to choose from")
    return min(records, key=lambda r: (r.last10_mean, r.seed))


def read_record(run_dir) -> TrainRecord:
    """Rebuild a record from ``run_<seed>/record.csv`` and its checkpoints."""
    run_dir = Path(run_dir)
    seed = int(run_dir.name.split("_", 1)[1])
    rec = TrainRecord(seed=seed, run_dir=run_dir)
    with open(run_dir / "record.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            rec.losses.append(float(row["loss"]))
            rec.lrs.append(float(row["lr"]))
            rec.wall_ms.append(float(row["wall_ms"]))
    ckpts = sorted(run_dir.glob("epoch_*.ckpt"), key=lambda p: int(p.stem.split("_")[1]))
    rec.checkpoints = [str(p) for p in ckpts]
    if (run_dir / "final.ckpt").exists():
        rec.checkpoints.append(str(run_dir / "final.ckpt"))
    if not all(math.isfinite(x) for x in rec.losses):
        raise ValueError(f"{run_dir}: non-finite losses in record")
    return rec
