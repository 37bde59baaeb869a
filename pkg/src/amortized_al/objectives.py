"""Meta-training losses over simulated active-learning rollouts.

All losses are minimized by the trainer, so each is the negative of the
corresponding objective to maximize. The label-based pair (``entropy``,
``reg_entropy``) scores the realized query labels; the covariance-based pair
(``entropy_v2``, ``reg_entropy_v2``) depends on query locations only.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import torch
from torch import Tensor

from .kernel_gp import (
    Dataset,
    FactorizationError,
    KernelConfig,
    gaussian_entropy,
    gaussian_log_pdf,
    gp_posterior,
)
from .rff import SampledFunction


@dataclass
class RolloutBatch:
    """A flat batch of ``B`` simulated experiments.

    Shapes: ``X_init`` ``B x N x D``, ``Y_init`` ``B x N``, ``X_query``
    ``B x T x D``, ``Y_query`` ``B x T``, grids ``B x G x D`` / ``B x G``.
    ``function`` and the noise tensors are kept so labels can be replayed.
    """

    cfg: KernelConfig
    X_init: Tensor
    Y_init: Tensor
    X_query: Tensor
    Y_query: Tensor
    X_grid: Optional[Tensor] = None
    Y_grid: Optional[Tensor] = None
    function: Optional[SampledFunction] = None
    query_noise: Optional[Tensor] = None
    forward_calls: int = 0

    def __len__(self) -> int:
        return self.X_query.shape[0]

    @property
    def init(self) -> Dataset:
        return Dataset(self.X_init, self.Y_init)

    @property
    def has_grid(self) -> bool:
        return self.X_grid is not None

    def init_and_grid(self) -> Dataset:
        if not self.has_grid:
            raise ValueError("this loss needs a grid in every experiment")
        return Dataset(
            torch.cat([self.X_init, self.X_grid], dim=-2),
            torch.cat([self.Y_init, self.Y_grid], dim=-1),
        )


def _guard(fn):
    def wrapped(batch: RolloutBatch) -> Tensor:
        if len(batch) == 0:
            raise ValueError("empty rollout batch")
        try:
            return fn(batch)
        except FactorizationError as exc:
            exps = sorted({i[0] for i in exc.indices if i})
            raise FactorizationError(f"{fn.__name__}: experiments {exps[:10]}: {exc}", exc.indices) from exc

    wrapped.__name__ = fn.__name__
    wrapped.__doc__ = fn.__doc__
    return wrapped


def _query_log_prob(context: Dataset, batch: RolloutBatch) -> Tensor:
    pred = gp_posterior(context, batch.X_query, batch.cfg)
    return gaussian_log_pdf(batch.Y_query, pred)


def _query_entropy(context: Dataset, batch: RolloutBatch) -> Tensor:
    return gaussian_entropy(gp_posterior(context, batch.X_query, batch.cfg))


@_guard
def loss_entropy(batch: RolloutBatch) -> Tensor:
    """Mean of ``log p(y_query | Y_init)``."""
    return _query_log_prob(batch.init, batch).mean()


@_guard
def loss_reg_entropy(batch: RolloutBatch) -> Tensor:
    """Mean of ``log p(y_query | Y_init) - log p(y_query | Y_init, Y_grid)``."""
    lp = _query_log_prob(batch.init, batch)
    lp_grid = _query_log_prob(batch.init_and_grid(), batch)
    return (lp - lp_grid).mean()


@_guard
def loss_entropy_v2(batch: RolloutBatch) -> Tensor:
    """Mean of ``-H(y_query | Y_init)``."""
    return -_query_entropy(batch.init, batch).mean()


@_guard
def loss_reg_entropy_v2(batch: RolloutBatch) -> Tensor:
    """Mean of ``H(y_query | Y_init, Y_grid) - H(y_query | Y_init)``."""
    h = _query_entropy(batch.init, batch)
    h_grid = _query_entropy(batch.init_and_grid(), batch)
    return (h_grid - h).mean()


LOSSES: dict[str, Callable[[RolloutBatch], Tensor]] = {
    "entropy": loss_entropy,
    "reg_entropy": loss_reg_entropy,
    "entropy_v2": loss_entropy_v2,
    "reg_entropy_v2": loss_reg_entropy_v2,
}
GRID_LOSSES = frozenset({"reg_entropy", "reg_entropy_v2"})


def get_loss(name: str) -> Callable[[RolloutBatch], Tensor]:
    try:
        return LOSSES[name]
    except KeyError:
        raise ValueError(
            f"unknown loss {name!r}; valid losses: {', '.join(LOSSES)}"
        ) from None
