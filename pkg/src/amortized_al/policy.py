"""Set-invariant query policy: dataset in, next query point in ``(0, 1)^D`` out."""

from __future__ import annotations

import hashlib
import math
import os
import tempfile
from pathlib import Path

import torch
from torch import Tensor, nn

from .kernel_gp import DTYPE, Dataset

CHECKPOINT_FORMAT = "amortized-al-policy"
CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


def _mlp(d_in: int, hidden: int, d_out: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Linear(d_in, hidden),
        nn.SiLU(),
        nn.Linear(hidden, hidden),
        nn.SiLU(),
        nn.Linear(hidden, d_out),
    )


class SelfAttentionBlock(nn.Module):
    """Pre-norm transformer encoder layer without positional encoding or dropout."""

    def __init__(self, d_model: int, num_heads: int, ff_dim: int):
        super().__init__()
        if d_model % num_heads:
            raise ValueError("d_model must be divisible by num_heads")
        self.num_heads = num_heads
        self.norm1 = nn.LayerNorm(d_model)
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.out = nn.Linear(d_model, d_model)
        self.norm2 = nn.LayerNorm(d_model)
        self.ff = nn.Sequential(
            nn.Linear(d_model, ff_dim), nn.GELU(), nn.Linear(ff_dim, d_model)
        )

    def attend(self, h: Tensor) -> Tensor:
        *batch, n, d = h.shape
        hd = d // self.num_heads
        q, k, v = self.qkv(h).chunk(3, dim=-1)
        # (..., heads, n, hd)
        q, k, v = (t.reshape(*batch, n, self.num_heads, hd).transpose(-2, -3) for t in (q, k, v))
        scores = q @ k.transpose(-1, -2) / math.sqrt(hd)
        att = torch.softmax(scores, dim=-1) @ v
        att = att.transpose(-2, -3).reshape(*batch, n, d)
        return self.out(att)

    def forward(self, h: Tensor) -> Tensor:
        h = h + self.attend(self.norm1(h))
        return h + self.ff(self.norm2(h))


class Policy(nn.Module):
    """Embed each ``(x, y)`` pair, self-attend, sum-pool, decode, squash."""

    def __init__(
        self,
        dim: int,
        embed_dim: int = 32,
        hidden_dim: int = 64,
        num_layers: int = 2,
        num_heads: int = 8,
        ff_dim: int = 64,
    ):
        super().__init__()
        if dim < 1:
            raise ValueError("dim must be >= 1")
        self.arch = dict(
            dim=dim,
            embed_dim=embed_dim,
            hidden_dim=hidden_dim,
            num_layers=num_layers,
            num_heads=num_heads,
            ff_dim=ff_dim,
        )
        self.dim = dim
        self.embed = _mlp(dim + 1, hidden_dim, embed_dim)
        self.blocks = nn.ModuleList(
            SelfAttentionBlock(embed_dim, num_heads, ff_dim) for _ in range(num_layers)
        )
        self.norm = nn.LayerNorm(embed_dim)
        self.decode = _mlp(embed_dim, hidden_dim, dim)

    def forward(self, X: Tensor, Y: Tensor) -> Tensor:
        """``X``: ``... x N x D``, ``Y``: ``... x N``; returns ``... x D``."""
        if X.shape[-2] == 0:
            raise ValueError("policy needs a nonempty dataset")
        if X.shape[-1] != self.dim:
            raise ValueError(f"policy is {self.dim}-D, got inputs of dimension {X.shape[-1]}")
        h = self.embed(torch.cat([X, Y.unsqueeze(-1)], dim=-1))
        for block in self.blocks:
            h = block(h)
        pooled = self.norm(h).sum(-2)
        return (torch.tanh(self.decode(pooled)) + 1.0) / 2.0


def init_policy(dim: int, seed: int = 0, **arch) -> Policy:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        policy = Policy(dim, **arch)
    return policy.to(DTYPE)


def query(policy: Policy, data: Dataset) -> Tensor:
    """Next query for a single (or batched) dataset."""
    return policy(data.X, data.Y)


def save_checkpoint(policy: Policy, path) -> str:
    """Atomically write ``policy``; returns the sha256 of the written file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "arch": dict(policy.arch),
        "state_dict": {k: v.detach().clone() for k, v in policy.state_dict().items()},
    }
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            torch.save(payload, fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return file_sha256(path)


def load_checkpoint(path) -> Policy:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(path)
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a policy checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path}: format version {payload.get('version')}, expected {CHECKPOINT_VERSION}"
        )
    policy = Policy(**payload["arch"]).to(DTYPE)
    expected = policy.state_dict()
    state = payload["state_dict"]
    if set(state) != set(expected) or any(
        state[k].shape != expected[k].shape for k in expected
    ):
        raise CheckpointShapeError(f"{path}: tensors do not match the recorded architecture")
    policy.load_state_dict(state)
    return policy


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()
