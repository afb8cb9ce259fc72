"""Masked cross-view reconstruction of the shared (low+mid frequency) nodes.

For each target view the other views' shared nodes, plus the target's
unmasked ones, form the context; a subset of the target's shared nodes is
hidden and predicted either by a GCN baseline (GCR) or by a small causal
transformer decoder with view and frequency positional embeddings (CVR).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from mvgfdr.fusion import build_adjacency
from mvgfdr.mvgi import safe_normalize


class CapacityError(RuntimeError):
    """Token sequence longer than the decoder was configured for."""


def mask_size(count: int, eta: float) -> int:
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"masking rate must lie in [0, 1], got {eta}")
    # round half up; the epsilon absorbs representation error in eta * count
    return min(count, int(math.floor(eta * count + 0.5 + 1e-9)))


def select_mask(lowmid_count: int, eta: float, rng_seed) -> list[int]:
    """Sorted uniform subset of ``range(lowmid_count)`` of size ``round(eta * count)``."""
    size = mask_size(lowmid_count, eta)
    if size == 0:
        return []
    rng = np.random.default_rng(rng_seed)
    return sorted(int(i) for i in rng.choice(lowmid_count, size=size, replace=False))


@dataclass
class ReconTask:
    target_view: int
    masked_indices: list[int]
    context_nodes: torch.Tensor  # (..., P, C)
    context_views: torch.Tensor  # (P,) view id of each context row
    context_freqs: torch.Tensor  # (P,) anchor index of each context row
    targets: torch.Tensor  # (..., |masked|, C)
    seeds: torch.Tensor  # (..., |masked|, C) cross-view mean at each masked index
    predictions: torch.Tensor | None = None
    stack: list | None = None  # set when this task stacks several along dim 0

    @property
    def n_masked(self) -> int:
        return self.targets.shape[-2]


def build_task(lowmid: torch.Tensor, target_view: int, masked_indices: list[int]) -> ReconTask:
    """``lowmid`` holds every view's shared nodes, shape ``(..., K, L, C)``."""
    K, L = lowmid.shape[-3], lowmid.shape[-2]
    others = [k for k in range(K) if k != target_view]
    masked = list(masked_indices)
    keep = [n for n in range(L) if n not in set(masked)]
    parts, views, freqs = [], [], []
    for k in others:
        parts.append(lowmid[..., k, :, :])
        views += [k] * L
        freqs += list(range(L))
    parts.append(lowmid[..., target_view, keep, :])
    views += [target_view] * len(keep)
    freqs += keep
    context = torch.cat(parts, dim=-2)
    targets = lowmid[..., target_view, masked, :]
    seeds = lowmid[..., others, :, :][..., masked, :].mean(dim=-3) if others else torch.zeros_like(targets)
    return ReconTask(
        target_view=target_view,
        masked_indices=masked,
        context_nodes=context,
        context_views=torch.tensor(views, dtype=torch.long),
        context_freqs=torch.tensor(freqs, dtype=torch.long),
        targets=targets,
        seeds=seeds,
    )


def recon_loss(pred: torch.Tensor, target: torch.Tensor, alpha: float) -> torch.Tensor:
    """Mean ``1 - cos`` over rows plus ``alpha`` times the elementwise MSE.

    Rows where either side has zero norm contribute a cosine term of 1.
    """
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    if pred.shape[-2] == 0:
        raise ValueError("recon_loss needs at least one row")
    cos = (safe_normalize(pred) * safe_normalize(target)).sum(-1)
    return (1.0 - cos).mean() + alpha * (pred - target).pow(2).mean()


class PositionalEmbeddings(nn.Module):
    def __init__(self, K: int, C: int, M: int):
        super().__init__()
        self.M = M
        self.view_pos = nn.Parameter(0.02 * torch.randn(K, C))
        self.freq_omega = nn.Parameter(0.02 * torch.randn(C))
        self.freq_rho = nn.Parameter(0.02 * torch.randn(C))
        self.mask_token = nn.Parameter(0.02 * torch.randn(C))

    def freq(self, n: torch.Tensor) -> torch.Tensor:
        angle = math.pi * n.to(self.freq_omega.dtype) / self.M
        return torch.cos(angle).unsqueeze(-1) * self.freq_omega + torch.sin(angle).unsqueeze(-1) * self.freq_rho


def freq_positional(n: int, M: int, emb: PositionalEmbeddings) -> torch.Tensor:
    if not 0 <= n < M:
        raise ValueError(f"anchor index {n} outside [0, {M})")
    angle = math.pi * n / M
    return emb.freq_omega * math.cos(angle) + emb.freq_rho * math.sin(angle)


class GCRReconstructor(nn.Module):
    """Cross-view mean seeding, one residual GCN layer, then a residual two-layer MLP."""

    def __init__(self, C: int, activation: str = "relu"):
        super().__init__()
        self.weight = nn.Parameter(0.02 * torch.randn(C, C))
        self.fc1 = nn.Linear(C, C)
        self.fc2 = nn.Linear(C, C)
        self.activation = activation

    @torch.no_grad()
    def set_pass_through(self) -> None:
        """Zero both residual branches so predictions equal the seeds."""
        self.weight.zero_()
        self.fc2.weight.zero_()
        self.fc2.bias.zero_()

    def forward(self, task: ReconTask) -> torch.Tensor:
        m = task.n_masked
        h = torch.cat([task.context_nodes, task.seeds], dim=-2)
        msg = build_adjacency(h) @ h @ self.weight
        if self.activation == "relu":
            msg = torch.relu(msg)
        z = (h + msg)[..., h.shape[-2] - m:, :]
        return z + self.fc2(torch.relu(self.fc1(z)))


class DecoderBlock(nn.Module):
    def __init__(self, C: int, heads: int, ff_mult: int = 2):
        super().__init__()
        self.heads = heads
        self.ln1 = nn.LayerNorm(C)
        self.qkv = nn.Linear(C, 3 * C)
        self.proj = nn.Linear(C, C)
        self.ln2 = nn.LayerNorm(C)
        self.ff = nn.Sequential(nn.Linear(C, ff_mult * C), nn.GELU(), nn.Linear(ff_mult * C, C))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        *lead, T, C = x.shape
        q, k, v = self.qkv(self.ln1(x)).chunk(3, dim=-1)
        split = lambda t: t.reshape(*lead, T, self.heads, C // self.heads).transpose(-2, -3)
        a = F.scaled_dot_product_attention(split(q), split(k), split(v), is_causal=True)
        x = x + self.proj(a.transpose(-2, -3).reshape(*lead, T, C))
        return x + self.ff(self.ln2(x))


class CVRReconstructor(nn.Module):
    """Causal decoder over [context tokens | mask tokens]; context comes first so
    every masked slot sees the full context."""

    def __init__(self, C: int, K: int, M: int, n_blocks: int = 2, heads: int = 4,
                 ff_mult: int = 2, max_len: int | None = None):
        super().__init__()
        heads = math.gcd(heads, C)
        self.emb = PositionalEmbeddings(K, C, M)
        self.blocks = nn.ModuleList(DecoderBlock(C, heads, ff_mult) for _ in range(n_blocks))
        self.ln = nn.LayerNorm(C)
        self.head = nn.Linear(C, C)
        self.max_len = max_len if max_len is not None else K * M

    def _slots(self, target_view: int, masked_indices) -> torch.Tensor:
        emb = self.emb
        masked = torch.tensor(masked_indices, dtype=torch.long)
        return emb.mask_token + emb.view_pos[target_view] + emb.freq(masked)

    def tokens(self, task: ReconTask) -> torch.Tensor:
        emb = self.emb
        views, freqs = task.context_views, task.context_freqs
        ctx_pos = emb.view_pos[views] + emb.freq(freqs)  # (P, C) or (T, P, C) when stacked
        if task.stack is None:
            slot = self._slots(task.target_view, task.masked_indices)
        else:
            slot = torch.stack([self._slots(t.target_view, t.masked_indices) for t in task.stack])
            # broadcast the per-task embeddings over the sample dims
            extra = task.context_nodes.ndim - 3
            ctx_pos = ctx_pos.reshape(ctx_pos.shape[0], *([1] * extra), *ctx_pos.shape[1:])
            slot = slot.reshape(slot.shape[0], *([1] * extra), *slot.shape[1:])
        ctx = task.context_nodes + ctx_pos
        slot = slot.expand(*ctx.shape[:-2], *slot.shape[-2:])
        return torch.cat([ctx, slot], dim=-2)

    def forward(self, task: ReconTask) -> torch.Tensor:
        m = task.n_masked
        if m == 0:
            return task.targets.new_zeros(task.targets.shape)
        x = self.tokens(task)
        if x.shape[-2] > self.max_len:
            raise CapacityError(f"sequence length {x.shape[-2]} exceeds maximum {self.max_len}")
        lead = x.shape[:-2]
        x = x.reshape(-1, *x.shape[-2:])
        for block in self.blocks:
            x = block(x)
        out = self.head(self.ln(x[:, -m:, :]))
        return out.reshape(*lead, *out.shape[-2:])


def make_reconstructor(kind: str, C: int, K: int, M: int) -> nn.Module:
    kind = kind.lower()
    if kind == "gcr":
        return GCRReconstructor(C)
    if kind == "cvr":
        return CVRReconstructor(C, K, M)
    raise ValueError(f"unknown reconstructor kind {kind!r}; expected 'gcr' or 'cvr'")


def task_seed(base_seed, target_view: int) -> np.random.SeedSequence:
    base = list(base_seed) if isinstance(base_seed, (tuple, list)) else [base_seed]
    return np.random.SeedSequence([int(b) & 0xFFFFFFFF for b in base] + [int(target_view)])


def stage_recon_loss(
    lowmid: torch.Tensor,
    eta: float,
    alpha: float,
    reconstructor: nn.Module,
    mask_seed,
    return_tasks: bool = False,
):
    """Sum over target views of :func:`recon_loss`; ``lowmid`` is ``(..., K, L, C)``."""
    K, L = lowmid.shape[-3], lowmid.shape[-2]
    if K < 2:
        raise ValueError(f"cross-view reconstruction needs K >= 2 views, got {K}")
    tasks = []
    for k in range(K):
        idx = select_mask(L, eta, task_seed(mask_seed, k))
        if idx:
            tasks.append(build_task(lowmid, k, idx))
    total = lowmid.new_zeros(())
    if tasks:
        # Every task in a stage has the same context and mask sizes, so the
        # reconstructor runs once over the stacked tasks.
        preds = reconstruct_many(reconstructor, tasks)
        for task, pred in zip(tasks, preds):
            task.predictions = pred
            total = total + recon_loss(pred, task.targets, alpha)
    return (total, tasks) if return_tasks else total


def reconstruct_many(reconstructor: nn.Module, tasks: list[ReconTask]) -> list[torch.Tensor]:
    sizes = {(t.context_nodes.shape, t.n_masked) for t in tasks}
    if len(sizes) != 1:
        return [reconstructor(t) for t in tasks]
    stacked = ReconTask(
        target_view=-1,
        masked_indices=[],
        context_nodes=torch.stack([t.context_nodes for t in tasks]),
        context_views=torch.stack([t.context_views for t in tasks]),
        context_freqs=torch.stack([t.context_freqs for t in tasks]),
        targets=torch.stack([t.targets for t in tasks]),
        seeds=torch.stack([t.seeds for t in tasks]),
    )
    stacked.stack = tasks
    return list(reconstructor(stacked).unbind(0))
