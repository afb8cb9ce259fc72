"""Per-view graph initialization: soft assignment of tokens to anchors,
residual aggregation into unit-norm nodes, and frequency partitioning."""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass

import torch

from mvgfdr.anchors import AnchorBank

DEGENERATE_NORM = 1e-8
# anchors holding less total assignment than this are treated as empty
MASS_FLOOR = 1e-12
_check_finite = True


@contextlib.contextmanager
def finite_checks(enabled: bool):
    """Toggle the input finiteness check (it cannot run under ``torch.func.vmap``)."""
    global _check_finite
    prev, _check_finite = _check_finite, enabled
    try:
        yield
    finally:
        _check_finite = prev


@dataclass
class ViewGraph:
    """Nodes ``(..., M, C)`` and soft assignments ``(..., N, M)`` for one view
    (or a stack of views along the leading dims)."""

    nodes: torch.Tensor
    assign: torch.Tensor
    view_id: int | None = None
    split_index: int | None = None

    @property
    def M(self) -> int:
        return self.nodes.shape[-2]


@dataclass
class FrequencyPartition:
    lowmid_nodes: torch.Tensor
    high_nodes: torch.Tensor
    lowmid_assign: torch.Tensor
    high_assign: torch.Tensor
    split_index: int


def _anchors_sigma(bank: AnchorBank, anchors=None, sigma=None):
    if anchors is None:
        anchors = bank.anchors
    if sigma is None:
        sigma = bank.sigma
    return anchors, sigma.to(anchors.dtype)


def soft_assign(features: torch.Tensor, bank: AnchorBank, *, anchors=None, sigma=None) -> torch.Tensor:
    """Softmax over anchors of ``-||(f_j - w_n) / sigma_n||^2 / 2``.

    ``features`` has shape ``(..., N, C)``; the result ``(..., N, M)``.
    """
    if _check_finite and not torch.isfinite(features).all():
        raise FloatingPointError("soft_assign received non-finite features")
    W, sigma = _anchors_sigma(bank, anchors, sigma)
    if features.shape[-1] != W.shape[-1]:
        raise ValueError(f"feature dim {features.shape[-1]} != anchor dim {W.shape[-1]}")
    inv_var = sigma.pow(-2)  # (M, C)
    # ||(f - w) / s||^2 expanded so no (N, M, C) intermediate is materialized.
    d2 = (
        features.pow(2) @ inv_var.T
        - 2.0 * features @ (W * inv_var).T
        + (W.pow(2) * inv_var).sum(-1)
    )
    return torch.softmax(-0.5 * d2, dim=-1)


def safe_normalize(x: torch.Tensor, eps: float = DEGENERATE_NORM) -> torch.Tensor:
    """Row-normalize, mapping rows with norm below ``eps`` to exact zeros."""
    sq = x.pow(2).sum(-1, keepdim=True)
    small = sq < eps * eps
    norm = torch.where(small, torch.ones_like(sq), sq).sqrt()
    return torch.where(small, torch.zeros_like(x), x / norm)


def aggregate_nodes(
    features: torch.Tensor,
    bank: AnchorBank,
    assign: torch.Tensor,
    *,
    anchors=None,
    sigma=None,
    view_id: int | None = None,
) -> ViewGraph:
    W, sigma = _anchors_sigma(bank, anchors, sigma)
    mass = assign.sum(-2).unsqueeze(-1)  # (..., M, 1)
    # u = mass * v_hat. Normalizing u directly gives the same unit rows
    # without dividing by a mass that can underflow.
    u = (assign.transpose(-1, -2) @ features - mass * W) / sigma
    sq = u.pow(2).sum(-1, keepdim=True)
    small = (sq <= (DEGENERATE_NORM * mass).pow(2)) | (mass < MASS_FLOOR)
    norm = torch.where(small, torch.ones_like(sq), sq).sqrt()
    nodes = torch.where(small, torch.zeros_like(u), u / norm)
    return ViewGraph(nodes=nodes, assign=assign, view_id=view_id)


def split_index(M: int, k_theta: float) -> int:
    if not 0.0 < k_theta <= 1.0:
        raise ValueError(f"k_theta must lie in (0, 1], got {k_theta}")
    # The small epsilon keeps products such as 0.75 * 32 from flooring to 23.
    return int(math.floor(k_theta * M + 1e-9))


def partition_nodes(graph: ViewGraph, k_theta: float) -> FrequencyPartition:
    s = split_index(graph.M, k_theta)
    graph.split_index = s
    return FrequencyPartition(
        lowmid_nodes=graph.nodes[..., :s, :],
        high_nodes=graph.nodes[..., s:, :],
        lowmid_assign=graph.assign[..., :s],
        high_assign=graph.assign[..., s:],
        split_index=s,
    )
