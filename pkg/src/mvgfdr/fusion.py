"""Cross-view fusion of view-specific (high-frequency) nodes."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import torch
from torch import nn

from mvgfdr.mvgi import FrequencyPartition


@dataclass
class FusedGraph:
    all_high_nodes: torch.Tensor  # (..., K * M_h, C), view-major
    view_assigns: list[torch.Tensor]  # K tensors (..., N, M_h)
    adjacency: torch.Tensor | None = None
    fused_nodes: torch.Tensor | None = None
    nodes_per_view: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def K(self) -> int:
        return len(self.view_assigns)

    def view_slice(self, k: int) -> torch.Tensor:
        if self.fused_nodes is None:
            raise RuntimeError("fused nodes not computed yet")
        m = self.nodes_per_view
        return self.fused_nodes[..., k * m:(k + 1) * m, :]


def concat_views(partitions: Sequence[FrequencyPartition]) -> FusedGraph:
    if not partitions:
        raise ValueError("need at least one view")
    shape = partitions[0].high_nodes.shape
    for p in partitions[1:]:
        if p.high_nodes.shape != shape:
            raise ValueError(f"view high-node shapes differ: {tuple(p.high_nodes.shape)} vs {tuple(shape)}")
    nodes = torch.cat([p.high_nodes for p in partitions], dim=-2)
    return FusedGraph(
        all_high_nodes=nodes,
        view_assigns=[p.high_assign for p in partitions],
        nodes_per_view=shape[-2],
    )


def build_adjacency(nodes: torch.Tensor) -> torch.Tensor:
    """Row-wise softmax of the cosine Gram matrix."""
    gram = nodes @ nodes.transpose(-1, -2)
    return torch.softmax(gram, dim=-1)


def gcn_layer(nodes: torch.Tensor, weight: torch.Tensor, activation=torch.relu) -> torch.Tensor:
    adjacency = build_adjacency(nodes)
    out = adjacency @ nodes @ weight
    return activation(out) if activation is not None else out


def gcn_fuse(graph: FusedGraph, weight: torch.Tensor) -> torch.Tensor:
    if graph.adjacency is None:
        graph.adjacency = build_adjacency(graph.all_high_nodes)
    graph.fused_nodes = torch.relu(graph.adjacency @ graph.all_high_nodes @ weight)
    return graph.fused_nodes


def reproject_update(
    view_assign_high: torch.Tensor, fused_view_slice: torch.Tensor, features: torch.Tensor
) -> torch.Tensor:
    if (
        view_assign_high.shape[-1] != fused_view_slice.shape[-2]
        or view_assign_high.shape[-2] != features.shape[-2]
        or fused_view_slice.shape[-1] != features.shape[-1]
    ):
        raise ValueError(
            "shape mismatch: assign %s, fused %s, features %s"
            % (tuple(view_assign_high.shape), tuple(fused_view_slice.shape), tuple(features.shape))
        )
    return view_assign_high @ fused_view_slice + features


class GraphFusion(nn.Module):
    """One-layer GCN over the stacked high-frequency nodes of all views."""

    def __init__(self, C: int):
        super().__init__()
        self.weight = nn.Parameter(torch.eye(C) + 0.02 * torch.randn(C, C))

    def forward(self, partitions: Sequence[FrequencyPartition], features: Sequence[torch.Tensor]):
        graph = concat_views(partitions)
        gcn_fuse(graph, self.weight)
        updated = [
            reproject_update(graph.view_assigns[k], graph.view_slice(k), features[k])
            for k in range(graph.K)
        ]
        return updated, graph
