"""DCT-synthesized anchor banks.

Anchors are never stored directly: each forward pass recomputes them as
``basis @ coeffs`` so that, whatever the optimizer does to ``coeffs``, the
anchors stay inside the span of the fixed cosine basis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

SIGMA_FLOOR = 1e-4
SIGMA_DECAY = 0.99


@dataclass(frozen=True)
class DctBasis:
    """Fixed cosine basis, ``entries[n, c] = cos(pi / C * (c + 1/2) * n)``."""

    entries: torch.Tensor
    M: int
    C: int

    def __post_init__(self):
        # Callers must not mutate the basis in place.
        self.entries.requires_grad_(False)


def make_dct_basis(M: int, C: int, dtype: torch.dtype = torch.float64) -> DctBasis:
    if int(M) != M or int(C) != C or M < 1 or C < 1:
        raise ValueError(f"M and C must be positive integers, got M={M}, C={C}")
    n = torch.arange(M, dtype=torch.float64).unsqueeze(1)
    c = torch.arange(C, dtype=torch.float64).unsqueeze(0)
    entries = torch.cos(math.pi / C * (c + 0.5) * n)
    return DctBasis(entries=entries.to(dtype), M=int(M), C=int(C))


def synthesize_anchors(bank: "AnchorBank") -> torch.Tensor:
    """Row ``n`` of the result is ``sum_c basis[n, c] * coeffs[c]``."""
    coeffs = bank.coeffs
    basis = bank.basis_entries
    if coeffs.ndim != 2 or coeffs.shape[0] != basis.shape[1]:
        raise ValueError(
            f"coeffs of shape {tuple(coeffs.shape)} incompatible with basis {tuple(basis.shape)}"
        )
    return basis.to(coeffs.dtype) @ coeffs


def dct_span_residual(W: torch.Tensor, basis: DctBasis | torch.Tensor) -> float:
    """Frobenius distance from ``W`` to ``{basis @ A}``.

    The set ``{basis @ A}`` is the set of matrices whose columns lie in the
    column space of the basis, so the residual is ``(I - U U^T) W`` with ``U``
    an orthonormal basis of that column space.
    """
    B = basis.entries if isinstance(basis, DctBasis) else basis
    B = B.detach().to(torch.float64)
    W = W.detach().to(torch.float64)
    if W.shape[0] != B.shape[0]:
        raise ValueError(f"W has {W.shape[0]} rows, basis has {B.shape[0]}")
    U, S, _ = torch.linalg.svd(B, full_matrices=False)
    tol = S.max().item() * max(B.shape) * torch.finfo(torch.float64).eps if S.numel() else 0.0
    rank = int((S > tol).sum().item())
    if rank == 0:
        raise ValueError("degenerate basis: rank 0")
    U = U[:, :rank]
    resid = W - U @ (U.T @ W)
    return float(torch.linalg.norm(resid))


class AnchorBank(nn.Module):
    """Learnable DCT coefficients plus per-anchor, per-dimension scales for one stage."""

    def __init__(self, M: int, C: int, stage_id: int = 1, dtype: torch.dtype = torch.float32):
        super().__init__()
        if not 1 <= stage_id <= 4:
            raise ValueError(f"stage_id must be in [1, 4], got {stage_id}")
        self.M, self.C, self.stage_id = M, C, stage_id
        # Kept in float64 outside the buffer registry so dtype casts of the
        # module never round it.
        self.basis = make_dct_basis(M, C)
        self.coeffs = nn.Parameter(torch.eye(C, dtype=dtype) / math.sqrt(C))
        self.register_buffer("sigma", torch.ones(M, C, dtype=dtype))

    @property
    def basis_entries(self) -> torch.Tensor:
        return self.basis.entries

    @property
    def anchors(self) -> torch.Tensor:
        return synthesize_anchors(self)

    @torch.no_grad()
    def update_sigma(self, features: torch.Tensor, decay: float = SIGMA_DECAY) -> None:
        """EMA of the per-dimension std of ``features`` (..., C), broadcast to every anchor."""
        flat = features.detach().reshape(-1, self.C).to(self.sigma.dtype)
        if flat.shape[0] < 2:
            return
        std = flat.std(dim=0, unbiased=False).clamp_min(SIGMA_FLOOR)
        self.sigma.mul_(decay).add_((1.0 - decay) * std.unsqueeze(0))
        self.sigma.clamp_(min=SIGMA_FLOOR)

    def extra_repr(self) -> str:
        return f"M={self.M}, C={self.C}, stage_id={self.stage_id}"
