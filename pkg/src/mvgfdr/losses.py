"""Classification and total objectives."""

import torch
import torch.nn.functional as F


def focal_loss(logits: torch.Tensor, labels: torch.Tensor, gamma: float = 2.0) -> torch.Tensor:
    """Batch mean of ``-(1 - p_y)^gamma * log p_y``."""
    G = logits.shape[-1]
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.numel() and (labels.min() < 0 or labels.max() >= G):
        raise ValueError(f"labels must lie in [0, {G}), got range [{labels.min()}, {labels.max()}]")
    log_p = F.log_softmax(logits, dim=-1).gather(-1, labels.unsqueeze(-1)).squeeze(-1)
    if gamma == 0:
        return (-log_p).mean()
    return (-(1.0 - log_p.exp()).pow(gamma) * log_p).mean()


def total_loss(cls: torch.Tensor, recon_mean: torch.Tensor) -> torch.Tensor:
    return cls + recon_mean
