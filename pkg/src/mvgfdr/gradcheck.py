"""Analytic-vs-central-difference gradient checks for every differentiable path."""

from __future__ import annotations

import warnings
from typing import Callable, Mapping, Sequence

import torch
from torch.func import functional_call, vmap

from mvgfdr.anchors import AnchorBank, synthesize_anchors
from mvgfdr.backbone import MVGFDR, ModelConfig
from mvgfdr.fusion import concat_views, gcn_fuse, reproject_update
from mvgfdr.losses import focal_loss
from mvgfdr.mvgi import FrequencyPartition, aggregate_nodes, finite_checks, safe_normalize, soft_assign
from mvgfdr.reconstruction import make_reconstructor, stage_recon_loss

STEP = 1e-5
ABS_FLOOR = 1e-6
COMPONENTS = ("linear", "mvgi", "fusion", "reconstruction", "full")


def central_differences(fn: Callable[[], torch.Tensor], tensors: Sequence[torch.Tensor],
                        step: float = STEP) -> list[torch.Tensor]:
    """Perturb every entry of every tensor in place by +-step."""
    grads = []
    with torch.no_grad():
        for t in tensors:
            g = torch.zeros_like(t)
            flat, gflat = t.view(-1), g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                up = fn().item()
                flat[i] = orig - step
                down = fn().item()
                flat[i] = orig
                gflat[i] = (up - down) / (2 * step)
            grads.append(g)
    return grads


def batched_central_differences(fn: Callable[[Mapping[str, torch.Tensor]], torch.Tensor],
                                base: Mapping[str, torch.Tensor], step: float = STEP,
                                chunk: int = 512) -> dict[str, torch.Tensor]:
    """Same coordinate-wise central differences as :func:`central_differences`,
    with the perturbed evaluations of one tensor batched through ``vmap``."""
    grads = {}
    with torch.no_grad(), finite_checks(False), warnings.catch_warnings():
        warnings.filterwarnings("ignore", message=".*batching rule.*")
        for name, t in base.items():
            n = t.numel()
            g = torch.empty(n, dtype=t.dtype)

            def shifted(delta, name=name, t=t):
                return fn({**base, name: t + delta})

            for start in range(0, n, chunk):
                idx = torch.arange(start, min(start + chunk, n))
                delta = torch.zeros(len(idx), n, dtype=t.dtype)
                delta[torch.arange(len(idx)), idx] = step
                delta = delta.reshape(len(idx), *t.shape)
                g[start:start + len(idx)] = (vmap(shifted)(delta) - vmap(shifted)(-delta)) / (2 * step)
            grads[name] = g.reshape(t.shape)
    return grads


def max_relative_error(analytic: Sequence[torch.Tensor], numeric: Sequence[torch.Tensor],
                       floor: float = ABS_FLOOR) -> float:
    """``max |a - n| / max(|a|, |n|, floor)`` over all entries."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = torch.maximum(torch.maximum(a.abs(), n.abs()), torch.full_like(a, floor))
        worst = max(worst, ((a - n).abs() / denom).max().item())
    return worst


def check(fn: Callable[[], torch.Tensor], tensors: Sequence[torch.Tensor], step: float = STEP) -> float:
    for t in tensors:
        t.grad = None
    fn().backward()
    analytic = [t.grad.detach().clone() if t.grad is not None else torch.zeros_like(t) for t in tensors]
    numeric = central_differences(fn, tensors, step)
    return max_relative_error(analytic, numeric)


def _leaf(t: torch.Tensor) -> torch.Tensor:
    return t.detach().to(torch.float64).requires_grad_(True)


def _check_linear(gen: torch.Generator, dims: dict) -> float:
    C, M = dims.get("C", 5), dims.get("M", 4)
    bank = AnchorBank(M, C).double()
    with torch.no_grad():
        bank.coeffs.copy_(torch.randn(C, C, generator=gen, dtype=torch.float64))
    probe = torch.randn(M, C, generator=gen, dtype=torch.float64)
    return check(lambda: (synthesize_anchors(bank) * probe).sum(), [bank.coeffs])


def _check_mvgi(gen: torch.Generator, dims: dict) -> float:
    N, C, M = dims.get("N", 4), dims.get("C", 6), dims.get("M", 3)
    bank = AnchorBank(M, C).double()
    with torch.no_grad():
        bank.coeffs.add_(0.3 * torch.randn(C, C, generator=gen, dtype=torch.float64))
        bank.sigma.copy_(0.5 + torch.rand(M, C, generator=gen, dtype=torch.float64))
    feats = _leaf(0.5 * torch.randn(N, C, generator=gen, dtype=torch.float64))
    probe_v = torch.randn(M, C, generator=gen, dtype=torch.float64)
    probe_q = torch.randn(N, M, generator=gen, dtype=torch.float64)

    def fn():
        q = soft_assign(feats, bank)
        g = aggregate_nodes(feats, bank, q)
        return (g.nodes * probe_v).sum() + (q * probe_q).sum()

    return check(fn, [feats, bank.coeffs])


def _check_fusion(gen: torch.Generator, dims: dict) -> float:
    K, Mh, C, N = dims.get("K", 2), dims.get("M_h", 3), dims.get("C", 5), dims.get("N", 4)
    nodes = [_leaf(safe_normalize(torch.randn(Mh, C, generator=gen, dtype=torch.float64))) for _ in range(K)]
    assigns = [_leaf(torch.softmax(torch.randn(N, Mh, generator=gen, dtype=torch.float64), -1)) for _ in range(K)]
    feats = [_leaf(torch.randn(N, C, generator=gen, dtype=torch.float64)) for _ in range(K)]
    weight = _leaf(torch.eye(C, dtype=torch.float64) + 0.3 * torch.randn(C, C, generator=gen, dtype=torch.float64))
    probes = [torch.randn(N, C, generator=gen, dtype=torch.float64) for _ in range(K)]

    def fn():
        parts = [FrequencyPartition(v[:0], v, q[:, :0], q, 0) for v, q in zip(nodes, assigns)]
        graph = concat_views(parts)
        gcn_fuse(graph, weight)
        return sum((reproject_update(graph.view_assigns[k], graph.view_slice(k), feats[k]) * probes[k]).sum()
                   for k in range(K))

    return check(fn, [*nodes, *assigns, *feats, weight])


def _check_reconstruction(gen: torch.Generator, dims: dict) -> float:
    K, L, C = dims.get("K", 3), dims.get("L", 4), dims.get("C", 4)
    worst = 0.0
    for kind in dims.get("kinds", ("gcr", "cvr")):
        torch.manual_seed(int(torch.randint(0, 2**31, (1,), generator=gen)))
        rec = make_reconstructor(kind, C, K, L).double()
        lowmid = _leaf(safe_normalize(torch.randn(2, K, L, C, generator=gen, dtype=torch.float64)))
        params = [p for p in rec.parameters()]
        fn = lambda: stage_recon_loss(lowmid, 0.5, 0.3, rec, mask_seed=7)
        worst = max(worst, check(fn, [lowmid, *params]))
    return worst


def micro_config(**overrides) -> ModelConfig:
    base = dict(image_size=32, channels=(4, 8, 8, 8), depths=(1, 1, 1, 1), heads=4, num_anchors=4,
                views=2, classes=3, dtype="float64", seed=0, recon_backbone_grad=True)
    base.update(overrides)
    return ModelConfig(**base)


def _check_full(gen: torch.Generator, dims: dict) -> float:
    cfg = micro_config(**dims)
    model = MVGFDR(cfg)
    with torch.no_grad():
        # zero-initialized residual branches would hide most of each block
        for p in model.parameters():
            if not p.any():
                p.copy_(0.1 * torch.randn(p.shape, generator=gen, dtype=p.dtype))
    model.eval()  # freezes the sigma EMA so every evaluation sees one function
    x = torch.randn(1, cfg.views, 3, cfg.image_size, cfg.image_size, generator=gen, dtype=torch.float64)
    y = torch.randint(0, cfg.classes, (1,), generator=gen)
    buffers = dict(model.named_buffers())
    base = {"__input__": x, **{k: v.detach() for k, v in model.named_parameters()}}

    def fn(tensors):
        params = {k: v for k, v in tensors.items() if k != "__input__"}
        logits, recon = functional_call(model, {**params, **buffers}, (tensors["__input__"],),
                                        {"mask_seed": 3})
        return focal_loss(logits, y) + recon

    leaves = {k: v.clone().requires_grad_(True) for k, v in base.items()}
    fn(leaves).backward()
    analytic = [leaves[k].grad if leaves[k].grad is not None else torch.zeros_like(v) for k, v in base.items()]
    numeric = batched_central_differences(fn, base)
    return max_relative_error(analytic, [numeric[k] for k in base])


_CHECKS = {
    "linear": _check_linear,
    "mvgi": _check_mvgi,
    "fusion": _check_fusion,
    "reconstruction": _check_reconstruction,
    "full": _check_full,
}


def grad_check(component: str, dims: dict | None = None, seed: int = 0) -> float:
    """Max relative error between autograd and central differences (float64, step 1e-5)."""
    if component not in _CHECKS:
        raise ValueError(f"unknown component {component!r}; choose from {COMPONENTS}")
    gen = torch.Generator().manual_seed(seed)
    with torch.random.fork_rng():
        return _CHECKS[component](gen, dict(dims or {}))
