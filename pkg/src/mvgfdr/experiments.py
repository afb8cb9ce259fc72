"""Synthetic-benchmark experiments: subspace preservation under training,
overfitting, multi-view advantage and component ablations."""

from __future__ import annotations

import dataclasses
import logging
import time
from pathlib import Path

import numpy as np
import torch

from mvgfdr.anchors import dct_span_residual
from mvgfdr.backbone import ModelConfig
from mvgfdr.data import generate_synthetic, load_manifest
from mvgfdr.losses import focal_loss, total_loss
from mvgfdr.training import TrainConfig, evaluate, make_optimizer, train

log = logging.getLogger(__name__)

# Desk-scale benchmark model: toy anchor settings, 32 px views and narrow
# channels so each run fits a single CPU core.
BENCH_MODEL = ModelConfig(image_size=32, channels=(16, 32, 64, 64), depths=(1, 1, 1, 1), heads=4,
                          num_anchors=32, k_theta=0.75, eta=0.5, alpha=0.3, views=4, classes=5)


def dataset(root, name: str, n: int, seed: int, K: int = 4, G: int = 5, S: int = 32):
    """Generate (once) and load a synthetic split under ``root/name``."""
    out = Path(root) / name
    if not (out / "manifest.csv").exists():
        generate_synthetic(n, K=K, G=G, S=S, seed=seed, out_dir=out)
    return load_manifest(out / "manifest.csv", views=K, classes=G, size=S)


def _timed(fn, *args, **kw):
    t0 = time.perf_counter()
    out = fn(*args, **kw)
    return out, time.perf_counter() - t0


def subspace_run(data, steps: int = 500, batch_size: int = 4, seed: int = 0, model_cfg: ModelConfig | None = None):
    """``steps`` optimizer steps in float64; returns per-stage residuals of the
    anchors relative to their Frobenius norms."""
    K, _, S = data[0][0].shape[:3]
    cfg = model_cfg or ModelConfig(image_size=S, channels=(8, 16, 16, 16), depths=(1, 1, 1, 1), heads=4,
                                   num_anchors=12, views=K, dtype="float64", seed=seed)
    tc = TrainConfig(model=cfg, lr=1e-3, seed=seed, batch_size=batch_size)
    from mvgfdr.backbone import MVGFDR

    model = MVGFDR(cfg)
    model.train()
    opt = make_optimizer(model, tc)
    init = [blk.bank.coeffs.detach().clone() for blk in model.mvgf]
    rng = np.random.default_rng(seed)
    for step in range(steps):
        x, y = data.batch(rng.choice(len(data), size=batch_size, replace=False))
        logits, recon = model(x, mask_seed=(seed, step))
        loss = total_loss(focal_loss(logits, y), recon)
        opt.zero_grad()
        loss.backward()
        opt.step()
    rel, moved = [], []
    for blk, c0 in zip(model.mvgf, init):
        W = blk.bank.anchors.detach()
        rel.append(dct_span_residual(W, blk.bank.basis) / float(torch.linalg.norm(W)))
        moved.append(float(torch.linalg.norm(blk.bank.coeffs.detach() - c0)))
    return {"relative_residual": rel, "coeff_change": moved}


def overfit_run(data, seed: int = 0, epochs: int = 60, lr: float = 3e-4, model_cfg: ModelConfig | None = None,
                batch_size: int = 8):
    cfg = TrainConfig(model=dataclasses.replace(model_cfg or BENCH_MODEL, seed=seed), epochs=epochs, lr=lr,
                      seed=seed, batch_size=batch_size)
    result, seconds = _timed(train, cfg, data)
    report = evaluate(result.model, data)
    return {"train_acc": report.acc, "history": result.history, "seconds": seconds, "report": report}


def benchmark_run(train_data, test_data, seed: int = 0, epochs: int = 15, lr: float = 3e-4,
                  views: list[int] | None = None, **model_overrides):
    """Train on the selected views (all by default) and report test metrics."""
    if views is not None:
        train_data = train_data.select_views(views)
        test_data = test_data.select_views(views)
    K = len(views) if views is not None else BENCH_MODEL.views
    model_cfg = dataclasses.replace(BENCH_MODEL, views=K, seed=seed, **model_overrides)
    cfg = TrainConfig(model=model_cfg, epochs=epochs, lr=lr, seed=seed, batch_size=16)
    result, seconds = _timed(train, cfg, train_data)
    report = evaluate(result.model, test_data)
    train_rep = evaluate(result.model, train_data)
    return {"test_acc": report.acc, "train_acc": train_rep.acc, "report": report, "seconds": seconds,
            "final_loss": result.history[-1]["total_loss"], "history": result.history}
