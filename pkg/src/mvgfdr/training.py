"""Training loop, evaluation, hyperparameter sweeps and gradient checks."""

from __future__ import annotations

import csv
import dataclasses
import itertools
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from mvgfdr.backbone import MVGFDR, CheckpointVersionError, ModelConfig, read_checkpoint
from mvgfdr.losses import focal_loss, total_loss
from mvgfdr.metrics import MetricsReport, compute_metrics

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "total_loss", "cls_loss", "recon_loss", "val_acc", "val_kappa")
PARAM_ALIASES = {"M": "num_anchors", "k": "k_theta", "kappa_theta": "k_theta"}


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    epochs: int = 60
    batch_size: int = 16
    lr: float = 1e-4
    optimizer: str = "adam"
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    focal_gamma: float = 2.0
    seed: int = 0
    eval_every: int = 1
    checkpoint_every: int = 0
    out_dir: str | None = None

    def __post_init__(self):
        for name in ("epochs", "batch_size", "eval_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.optimizer.lower() != "adam":
            raise ValueError(f"unsupported optimizer {self.optimizer!r}; only 'adam'")
        self.betas = tuple(self.betas)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["model"] = self.model.to_dict()
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["model"] = ModelConfig.from_dict(d["model"])
        return cls(**d)


@dataclass
class TrainResult:
    model: MVGFDR
    history: list[dict]
    checkpoint: Path | None = None


def make_optimizer(model: MVGFDR, cfg: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=cfg.betas, eps=cfg.eps)


def _batches(n: int, batch_size: int, seed: int, epoch: int):
    order = np.random.default_rng([seed, epoch]).permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def _check_views(model: MVGFDR, data) -> None:
    x, _ = data[0]
    if x.shape[0] != model.cfg.views or x.shape[-1] != model.cfg.image_size:
        raise CheckpointVersionError(
            f"data has {x.shape[0]} views of size {x.shape[-1]}, model expects "
            f"{model.cfg.views} views of size {model.cfg.image_size}"
        )


def _format_row(row: dict) -> str:
    return "\t".join(str(row[c]) if c == "epoch" else f"{row[c]:.10g}" for c in LOG_COLUMNS)


def train(
    cfg: TrainConfig,
    train_data,
    val_data=None,
    out_dir=None,
    resume=None,
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Minimize focal loss + stage-mean reconstruction loss with Adam.

    ``train_data``/``val_data`` are :class:`~mvgfdr.data.MultiViewDataset`-like
    objects exposing ``__len__``, ``__getitem__`` and ``batch(indices)``.
    Epoch order and mask seeds derive from ``cfg.seed`` and the epoch/step
    counters, so a resumed run retraces an uninterrupted one.
    """
    if cfg.model.views < 1:
        raise ValueError("need at least one view")
    out = Path(out_dir or cfg.out_dir) if (out_dir or cfg.out_dir) else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(cfg.seed)
    model = MVGFDR(cfg.model)
    opt = make_optimizer(model, cfg)
    history: list[dict] = []
    start_epoch, step = 1, 0
    if resume is not None:
        blob = read_checkpoint(resume)
        model.load_state_dict(blob["tensors"])
        extra = blob["extra"]
        opt.load_state_dict(extra["optimizer"])
        start_epoch = extra["epoch"] + 1
        step = extra["step"]
        history = list(extra.get("history", []))
    if len(train_data) == 0:
        raise ValueError("training set is empty")
    _check_views(model, train_data)
    n = len(train_data)
    log_path = out / "train.log" if out is not None else None
    if log_path is not None and resume is None:
        log_path.write_text("\t".join(LOG_COLUMNS) + "\n")
    ckpt = out / "checkpoint.pt" if out is not None else None

    for epoch in range(start_epoch, cfg.epochs + 1):
        model.train()
        sums = np.zeros(3)
        for b, idx in enumerate(_batches(n, cfg.batch_size, cfg.seed, epoch)):
            x, y = train_data.batch(idx)
            logits, recon = model(x, mask_seed=(cfg.seed, step))
            cls = focal_loss(logits, y, cfg.focal_gamma)
            loss = total_loss(cls, recon)
            if not torch.isfinite(loss):
                _dump_nonfinite(out, epoch, b, idx, train_data, cls, recon)
                raise NonFiniteLossError(f"non-finite loss at epoch {epoch}, batch {b}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            step += 1
            w = len(idx) / n
            sums += w * np.array([loss.item(), cls.item(), recon.item()])
        row = {"epoch": epoch, "total_loss": sums[0], "cls_loss": sums[1], "recon_loss": sums[2],
               "val_acc": math.nan, "val_kappa": math.nan}
        if val_data is not None and len(val_data) and epoch % cfg.eval_every == 0:
            rep = evaluate(model, val_data, batch_size=cfg.batch_size)
            row["val_acc"], row["val_kappa"] = rep.acc, rep.kappa
        history.append(row)
        if log_path is not None:
            with open(log_path, "a") as fh:
                fh.write(_format_row(row) + "\n")
        if on_epoch is not None:
            on_epoch(row)
        log.info(_format_row(row))
        last = epoch == cfg.epochs
        if ckpt is not None and (last or (cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0)):
            save_training_checkpoint(ckpt, model, opt, cfg, epoch, step, history)
    return TrainResult(model=model, history=history, checkpoint=ckpt)


def save_training_checkpoint(path, model, opt, cfg: TrainConfig, epoch: int, step: int, history) -> None:
    model.save(path, extra={
        "optimizer": opt.state_dict(),
        "epoch": epoch,
        "step": step,
        "history": history,
        "train_config": cfg.to_dict(),
    })


def _dump_nonfinite(out, epoch, b, idx, data, cls, recon) -> None:
    ids = [data.manifest.rows[int(i)][0] for i in idx] if hasattr(data, "manifest") else [int(i) for i in idx]
    info = {"epoch": epoch, "batch": b, "sample_ids": ids, "cls_loss": cls.item(), "recon_loss": recon.item()}
    log.error("non-finite loss: %s", info)
    if out is not None:
        (out / "nonfinite_batch.json").write_text(json.dumps(info, indent=1))


@torch.no_grad()
def predict(model: MVGFDR, data, batch_size: int = 32) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return (predicted labels, true labels, softmax scores) without touching model state."""
    was_training = model.training
    model.eval()
    try:
        preds, trues, scores = [], [], []
        for start in range(0, len(data), batch_size):
            x, y = data.batch(range(start, min(start + batch_size, len(data))))
            logits, _ = model(x, mask_seed=None, eta=0.0)
            p = torch.softmax(logits.double(), dim=-1)
            scores.append(p.numpy())
            preds.append(p.argmax(-1).numpy())
            trues.append(y.numpy())
    finally:
        model.train(was_training)
    return np.concatenate(preds), np.concatenate(trues), np.concatenate(scores)


def evaluate(model_or_checkpoint, data, batch_size: int = 32) -> MetricsReport:
    """Full-pass metrics with masking disabled."""
    model = model_or_checkpoint
    if not isinstance(model, MVGFDR):
        model = MVGFDR.load(model_or_checkpoint)
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    _check_views(model, data)
    pred, true, scores = predict(model, data, batch_size)
    return compute_metrics(pred, true, scores)


# sweeps -----------------------------------------------------------------


def resolve_param(name: str) -> str:
    name = PARAM_ALIASES.get(name, name)
    if name not in {f.name for f in dataclasses.fields(ModelConfig)}:
        raise ValueError(f"unknown sweep parameter {name!r}")
    return name


def sweep(grid: dict[str, Sequence], base: TrainConfig, train_data, val_data, out_csv=None,
          metric: str = "acc") -> list[tuple]:
    """One short training run per grid cell, all seeded identically.

    Rows are ``(value1, value2, metric)`` sorted lexicographically by the
    parameter values.
    """
    if len(grid) != 2:
        raise ValueError(f"sweep needs exactly two parameters, got {list(grid)}")
    names = list(grid)
    fields_ = [resolve_param(n) for n in names]
    rows = []
    for values in sorted(itertools.product(*(sorted(grid[n]) for n in names))):
        model_cfg = dataclasses.replace(base.model, **dict(zip(fields_, values)))
        cfg = dataclasses.replace(base, model=model_cfg, out_dir=None)
        result = train(cfg, train_data)
        rep = evaluate(result.model, val_data)
        rows.append((*values, float(getattr(rep, metric))))
        log.info("sweep %s -> %s=%.6f", dict(zip(names, values)), metric, rows[-1][-1])
    if out_csv is not None:
        write_sweep_csv(out_csv, names, rows, metric)
    return rows


def write_sweep_csv(path, names: Sequence[str], rows, metric: str = "acc") -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([*names, metric])
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r])


def read_sweep_csv(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [tuple(float(v) for v in r) for r in reader if r]
    if len(header) != 3:
        raise ValueError(f"{path}: sweep CSV needs exactly 3 columns, got {header}")
    return header, rows
