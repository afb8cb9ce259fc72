"""Toy four-stage pyramid transformer with a graph fusion block after every stage."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from mvgfdr.anchors import AnchorBank
from mvgfdr.fusion import GraphFusion
from mvgfdr.mvgi import FrequencyPartition, ViewGraph, aggregate_nodes, partition_nodes, soft_assign
from mvgfdr.reconstruction import make_reconstructor, stage_recon_loss

CHECKPOINT_MAGIC = "MVGF1"
_DTYPES = {"float32": torch.float32, "float64": torch.float64}


class CheckpointVersionError(ValueError):
    pass


@dataclass
class ModelConfig:
    image_size: int = 64
    channels: tuple[int, ...] = (32, 64, 128, 256)
    depths: tuple[int, ...] = (1, 1, 1, 1)
    heads: int = 4
    num_anchors: int = 32
    k_theta: float = 0.75
    eta: float = 0.5
    alpha: float = 0.3
    views: int = 4
    classes: int = 5
    reconstructor: str = "cvr"
    seed: int = 0
    mlp_ratio: int = 2
    # ablation switches
    mvgf: bool = True
    node_selection: bool = True
    reconstruction: bool = True
    # let reconstruction gradients reach the backbone (jointly trained
    # backbones collapse onto trivially reconstructable features)
    recon_backbone_grad: bool = False
    dtype: str = "float32"

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.depths = tuple(int(d) for d in self.depths)
        self.validate()

    def validate(self) -> None:
        if len(self.channels) != 4 or len(self.depths) != 4:
            raise ValueError("channels and depths need exactly four entries")
        for name in ("image_size", "heads", "num_anchors", "views", "mlp_ratio"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if min(self.channels) < 1 or min(self.depths) < 0:
            raise ValueError("channels must be positive and depths non-negative")
        if not 0.0 < self.k_theta <= 1.0:
            raise ValueError(f"k_theta must lie in (0, 1], got {self.k_theta}")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError(f"eta must lie in [0, 1], got {self.eta}")
        if self.alpha < 0:
            raise ValueError(f"alpha must be non-negative, got {self.alpha}")
        if self.classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.classes}")
        if self.reconstructor.lower() not in ("gcr", "cvr"):
            raise ValueError(f"reconstructor must be 'gcr' or 'cvr', got {self.reconstructor!r}")
        if self.dtype not in _DTYPES:
            raise ValueError(f"dtype must be one of {sorted(_DTYPES)}")
        if self.image_size % 32:
            raise ValueError(
                f"image_size {self.image_size} is not divisible by 32 (strides 4, 2, 2, 2)"
            )
        for c in self.channels:
            if c % self.heads:
                raise ValueError(f"channel width {c} not divisible by {self.heads} heads")

    @property
    def torch_dtype(self) -> torch.dtype:
        return _DTYPES[self.dtype]

    def grid_sizes(self) -> list[int]:
        s = self.image_size // 4
        return [s, s // 2, s // 4, s // 8]

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["channels"] = list(self.channels)
        d["depths"] = list(self.depths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


class EncoderBlock(nn.Module):
    """Normalization-free pre-activation block. Both residual branches start
    at zero, so a fresh block is the identity."""

    def __init__(self, C: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(C, 3 * C)
        self.proj = nn.Linear(C, C)
        self.mlp = nn.Sequential(nn.Linear(C, mlp_ratio * C), nn.GELU(), nn.Linear(mlp_ratio * C, C))
        for lin in (self.proj, self.mlp[2]):
            nn.init.zeros_(lin.weight)
            nn.init.zeros_(lin.bias)

    def forward(self, x):
        *lead, T, C = x.shape
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        split = lambda t: t.reshape(*lead, T, self.heads, C // self.heads).transpose(-2, -3)
        a = F.scaled_dot_product_attention(split(q), split(k), split(v))
        x = x + self.proj(a.transpose(-2, -3).reshape(*lead, T, C))
        return x + self.mlp(x)


class PyramidStage(nn.Module):
    """Patch-merging downsample followed by transformer blocks. The first
    stage puts a small convolutional stem in front of its patch embedding.

    Views are folded into the batch dimension, so all views share weights.
    """

    def __init__(self, c_in: int, c_out: int, stride: int, grid: int, depth: int,
                 heads: int, mlp_ratio: int, with_cls: bool = False):
        super().__init__()
        self.stride, self.grid = stride, grid
        merge = nn.Conv2d(c_in if stride != 4 else c_out, c_out, kernel_size=stride, stride=stride)
        if stride == 4:
            # full-resolution ReLU stem: thresholding small bright structures
            # before patching is what lets the pyramid count them
            self.embed = nn.Sequential(nn.Conv2d(c_in, c_out, 3, padding=1), nn.ReLU(),
                                       nn.Conv2d(c_out, c_out, 3, padding=1), nn.ReLU(), merge)
        else:
            self.embed = merge
        self.pos = nn.Parameter(0.02 * torch.randn(grid * grid, c_out))
        self.cls = nn.Parameter(0.02 * torch.randn(1, c_out)) if with_cls else None
        self.blocks = nn.ModuleList(EncoderBlock(c_out, heads, mlp_ratio) for _ in range(depth))

    def forward(self, x: torch.Tensor):
        """``x`` is ``(B, c_in, H, W)``; returns patch tokens ``(B, N, C)`` and
        the class token ``(B, C)`` (or ``None``)."""
        if x.shape[-1] % self.stride or x.shape[-2] % self.stride:
            raise ValueError(f"spatial dims {tuple(x.shape[-2:])} not divisible by stride {self.stride}")
        t = self.embed(x).flatten(2).transpose(1, 2)
        t = t + self.pos
        if self.cls is not None:
            t = torch.cat([t, self.cls.expand(t.shape[0], 1, -1)], dim=1)
        for block in self.blocks:
            t = block(t)
        if self.cls is not None:
            return t[:, :-1], t[:, -1]
        return t, None


class MVGFBlock(nn.Module):
    """Graph initialization, node selection, high-frequency fusion and
    shared-node reconstruction for one stage."""

    def __init__(self, cfg: ModelConfig, stage_id: int):
        super().__init__()
        C = cfg.channels[stage_id - 1]
        self.cfg = cfg
        self.stage_id = stage_id
        self.bank = AnchorBank(cfg.num_anchors, C, stage_id=stage_id)
        self.fusion = GraphFusion(C)
        self.reconstructor = (
            make_reconstructor(cfg.reconstructor, C, cfg.views, cfg.num_anchors) if cfg.views >= 2 else None
        )
        self.last = {}

    def partitions(self, nodes, assign):
        """Per-view partitions of ``nodes (B, K, M, C)`` / ``assign (B, K, N, M)``."""
        K = nodes.shape[1]
        parts = []
        for k in range(K):
            g = ViewGraph(nodes=nodes[:, k], assign=assign[:, k], view_id=k)
            if self.cfg.node_selection:
                parts.append(partition_nodes(g, self.cfg.k_theta))
            else:
                parts.append(FrequencyPartition(g.nodes, g.nodes, g.assign, g.assign, g.M))
        return parts

    def forward(self, feats: torch.Tensor, mask_seed=None, eta: float | None = None):
        """``feats`` is ``(B, K, N, C)``. Returns updated features and the stage
        reconstruction loss (zero when masking is off or K < 2)."""
        bank = self.bank
        anchors = bank.anchors
        sigma = bank.sigma.clone()
        assign = soft_assign(feats, bank, anchors=anchors, sigma=sigma)
        graph = aggregate_nodes(feats, bank, assign, anchors=anchors, sigma=sigma)
        if self.training:
            bank.update_sigma(feats)
        parts = self.partitions(graph.nodes, assign)
        updated, fused = self.fusion(parts, [feats[:, k] for k in range(feats.shape[1])])
        out = torch.stack(updated, dim=1)
        eta = self.cfg.eta if eta is None else eta
        loss = feats.new_zeros(())
        if self.reconstructor is not None and self.cfg.reconstruction and eta > 0 and mask_seed is not None:
            if self.cfg.recon_backbone_grad:
                rparts = parts
            else:
                # same graph, but only the anchors and reconstructor see this loss
                fd = feats.detach()
                rassign = soft_assign(fd, bank, anchors=anchors, sigma=sigma)
                rparts = self.partitions(aggregate_nodes(fd, bank, rassign, anchors=anchors, sigma=sigma).nodes,
                                         rassign)
            lowmid = torch.stack([p.lowmid_nodes for p in rparts], dim=1)
            loss = stage_recon_loss(lowmid, eta, self.cfg.alpha, self.reconstructor,
                                    (*_as_tuple(mask_seed), self.stage_id))
        self.last = {"nodes": graph.nodes, "assign": assign, "fused": fused}
        return out, loss


def _as_tuple(seed):
    return tuple(seed) if isinstance(seed, (tuple, list)) else (seed,)


class MVGFDR(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        cfg.validate()
        with torch.random.fork_rng():
            torch.manual_seed(cfg.seed)
            grids = cfg.grid_sizes()
            c_in = [3, *cfg.channels[:3]]
            strides = [4, 2, 2, 2]
            self.stages = nn.ModuleList(
                PyramidStage(c_in[i], cfg.channels[i], strides[i], grids[i], cfg.depths[i],
                             cfg.heads, cfg.mlp_ratio, with_cls=(i == 3))
                for i in range(4)
            )
            self.mvgf = nn.ModuleList(MVGFBlock(cfg, i + 1) for i in range(4))
            C4 = cfg.channels[3]
            self.head = nn.Sequential(
                nn.Linear(cfg.views * C4, 2 * C4), nn.ReLU(), nn.Linear(2 * C4, cfg.classes)
            )
        self.to(cfg.torch_dtype)

    def stage_forward(self, i: int, x: torch.Tensor):
        """Stage ``i`` (0-based) on ``x (B, K, c, H, W)``; returns ``(B, K, N, C)`` tokens and class tokens."""
        B, K = x.shape[:2]
        tokens, cls = self.stages[i](x.flatten(0, 1))
        tokens = tokens.reshape(B, K, *tokens.shape[1:])
        if cls is not None:
            cls = cls.reshape(B, K, -1)
        return tokens, cls

    def classify(self, cls_tokens: torch.Tensor) -> torch.Tensor:
        """``cls_tokens (B, K, C4)`` concatenated view-major into the two-layer head."""
        return self.head(cls_tokens.flatten(1))

    def forward(self, views: torch.Tensor, mask_seed=None, eta: float | None = None):
        """``views`` is ``(B, K, 3, S, S)``.

        Returns ``(logits (B, G), recon)`` where ``recon`` is the stage-mean
        reconstruction loss. Reconstruction runs only when ``mask_seed`` is
        given.
        """
        if views.ndim != 5 or views.shape[1] != self.cfg.views:
            raise ValueError(f"expected (B, {self.cfg.views}, 3, S, S) input, got {tuple(views.shape)}")
        x = views.to(self.cfg.torch_dtype)
        B, K = x.shape[:2]
        recon = x.new_zeros(())
        cls = None
        for i in range(4):
            tokens, cls = self.stage_forward(i, x)
            if self.cfg.mvgf:
                tokens, loss = self.mvgf[i](tokens, mask_seed=mask_seed, eta=eta)
                recon = recon + loss
            g = self.cfg.grid_sizes()[i]
            x = tokens.transpose(-1, -2).reshape(B, K, -1, g, g)
        return self.classify(cls), recon / 4.0

    # checkpoints -----------------------------------------------------------

    def save(self, path, extra: dict | None = None) -> None:
        state = {k: v.detach().clone() for k, v in self.state_dict().items()}
        torch.save(
            {
                "magic": CHECKPOINT_MAGIC,
                "config": self.cfg.to_dict(),
                "tensors": state,
                "shapes": {k: list(v.shape) for k, v in state.items()},
                "extra": extra or {},
            },
            path,
        )

    @classmethod
    def load(cls, path, return_extra: bool = False):
        blob = read_checkpoint(path)
        model = cls(ModelConfig.from_dict(blob["config"]))
        model.load_state_dict(blob["tensors"], strict=True)
        return (model, blob["extra"]) if return_extra else model


def read_checkpoint(path) -> dict:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(blob, dict) or blob.get("magic") != CHECKPOINT_MAGIC:
        raise CheckpointVersionError(f"{path}: not an {CHECKPOINT_MAGIC} checkpoint")
    for name, shape in blob["shapes"].items():
        if list(blob["tensors"][name].shape) != shape:
            raise CheckpointVersionError(f"{path}: tensor {name} has shape metadata {shape} "
                                         f"but stored shape {list(blob['tensors'][name].shape)}")
    return blob
