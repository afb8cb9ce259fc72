"""Multi-view graph fusion and masked cross-view reconstruction for graded classification."""

from mvgfdr.anchors import AnchorBank, DctBasis, dct_span_residual, make_dct_basis, synthesize_anchors
from mvgfdr.backbone import MVGFDR, ModelConfig
from mvgfdr.losses import focal_loss, total_loss
from mvgfdr.metrics import MetricsReport, compute_metrics

__all__ = [
    "AnchorBank",
    "DctBasis",
    "MVGFDR",
    "MetricsReport",
    "ModelConfig",
    "compute_metrics",
    "dct_span_residual",
    "focal_loss",
    "make_dct_basis",
    "synthesize_anchors",
    "total_loss",
]

__version__ = "0.1.0"
