"""Classification metrics: confusion matrix, one-vs-rest rates, Cohen's kappa
and macro one-vs-rest AUC.

Per-class values that are undefined (class absent from the ground truth, or
a 0/0 specificity) are reported as ``None`` and dropped from the macro means.
Precision with no predictions of a class is 0.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

PER_CLASS_KEYS = ("precision", "sensitivity", "specificity", "f1")
SCALAR_KEYS = (
    "acc",
    "kappa",
    "macro_f1",
    "macro_auc",
    "macro_precision",
    "macro_sensitivity",
    "macro_specificity",
)


@dataclass
class MetricsReport:
    confusion: np.ndarray
    precision: list
    sensitivity: list
    specificity: list
    f1: list
    auc: list
    acc: float
    kappa: float
    macro_precision: float
    macro_sensitivity: float
    macro_specificity: float
    macro_f1: float
    macro_auc: float

    @property
    def n_classes(self) -> int:
        return self.confusion.shape[0]

    def to_dict(self) -> dict:
        out = {k: _clean(getattr(self, k)) for k in SCALAR_KEYS}
        for k in PER_CLASS_KEYS:
            out[f"per_class.{k}"] = [_clean(v) for v in getattr(self, k)]
        out["per_class.auc"] = [_clean(v) for v in self.auc]
        out["confusion"] = self.confusion.astype(int).tolist()
        return out

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)


def _clean(v):
    if v is None:
        return None
    v = float(v)
    return None if math.isnan(v) else v


def validate_report_dict(d: dict) -> None:
    """Raise ``ValueError`` unless ``d`` has the serialized report layout."""
    missing = [k for k in (*SCALAR_KEYS, *(f"per_class.{k}" for k in PER_CLASS_KEYS), "confusion") if k not in d]
    if missing:
        raise ValueError(f"metrics report missing keys: {missing}")
    conf = np.asarray(d["confusion"])
    if conf.ndim != 2 or conf.shape[0] != conf.shape[1] or (conf < 0).any():
        raise ValueError("confusion must be a square non-negative count matrix")
    G = conf.shape[0]
    for k in PER_CLASS_KEYS:
        vals = d[f"per_class.{k}"]
        if len(vals) != G:
            raise ValueError(f"per_class.{k} has {len(vals)} entries, expected {G}")
        if any(v is not None and not 0.0 <= v <= 1.0 for v in vals):
            raise ValueError(f"per_class.{k} has values outside [0, 1]")
    for k in SCALAR_KEYS:
        v = d[k]
        lo = -1.0 if k == "kappa" else 0.0
        if v is not None and not lo <= v <= 1.0:
            raise ValueError(f"{k}={v} outside [{lo}, 1]")


def confusion_matrix(true_labels, pred_labels, G: int) -> np.ndarray:
    conf = np.zeros((G, G), dtype=np.int64)
    np.add.at(conf, (true_labels, pred_labels), 1)
    return conf


def cohen_kappa(conf: np.ndarray) -> float:
    n = conf.sum()
    p_o = np.trace(conf) / n
    p_e = float((conf.sum(1) * conf.sum(0)).sum()) / float(n) ** 2
    if p_e >= 1.0:
        return 1.0 if p_o >= 1.0 else 0.0
    return float((p_o - p_e) / (1.0 - p_e))


def ovr_auc(scores: np.ndarray, positive: np.ndarray) -> float:
    """Mann-Whitney AUC with midranks for ties; NaN without both classes."""
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return math.nan
    ranks = rankdata(scores, method="average")
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def _div(a, b):
    return a / b if b else math.nan


def _nanmean(vals) -> float:
    vals = [v for v in vals if v is not None and not math.isnan(v)]
    return float(np.mean(vals)) if vals else math.nan


def compute_metrics(pred_labels, true_labels, scores) -> MetricsReport:
    pred = np.asarray(pred_labels, dtype=np.int64).ravel()
    true = np.asarray(true_labels, dtype=np.int64).ravel()
    scores = np.asarray(scores, dtype=np.float64)
    if true.size == 0:
        raise ValueError("cannot compute metrics on an empty set")
    if pred.shape != true.shape or scores.ndim != 2 or scores.shape[0] != true.size:
        raise ValueError("pred_labels, true_labels and scores disagree in length")
    G = scores.shape[1]
    if true.min() < 0 or true.max() >= G or pred.min() < 0 or pred.max() >= G:
        raise ValueError(f"labels must lie in [0, {G})")
    conf = confusion_matrix(true, pred, G)
    n = conf.sum()
    tp = np.diag(conf).astype(np.float64)
    fp = conf.sum(0) - tp
    fn = conf.sum(1) - tp
    tn = n - tp - fp - fn

    precision, sensitivity, specificity, f1, auc = [], [], [], [], []
    for c in range(G):
        if conf[c].sum() == 0:
            precision.append(None)
            sensitivity.append(None)
            specificity.append(None)
            f1.append(None)
            auc.append(None)
            continue
        p = tp[c] / (tp[c] + fp[c]) if tp[c] + fp[c] else 0.0
        r = tp[c] / (tp[c] + fn[c])
        s = _div(tn[c], tn[c] + fp[c])
        precision.append(float(p))
        sensitivity.append(float(r))
        specificity.append(None if math.isnan(s) else float(s))
        f1.append(float(2 * p * r / (p + r)) if p + r else 0.0)
        a = ovr_auc(scores[:, c], true == c)
        auc.append(None if math.isnan(a) else a)

    return MetricsReport(
        confusion=conf,
        precision=precision,
        sensitivity=sensitivity,
        specificity=specificity,
        f1=f1,
        auc=auc,
        acc=float(tp.sum() / n),
        kappa=cohen_kappa(conf),
        macro_precision=_nanmean(precision),
        macro_sensitivity=_nanmean(sensitivity),
        macro_specificity=_nanmean(specificity),
        macro_f1=_nanmean(f1),
        macro_auc=_nanmean(auc),
    )
