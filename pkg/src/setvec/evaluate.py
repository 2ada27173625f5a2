"""Run a trained model over a set of bags and collect every reported metric."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import metrics
from .data import Bag
from .errors import DomainError
from .model import ModelParams, encode_bag, predict_bags


def bag_latents(bags: Sequence[Bag], params: ModelParams, chunk: int = 512) -> np.ndarray:
    """Encoder outputs of every patch of every bag, stacked in bag order."""
    patches = [b.patches for b in bags]
    flat = np.concatenate(patches)
    return np.concatenate([encode_bag(flat[i:i + chunk], params) for i in range(0, len(flat), chunk)])


def attention_spread(maps) -> float:
    """Mean over bags of the within-bag standard deviation of the attention weights."""
    return float(np.mean([np.std(getattr(m, "weights", m)) for m in maps]))


def _is_integral(values) -> bool:
    arr = np.asarray(values, dtype=np.float64)
    return bool(np.all(arr == np.round(arr)))


@dataclass
class EvalReport:
    summary: metrics.Summary
    outputs: list
    roc: Optional[metrics.AttentionRocReport]
    spectrum: metrics.SpectrumReport


def evaluate(bags: Sequence[Bag], params: ModelParams, pool_mode: str) -> EvalReport:
    """R², attention AUC (when relevance masks exist), ordinal accuracy (integer targets) and latent spectrum."""
    if not bags:
        raise DomainError("no bags to evaluate")
    outputs = predict_bags(bags, params, pool_mode)
    ys = [b.y for b in bags]
    preds = [o.y_hat for o in outputs]
    summary = metrics.Summary()
    if all(y is not None for y in ys):
        summary.r2 = metrics.r_squared(ys, preds)
        if _is_integral(ys):
            rounded = np.round(preds)
            summary.exact_acc = metrics.ordinal_accuracy(ys, rounded, 0)
            summary.one_off_acc = metrics.ordinal_accuracy(ys, rounded, 1)
    roc = None
    if all(b.relevance is not None for b in bags):
        try:
            roc = metrics.attention_roc(bags, [o.attention for o in outputs])
            summary.mean_auc = roc.mean_auc
        except DomainError:
            roc = None
    spectrum = metrics.latent_spectrum(bag_latents(bags, params))
    summary.effective_rank = spectrum.effective_rank
    summary.sigma = [float(s) for s in spectrum.singular_values]
    summary.extra = {
        "n_bags": len(bags),
        "attention_std": attention_spread([o.attention for o in outputs]),
        "threshold_rank": spectrum.threshold_rank,
        "top_share": metrics.top_share(spectrum.singular_values),
    }
    if roc is not None:
        summary.extra["roc_skipped"] = roc.n_skipped
    return EvalReport(summary, outputs, roc, spectrum)
