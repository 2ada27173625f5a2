"""Evaluation: R², attention ROC/AUC, ordinal accuracy, latent spectrum, exports."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import DomainError, UsageError

FLOAT_FMT = "{:.9g}"


def fmt(x: float) -> str:
    return FLOAT_FMT.format(float(x))


def r_squared(y, y_hat) -> float:
    y, y_hat = np.asarray(y, dtype=np.float64), np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape or y.ndim != 1 or len(y) < 2:
        raise UsageError(f"r_squared needs two equal-length vectors of length >= 2, got {y.shape} and {y_hat.shape}")
    ss_tot = float(((y - y.mean()) ** 2).sum())
    if ss_tot == 0:
        raise DomainError("r_squared is undefined for constant targets")
    return 1.0 - float(((y - y_hat) ** 2).sum()) / ss_tot


def ordinal_accuracy(y_true, y_pred, max_offset: int = 0) -> float:
    """Fraction of predictions within ``max_offset`` classes of the truth (0 = exact, 1 = one-off)."""
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    if y_true.shape != y_pred.shape or len(y_true) < 1:
        raise UsageError("ordinal_accuracy needs equal-length non-empty vectors")
    return float(np.mean(np.abs(y_true - y_pred) <= max_offset))


# ---------------------------------------------------------------------------
# ROC
# ---------------------------------------------------------------------------


@dataclass
class RocCurve:
    thresholds: np.ndarray
    tpr: np.ndarray
    fpr: np.ndarray
    auc: float


def roc_curve(scores, labels) -> RocCurve:
    """ROC by sweeping a threshold down through the distinct scores.

    Tied scores enter together, producing a diagonal segment, so the
    trapezoidal area scores ties as one half.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    n_pos, n_neg = int(labels.sum()), int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        raise DomainError("ROC needs at least one positive and one negative")
    order = np.argsort(-scores, kind="stable")
    s, lab = scores[order], labels[order]
    last_of_group = np.r_[s[1:] != s[:-1], True]
    tp = np.cumsum(lab)[last_of_group]
    fp = np.cumsum(~lab)[last_of_group]
    tpr = np.r_[0.0, tp / n_pos]
    fpr = np.r_[0.0, fp / n_neg]
    thresholds = np.r_[np.inf, s[last_of_group]]
    return RocCurve(thresholds, tpr, fpr, float(np.trapezoid(tpr, fpr)))


def auc_pairwise(scores, labels) -> float:
    """Probability that a random positive outranks a random negative; ties count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    pos, neg = scores[labels], scores[~labels]
    if len(pos) == 0 or len(neg) == 0:
        raise DomainError("AUC needs at least one positive and one negative")
    diff = pos[:, None] - neg[None, :]
    return float(((diff > 0).sum() + 0.5 * (diff == 0).sum()) / diff.size)


def tpr_at(curve: RocCurve, grid: np.ndarray) -> np.ndarray:
    """Vertical sample of a curve: the highest TPR reached at FPR <= each grid point."""
    idx = np.searchsorted(curve.fpr, grid, side="right") - 1
    return curve.tpr[idx]


@dataclass
class AttentionRocReport:
    curves: list
    fpr_grid: np.ndarray
    mean_tpr: np.ndarray
    std_tpr: np.ndarray
    aucs: np.ndarray
    mean_auc: float
    n_scored: int
    n_skipped: int


def attention_roc(bags: Sequence, weights: Sequence, grid_points: int = 101) -> AttentionRocReport:
    """Per-bag ROC of attention weights as detectors of relevant instances.

    ``weights`` holds one weight vector (or AttentionMap) per bag. Bags lacking
    either class are skipped and counted.
    """
    if len(bags) != len(weights):
        raise UsageError(f"{len(bags)} bags but {len(weights)} weight vectors")
    grid = np.linspace(0.0, 1.0, grid_points)
    curves, rows, aucs, skipped = [], [], [], 0
    for bag, w in zip(bags, weights):
        alpha = np.asarray(getattr(w, "weights", w), dtype=np.float64)
        if bag.relevance is None:
            raise UsageError(f"bag {bag.subject_id!r} has no relevance mask")
        if len(alpha) != len(bag):
            raise UsageError(f"bag {bag.subject_id!r}: {len(alpha)} weights for {len(bag)} patches")
        rel = np.asarray(bag.relevance, dtype=bool)
        if rel.all() or not rel.any():
            skipped += 1
            continue
        curve = roc_curve(alpha, rel)
        curves.append(curve)
        rows.append(tpr_at(curve, grid))
        aucs.append(auc_pairwise(alpha, rel))
    if not curves:
        raise DomainError("no bag contains both relevant and irrelevant instances")
    rows = np.array(rows)
    aucs = np.array(aucs)
    return AttentionRocReport(curves, grid, rows.mean(axis=0), rows.std(axis=0), aucs,
                              float(aucs.mean()), len(curves), skipped)


# ---------------------------------------------------------------------------
# spectrum
# ---------------------------------------------------------------------------


@dataclass
class SpectrumReport:
    singular_values: np.ndarray
    effective_rank: float
    explained_variance: np.ndarray
    threshold_rank: int = 0

    def to_dict(self) -> dict:
        return {
            "singular_values": [float(fmt(s)) for s in self.singular_values],
            "effective_rank": float(fmt(self.effective_rank)),
            "explained_variance": [float(fmt(v)) for v in self.explained_variance],
            "threshold_rank": self.threshold_rank,
            "top_share": float(fmt(top_share(self.singular_values))),
        }


def effective_rank(singular_values) -> float:
    """exp of the Shannon entropy of the normalised singular values (1 for an all-zero spectrum)."""
    s = np.asarray(singular_values, dtype=np.float64)
    s = s[s > 0]
    if len(s) == 0:
        return 1.0
    p = s / s.sum()
    return float(np.exp(-(p * np.log(p)).sum()))


def top_share(singular_values) -> float:
    s = np.asarray(singular_values, dtype=np.float64)
    return float(s[0] / s.sum()) if s.sum() > 0 else 1.0


def latent_spectrum(latents, rel_threshold: float = 0.01) -> SpectrumReport:
    H = np.asarray(latents, dtype=np.float64)
    if H.ndim != 2 or H.shape[0] < 1:
        raise UsageError(f"latent_spectrum needs an [n, d] matrix with n >= 1, got {H.shape}")
    centred = H - H.mean(axis=0, keepdims=True)
    s = np.linalg.svd(centred, compute_uv=False)
    energy = s ** 2
    explained = energy / energy.sum() if energy.sum() > 0 else np.zeros_like(s)
    thr = int((s > rel_threshold * s[0]).sum()) if len(s) and s[0] > 0 else 0
    return SpectrumReport(s, effective_rank(s), explained, thr)


# ---------------------------------------------------------------------------
# exports
# ---------------------------------------------------------------------------

ATTENTION_HEADER = ["subject_id", "patch_index", "coord_0", "coord_1", "coord_2", "alpha"]


def attention_rows(bag, weights) -> list:
    alpha = np.asarray(getattr(weights, "weights", weights), dtype=np.float64)
    if len(alpha) != len(bag):
        raise UsageError(f"bag {bag.subject_id!r}: {len(alpha)} weights for {len(bag)} patches")
    rows = []
    for j, a in enumerate(alpha):
        coords = [""] * 3 if bag.coordinates is None else [int(c) for c in bag.coordinates[j]]
        rows.append([bag.subject_id, j, *coords, fmt(a)])
    return rows


def export_attention(pairs, path) -> int:
    """Write ``(bag, weights)`` pairs as attention CSV; returns the number of rows."""
    path = Path(path)
    count = 0
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(ATTENTION_HEADER)
        for bag, weights in pairs:
            rows = attention_rows(bag, weights)
            writer.writerows(rows)
            count += len(rows)
    return count


def export_subject_vectors(subject_ids: Sequence[str], vectors, ys: Sequence[Optional[float]], path) -> None:
    vectors = np.asarray(vectors, dtype=np.float64)
    if len(subject_ids) != len(vectors) or len(ys) != len(vectors):
        raise UsageError("subject ids, vectors and targets must have equal length")
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["subject_id", *[f"z{k}" for k in range(vectors.shape[1])], "y"])
        for sid, vec, y in zip(subject_ids, vectors, ys):
            writer.writerow([sid, *[fmt(v) for v in vec], "" if y is None else fmt(y)])


@dataclass
class Summary:
    r2: Optional[float] = None
    mean_auc: Optional[float] = None
    exact_acc: Optional[float] = None
    one_off_acc: Optional[float] = None
    effective_rank: Optional[float] = None
    sigma: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        body = {
            "r2": self.r2, "mean_auc": self.mean_auc, "exact_acc": self.exact_acc,
            "one_off_acc": self.one_off_acc, "effective_rank": self.effective_rank, "sigma": self.sigma,
        }
        body.update(self.extra)
        return json.dumps(_round_floats(body), indent=2, sort_keys=True) + "\n"


def _round_floats(obj):
    if isinstance(obj, float):
        return float(fmt(obj))
    if isinstance(obj, dict):
        return {k: _round_floats(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round_floats(v) for v in obj]
    if isinstance(obj, np.generic):
        return _round_floats(obj.item())
    return obj
