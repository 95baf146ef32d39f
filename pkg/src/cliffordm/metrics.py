"""Multi-label evaluation: one-vs-rest AUC, fixed-threshold F1 and F1opt."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from scipy.stats import rankdata

THRESHOLD_GRID = tuple(round(0.10 + 0.05 * k, 2) for k in range(16))


def binary_auc(scores, labels) -> Optional[float]:
    """Mann-Whitney AUC, ties counted half; ``None`` when only one class is present.

    Computed from integer rank sums so the value is exactly
    ``(2 * #correct + #ties) / (2 * n_pos * n_neg)``.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    if scores.size == 0:
        raise ValueError("binary_auc needs at least one sample")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    twice_ranks = np.rint(2 * rankdata(scores, method="average")).astype(np.int64)
    num = int(twice_ranks[labels].sum()) - n_pos * (n_pos + 1)
    return num / (2 * n_pos * n_neg)


def per_class_auc(scores, labels) -> List[Optional[float]]:
    scores, labels = _check_batch(scores, labels)
    return [binary_auc(scores[:, c], labels[:, c]) for c in range(scores.shape[1])]


def macro_auc(scores, labels) -> float:
    """Mean AUC over classes that have both positives and negatives."""
    vals = [a for a in per_class_auc(scores, labels) if a is not None]
    if not vals:
        raise ValueError("every class is degenerate; macro AUC undefined")
    return float(np.mean(vals))


def f1_at(scores, labels, t: float) -> Tuple[float, float, float]:
    """Precision, recall and F1 predicting positive iff ``score >= t``.

    Zero denominators give 0 for the affected quantity.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    pred = scores >= t
    tp = int(np.sum(pred & labels))
    fp = int(np.sum(pred & ~labels))
    fn = int(np.sum(~pred & labels))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * tp / (2 * tp + fp + fn) if tp else 0.0
    return precision, recall, f1


def best_threshold(scores, labels, grid=THRESHOLD_GRID) -> Tuple[float, float]:
    """Grid threshold with the highest F1; ties go to the lowest threshold."""
    best_t, best_f = grid[0], -1.0
    for t in grid:
        f = f1_at(scores, labels, t)[2]
        if f > best_f:
            best_t, best_f = t, f
    return best_t, best_f


def _macro_mask(labels) -> np.ndarray:
    pos = labels.sum(axis=0)
    mask = (pos > 0) & (pos < labels.shape[0])
    return mask if mask.any() else np.ones_like(mask)


def f1opt(scores, labels, grid=THRESHOLD_GRID):
    """Per-class ``(threshold, F1)`` pairs and their macro mean.

    The macro mean skips classes whose labels are all equal, unless every class
    is like that.
    """
    scores, labels = _check_batch(scores, labels)
    per = [best_threshold(scores[:, c], labels[:, c], grid) for c in range(scores.shape[1])]
    f1s = np.array([f for _, f in per])
    return per, float(f1s[_macro_mask(labels)].mean())


def macro_f1_at(scores, labels, t: float = 0.5) -> float:
    scores, labels = _check_batch(scores, labels)
    f1s = np.array([f1_at(scores[:, c], labels[:, c], t)[2] for c in range(scores.shape[1])])
    return float(f1s[_macro_mask(labels)].mean())


def _check_batch(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim == 1:
        scores, labels = scores[:, None], labels.reshape(-1, 1)
    if scores.shape != labels.shape:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} differ")
    if scores.shape[0] < 1:
        raise ValueError("empty evaluation batch")
    if not np.isfinite(scores).all():
        raise ValueError("scores must be finite")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be 0/1")
    return scores, labels.astype(np.int64)


@dataclass
class MetricsReport:
    per_class_auc: List[Optional[float]]
    macro_auc: Optional[float]
    thresholds: List[float]
    per_class_f1: List[float]
    macro_f1opt: float
    macro_f1_at_05: float
    num_degenerate: int
    num_samples: int = 0
    class_names: List[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def evaluate(scores, labels, class_names=None) -> MetricsReport:
    """Full report for sigmoid scores ``B x C`` against 0/1 labels."""
    scores, labels = _check_batch(scores, labels)
    aucs = per_class_auc(scores, labels)
    valid = [a for a in aucs if a is not None]
    per, macro_f = f1opt(scores, labels)
    return MetricsReport(
        per_class_auc=aucs,
        macro_auc=float(np.mean(valid)) if valid else None,
        thresholds=[t for t, _ in per],
        per_class_f1=[f for _, f in per],
        macro_f1opt=macro_f,
        macro_f1_at_05=macro_f1_at(scores, labels, 0.5),
        num_degenerate=sum(a is None for a in aucs),
        num_samples=int(scores.shape[0]),
        class_names=list(class_names) if class_names is not None else [],
    )
