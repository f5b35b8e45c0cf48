"""Region-level detection metrics: ROC/AUC via the rank statistic and
recall at fixed false-positive rates."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..guardians import threshold_at_fpr


def _rank_with_ties(scores: np.ndarray) -> np.ndarray:
    """1-based ranks, ties sharing their average rank."""
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores))
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def roc_auc(
    scores: list[float] | np.ndarray, labels: list[bool] | np.ndarray
) -> tuple[list[tuple[float, float, float]], float]:
    """ROC curve points and AUC with positives scoring high.

    AUC is the rank statistic P(random positive > random negative), ties
    counting one half. The curve is a list of (fpr, tpr, threshold) points,
    nondecreasing in both rates. Raises ValueError unless both classes are
    present.
    """
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=bool)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be matching 1-D sequences")
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("roc_auc needs both positive and negative samples")

    ranks = _rank_with_ties(scores)
    auc = (ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)

    order = np.argsort(-scores, kind="mergesort")
    sorted_labels = labels[order]
    sorted_scores = scores[order]
    curve = [(0.0, 0.0, float("inf"))]
    tp = fp = 0
    for i in range(len(order)):
        tp += int(sorted_labels[i])
        fp += int(~sorted_labels[i])
        # emit a point only after the last of a run of tied scores
        if i + 1 == len(order) or sorted_scores[i + 1] != sorted_scores[i]:
            curve.append((fp / n_neg, tp / n_pos, float(sorted_scores[i])))
    return curve, float(auc)


@dataclass
class RecallEntry:
    fpr: float
    threshold: float
    recall: float
    low_confidence: bool  # too few negatives to resolve this FPR


def recall_at_fpr(
    scores: np.ndarray,
    labels: np.ndarray,
    fprs: list[float],
) -> list[RecallEntry]:
    """Recall of the positives when the threshold is pinned at each benign
    quantile. Entries are marked low-confidence when there are fewer
    negatives than 1/FPR."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=bool)
    neg = scores[~labels]
    pos = scores[labels]
    if len(neg) == 0 or len(pos) == 0:
        raise ValueError("recall_at_fpr needs both classes")
    out = []
    for fpr in fprs:
        if fpr >= 1.0:
            threshold = -np.inf
        else:
            threshold = threshold_at_fpr(neg, fpr)
        recall = float((pos > threshold).mean())
        low = fpr <= 0.0 or len(neg) < 1.0 / fpr
        out.append(
            RecallEntry(
                fpr=fpr,
                threshold=float(threshold),
                recall=recall,
                low_confidence=bool(low),
            )
        )
    return out
