"""Evaluation metrics: AUC, area under the precision-recall curve, RMSE."""

from dataclasses import dataclass

import numpy as np


@dataclass
class EvalReport:
    metric: str
    value: float
    n_samples: int
    n_positive: int = 0


def _check_binary(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.size != labels.size:
        raise ValueError("scores and labels differ in length")
    if scores.size == 0:
        raise ValueError("empty inputs")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores contain non-finite entries")
    uniq = np.unique(labels)
    if not np.all(np.isin(uniq, (0, 1))):
        raise ValueError("labels must be binary 0/1, got values %s" % uniq)
    pos = labels.astype(np.float64)
    n_pos = int(pos.sum())
    n_neg = int(pos.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise ValueError(
            "need both classes present, got %d positives and %d negatives" % (n_pos, n_neg)
        )
    return scores, pos, n_pos, n_neg


def auc(scores, labels):
    """Probability a random positive outranks a random negative; ties count half.

    Computed from average ranks, which is exactly the pairwise tie-aware count.
    """
    scores, pos, n_pos, n_neg = _check_binary(scores, labels)
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(scores.size, dtype=np.float64)
    s = scores[order]
    i = 0
    while i < s.size:
        j = i
        while j + 1 < s.size and s[j + 1] == s[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    pos_rank_sum = float(ranks[pos == 1].sum())
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def auprc(scores, labels):
    """Step-wise precision-recall integration, descending scores, ties as one block."""
    scores, pos, n_pos, _ = _check_binary(scores, labels)
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    p = pos[order]
    area = 0.0
    tp = 0.0
    fp = 0.0
    prev_recall = 0.0
    i = 0
    while i < s.size:
        j = i
        while j + 1 < s.size and s[j + 1] == s[i]:
            j += 1
        tp += float(p[i : j + 1].sum())
        fp += float(j - i + 1 - p[i : j + 1].sum())
        recall = tp / n_pos
        precision = tp / (tp + fp)
        area += (recall - prev_recall) * precision
        prev_recall = recall
        i = j + 1
    return area


def rmse(predictions, truths):
    """Root mean squared residual."""
    predictions = np.asarray(predictions, dtype=np.float64).ravel()
    truths = np.asarray(truths, dtype=np.float64).ravel()
    if predictions.size != truths.size:
        raise ValueError("predictions and truths differ in length")
    if predictions.size == 0:
        raise ValueError("empty inputs")
    diff = predictions - truths
    return float(np.sqrt(np.mean(diff * diff)))


def evaluate(scores, labels, task):
    """Metric reports for one prediction set: AUC+AUPRC or RMSE by task kind."""
    if task == "classification":
        labels = np.asarray(labels).ravel()
        return [
            EvalReport("auc", auc(scores, labels), labels.size, int(labels.sum())),
            EvalReport("auprc", auprc(scores, labels), labels.size, int(labels.sum())),
        ]
    if task == "regression":
        truths = np.asarray(labels, dtype=np.float64).ravel()
        return [EvalReport("rmse", rmse(scores, truths), truths.size)]
    raise ValueError("unknown task %r" % task)
