"""Micro-F1 over non-NA classes with NA as the negative class."""

from __future__ import annotations

import numpy as np

NA = 0


def micro_f1(pred, gold) -> float:
    """F1 where NA confusions hurt both precision and recall.

    TP: predicted == gold != NA.  FP: predicted != NA and predicted != gold.
    FN: gold != NA and predicted != gold.  Undefined ratios count as 0.
    """
    pred = np.asarray(pred)
    gold = np.asarray(gold)
    tp = int(np.sum((pred == gold) & (gold != NA)))
    fp = int(np.sum((pred != NA) & (pred != gold)))
    fn = int(np.sum((gold != NA) & (pred != gold)))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)
