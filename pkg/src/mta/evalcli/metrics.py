"""Evaluation metrics: accuracy, macro-F1, MAE, RMSE, ROUGE-1 and ROUGE-L (F-measure)."""

from __future__ import annotations

import math
from collections import Counter
from typing import Sequence

from ..errors import ParameterError


def _check_pair(preds, golds):
    if len(preds) != len(golds):
        raise ParameterError(f"{len(preds)} predictions vs {len(golds)} references")
    if not preds:
        raise ParameterError("metrics need at least one prediction")


def accuracy(preds: Sequence, golds: Sequence) -> float:
    _check_pair(preds, golds)
    return sum(p == g for p, g in zip(preds, golds)) / len(golds)


def macro_f1(preds: Sequence[int], golds: Sequence[int], num_classes: int) -> float:
    """Unweighted mean of per-class F1; classes absent from both lists are skipped."""
    _check_pair(preds, golds)
    scores = []
    for c in range(num_classes):
        tp = sum(p == c and g == c for p, g in zip(preds, golds))
        fp = sum(p == c and g != c for p, g in zip(preds, golds))
        fn = sum(p != c and g == c for p, g in zip(preds, golds))
        if tp + fp + fn == 0:
            continue
        scores.append(2 * tp / (2 * tp + fp + fn))
    return sum(scores) / len(scores) if scores else 0.0


def mae(preds: Sequence[float], golds: Sequence[float]) -> float:
    _check_pair(preds, golds)
    return sum(abs(p - g) for p, g in zip(preds, golds)) / len(golds)


def rmse(preds: Sequence[float], golds: Sequence[float]) -> float:
    _check_pair(preds, golds)
    return math.sqrt(sum((p - g) ** 2 for p, g in zip(preds, golds)) / len(golds))


def tokenize(text: str) -> list[str]:
    return text.lower().split()


def _f_measure(overlap: int, n_cand: int, n_ref: int) -> float:
    if overlap == 0:
        return 0.0
    p, r = overlap / n_cand, overlap / n_ref
    return 2 * p * r / (p + r)


def rouge1(candidate: Sequence[str], reference: Sequence[str]) -> float:
    if not reference:
        raise ParameterError("ROUGE needs a non-empty reference")
    if not candidate:
        return 0.0
    overlap = sum((Counter(candidate) & Counter(reference)).values())
    return _f_measure(overlap, len(candidate), len(reference))


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rougeL(candidate: Sequence[str], reference: Sequence[str]) -> float:
    if not reference:
        raise ParameterError("ROUGE needs a non-empty reference")
    if not candidate:
        return 0.0
    return _f_measure(lcs_length(candidate, reference), len(candidate), len(reference))
