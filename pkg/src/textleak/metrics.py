"""ROUGE-1/2/L over token ids, and MCC."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


@dataclass
class RougeReport:
    r1: float
    r2: float
    rl: float
    assignments: list[tuple[int, int]] = field(default_factory=list)
    empty_references: list[int] = field(default_factory=list)

    def as_dict(self):
        return {"r1": self.r1, "r2": self.r2, "rl": self.rl}


def _f(overlap, n_ref, n_hyp):
    if overlap == 0 or n_ref == 0 or n_hyp == 0:
        return 0.0
    p, r = overlap / n_hyp, overlap / n_ref
    return 2 * p * r / (p + r)


def _ngrams(seq, n):
    return Counter(tuple(seq[i:i + n]) for i in range(len(seq) - n + 1))


def rouge_n(ref: Sequence[int], hyp: Sequence[int], n: int) -> float:
    a, b = _ngrams(ref, n), _ngrams(hyp, n)
    return _f(sum((a & b).values()), sum(a.values()), sum(b.values()))


def lcs_length(a: Sequence[int], b: Sequence[int]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(ref, hyp) -> float:
    return _f(lcs_length(ref, hyp), len(ref), len(hyp))


def strip(row, special_ids) -> list[int]:
    drop = set(int(s) for s in special_ids)
    return [int(t) for t in row if int(t) not in drop]


def rouge(reference, recovered, special_ids=(0, 2, 3)) -> RougeReport:
    """Batch ROUGE F-scores with per-reference max-matching.

    Every reference row is scored against every recovered row and keeps its
    best score per metric; scores are averaged over reference rows. A reference
    row that is empty after removing special tokens contributes 0.
    ``reference`` and ``recovered`` are ``TokenBatch`` objects or id matrices.
    """
    ref_rows = [strip(r, special_ids) for r in getattr(reference, "token_ids", reference)]
    hyp_rows = [strip(r, special_ids) for r in getattr(recovered, "token_ids", recovered)]
    totals = np.zeros(3)
    assignments, empty = [], []
    for i, ref in enumerate(ref_rows):
        if not ref:
            empty.append(i)
            assignments.append((i, -1))
            continue
        scores = np.array([[rouge_n(ref, h, 1), rouge_n(ref, h, 2), rouge_l(ref, h)]
                           for h in hyp_rows]) if hyp_rows else np.zeros((1, 3))
        totals += scores.max(axis=0)
        assignments.append((i, int(np.argmax(scores.sum(axis=1)))))
    m = max(len(ref_rows), 1)
    r1, r2, rl = (totals / m).tolist()
    return RougeReport(r1, r2, rl, assignments, empty)


def mcc(predictions, labels) -> float:
    """Matthews correlation of binary predictions; 0 when the denominator vanishes."""
    p = np.asarray(predictions).astype(int).ravel()
    y = np.asarray(labels).astype(int).ravel()
    if p.shape != y.shape:
        raise ValueError("predictions and labels differ in length")
    tp = int(np.sum((p == 1) & (y == 1)))
    tn = int(np.sum((p == 0) & (y == 0)))
    fp = int(np.sum((p == 1) & (y == 0)))
    fn = int(np.sum((p == 0) & (y == 1)))
    denom = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    if denom == 0:
        return 0.0
    return (tp * tn - fp * fn) / math.sqrt(denom)
