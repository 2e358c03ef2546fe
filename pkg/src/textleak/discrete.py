"""Discrete phase: beam-search reordering of recovered tokens.

Beams are content-slot matrices (see :class:`~textleak.layout.Layout`); the
layout frames them into full token rows for evaluation, so a PAD chosen at a
slot ends the row.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .continuous import permute_select
from .layout import Layout


@dataclass(frozen=True)
class DiscOptConfig:
    passes: int = 5
    beam_width: int = 4
    n_perm: int = 2000

    def __post_init__(self):
        if self.passes < 0 or self.beam_width < 1 or self.n_perm < 1:
            raise ValueError("beam_width and n_perm must be >= 1, passes >= 0")


@dataclass
class BeamSet:
    beams: list[tuple[np.ndarray, float]]
    token_sets: list[Counter] = field(default_factory=list)

    @property
    def best(self):
        return self.beams[0]


class CachedEvaluator:
    """Memoized loss of content matrices (framed through the layout)."""

    def __init__(self, loss_of_tokens: Callable[[np.ndarray], float], layout: Layout):
        self.loss_of_tokens = loss_of_tokens
        self.layout = layout
        self.cache: dict[bytes, float] = {}

    def __call__(self, content: np.ndarray) -> float:
        X = self.layout.frame(content)
        k = X.tobytes()
        if k not in self.cache:
            self.cache[k] = self.loss_of_tokens(X)
        return self.cache[k]


def extract_token_sets(beams: BeamSet | list, layout: Layout) -> list[Counter]:
    """Per-row multiset of tokens in the incumbent beam, CLS/SEP dropped, PAD added."""
    first = beams.beams[0][0] if isinstance(beams, BeamSet) else beams[0][0]
    sp = layout.special
    X = layout.frame(first)
    sets = []
    for i in range(layout.batch_size):
        T = Counter(int(t) for t in X[i] if t not in (sp.cls, sp.sep, sp.pad))
        T[sp.pad] += 1
        sets.append(T)
    return sets


def beam_step(beams: list[tuple[np.ndarray, float]], j: int, tokens, evaluate: Callable,
              layout: Layout, width: int) -> list[tuple[np.ndarray, float]]:
    """Substitute every token of ``tokens`` at each slot of row ``j``, left to right.

    After each slot the ``width`` lowest-loss distinct candidates survive; the
    incumbents are candidates too, so the best loss never increases. Fewer than
    ``width`` distinct candidates are padded with copies of the best one.
    """
    values = sorted(set(int(t) for t in tokens))
    for k in layout.slots(j):
        cands, seen = [], set()

        def push(C, loss=None):
            C = layout.canonical(C)
            key = C.tobytes()
            if key in seen:
                return
            seen.add(key)
            cands.append((C, evaluate(C) if loss is None else loss))

        for C, loss in beams:
            push(C, loss)
            for t in values:
                if C[j, k] == t:
                    continue
                new = C.copy()
                new[j, k] = t
                push(new)
        order = sorted(range(len(cands)), key=lambda i: (cands[i][1], i))
        beams = [cands[i] for i in order[:width]]
        while len(beams) < width:
            beams.append(beams[0])
    return beams


def shuffle_content(C: np.ndarray, layout: Layout, rng: np.random.Generator) -> np.ndarray:
    """Permute each row's non-PAD content within its slots."""
    out = C.copy()
    pad = layout.special.pad
    for i in range(layout.batch_size):
        s = layout.slots(i)
        k = int(np.sum(out[i, s] != pad))
        out[i, s[:k]] = out[i, s[:k]][rng.permutation(k)]
    return out


@dataclass
class DiscResult:
    token_ids: np.ndarray
    loss: float
    start_loss: float
    pass_losses: list[float]
    beams: list[tuple[np.ndarray, float]]


def disc_opt(token_ids: np.ndarray, loss_of_tokens: Callable[[np.ndarray], float],
             layout: Layout, cfg: DiscOptConfig, rng: np.random.Generator) -> DiscResult:
    """Beam search from the best permutations of the tokenized continuous output."""
    evaluate = CachedEvaluator(loss_of_tokens, layout)
    C0 = layout.canonical(layout.content(token_ids))
    init = permute_select(C0, cfg.n_perm, evaluate, lambda c, r: shuffle_content(c, layout, r),
                          rng, top_k=cfg.beam_width, key=lambda c: c.tobytes())
    beams = list(init)
    while len(beams) < cfg.beam_width:
        beams.append(beams[0])
    start = evaluate(C0)
    pass_losses = []
    for _ in range(cfg.passes):
        sets = extract_token_sets(beams, layout)
        for j in range(layout.batch_size):
            beams = beam_step(beams, j, sets[j], evaluate, layout, cfg.beam_width)
        pass_losses.append(beams[0][1])
    best, loss = beams[0]
    return DiscResult(layout.frame(best), loss, start, pass_losses, beams)
