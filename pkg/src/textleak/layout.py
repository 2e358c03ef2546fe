"""What the attacker knows about sequence framing.

With per-sequence lengths the CLS, SEP and PAD positions of every row are
pinned and only the content positions are free. With only the batch-max length
known, just CLS is pinned; in the discrete phase the SEP token then floats to
the end of each row's non-PAD content.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .model import SpecialTokens, TokenBatch

LENGTH_MODES = ("per_sequence", "max_only")


@dataclass
class Layout:
    batch_size: int
    seq_len: int
    special: SpecialTokens
    lengths: np.ndarray | None = None

    def __post_init__(self):
        if self.lengths is not None:
            self.lengths = np.asarray(self.lengths, dtype=np.int64)
            if self.lengths.shape != (self.batch_size,):
                raise ValueError("one length per row required")
            if np.any(self.lengths < 2) or np.any(self.lengths > self.seq_len):
                raise ValueError("lengths must lie in [2, seq_len]")

    @classmethod
    def from_batch(cls, batch: TokenBatch, special: SpecialTokens, mode: str = "per_sequence"):
        if mode not in LENGTH_MODES:
            raise ValueError(f"unknown length mode {mode!r}")
        b, n = batch.token_ids.shape
        lengths = np.array(batch.lengths) if mode == "per_sequence" else None
        return cls(b, n, special, lengths)

    @property
    def mode(self) -> str:
        return "max_only" if self.lengths is None else "per_sequence"

    @property
    def num_slots(self) -> int:
        return self.seq_len - 2

    # -- continuous phase ---------------------------------------------------

    def free_positions(self, i: int) -> np.ndarray:
        """Positions of row ``i`` that are optimized in embedding space."""
        if self.lengths is None:
            return np.arange(1, self.seq_len)
        return np.arange(1, self.lengths[i] - 1)

    def free_mask(self, d: int) -> torch.Tensor:
        mask = torch.zeros(self.batch_size, self.seq_len, d, dtype=torch.bool)
        for i in range(self.batch_size):
            mask[i, self.free_positions(i)] = True
        return mask

    def pinned_tokens(self) -> np.ndarray:
        """Token ids the pinned positions hold; free positions carry PAD."""
        sp = self.special
        X = np.full((self.batch_size, self.seq_len), sp.pad, dtype=np.int64)
        X[:, 0] = sp.cls
        if self.lengths is not None:
            for i, L in enumerate(self.lengths):
                X[i, L - 1] = sp.sep
        return X

    # -- discrete phase -----------------------------------------------------

    def slots(self, i: int) -> np.ndarray:
        """Reorderable content-slot indices of row ``i``."""
        if self.lengths is None:
            return np.arange(self.num_slots)
        return np.arange(self.lengths[i] - 2)

    def canonical(self, content: np.ndarray) -> np.ndarray:
        """Suffix-padding rule: everything after the first PAD in a row's slots is PAD."""
        C = np.array(content, dtype=np.int64)
        pad = self.special.pad
        for i in range(self.batch_size):
            s = self.slots(i)
            row = C[i, s]
            hits = np.flatnonzero(row == pad)
            if hits.size:
                row[hits[0]:] = pad
                C[i, s] = row
            C[i, len(s):] = pad
        return C

    def frame(self, content: np.ndarray) -> np.ndarray:
        """Full token rows from content slots."""
        sp = self.special
        C = self.canonical(content)
        X = np.full((self.batch_size, self.seq_len), sp.pad, dtype=np.int64)
        X[:, 0] = sp.cls
        for i in range(self.batch_size):
            if self.lengths is None:
                k = int(np.sum(C[i] != sp.pad))
                X[i, 1:1 + k] = C[i, :k]
                X[i, 1 + k] = sp.sep
            else:
                L = self.lengths[i]
                X[i, 1:L - 1] = C[i, :L - 2]
                X[i, L - 1] = sp.sep
        return X

    def content(self, token_ids: np.ndarray) -> np.ndarray:
        """Content slots from full rows; PAD tokens are moved behind the content."""
        sp = self.special
        X = np.asarray(token_ids)
        C = np.full((self.batch_size, self.num_slots), sp.pad, dtype=np.int64)
        for i in range(self.batch_size):
            if self.lengths is None:
                toks = [t for t in X[i, 1:] if t not in (sp.cls, sp.sep, sp.pad)]
                toks = toks[:self.num_slots]
            else:
                toks = [t for t in X[i, 1:self.lengths[i] - 1] if t != sp.pad]
            C[i, :len(toks)] = toks
        return C
