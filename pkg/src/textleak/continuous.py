"""Continuous phase: candidate initialization, permutation restarts and joint descent."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from .layout import Layout
from .model import DTYPE, DropoutMaskSet, NumericalError, one_hot
from .recovery import RecoveryObjective


@dataclass(frozen=True)
class ContOptConfig:
    n_init: int = 2000
    n_perm: int = 2000
    steps: int = 2000
    lr: float = 0.01
    decay: float = 0.89
    decay_every: int = 50
    grad_clip: float | None = None
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.n_init < 1 or self.n_perm < 1 or self.steps < 0 or self.decay_every < 1:
            raise ValueError("candidate counts and decay interval must be positive")
        if not self.lr > 0 or not 0 < self.decay <= 1:
            raise ValueError("lr must be positive and decay in (0, 1]")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ValueError("grad_clip must be positive")


@dataclass
class ContResult:
    embedding: torch.Tensor
    soft_labels: torch.Tensor
    masks: DropoutMaskSet | None
    trace: list[tuple[int, float, float]] = field(default_factory=list)
    start_loss: float = float("nan")

    @property
    def final_loss(self) -> float:
        return self.trace[-1][1] if self.trace else self.start_loss


def compose(E_free: torch.Tensor, pinned: torch.Tensor, free: torch.Tensor) -> torch.Tensor:
    return torch.where(free, E_free, pinned)


def init_dummy(objective: RecoveryObjective, layout: Layout, n_init: int,
               generator: torch.Generator, masks: DropoutMaskSet | None = None,
               labels=None, extra: Sequence[tuple[torch.Tensor, torch.Tensor]] = ()):
    """Best of ``n_init`` Gaussian embedding candidates (plus ``extra`` ones).

    The token component is drawn from N(0, s^2) with ``s`` the empirical std of
    the token table; pinned positions hold the true special-token embeddings.
    Unknown labels get Gaussian soft labels drawn alongside each candidate.
    Returns ``(E, soft_labels, loss)``.
    """
    if n_init < 1:
        raise ValueError("n_init must be >= 1")
    model = objective.model
    cfg = model.config
    b, n, d = layout.batch_size, layout.seq_len, cfg.hidden_dim
    std = float(model.token_table.detach().std())
    pos = model.positional(n).detach()
    pinned = model.embed(layout.pinned_tokens())
    free = layout.free_mask(d)
    known = None if labels is None else one_hot(labels, cfg.num_classes)

    best = None
    candidates = []
    for _ in range(n_init):
        E = compose(torch.randn(b, n, d, generator=generator, dtype=DTYPE) * std + pos, pinned, free)
        y = known if known is not None else torch.randn(b, cfg.num_classes, generator=generator,
                                                        dtype=DTYPE)
        candidates.append((E, y))
    candidates.extend(extra)
    for E, y in candidates:
        loss = objective.evaluate(E, y, masks)
        if best is None or loss < best[2]:
            best = (E, y, loss)
    return best


def permute_select(x, n_perm: int, evaluate: Callable, shuffle: Callable,
                   rng: np.random.Generator, top_k: int | None = None, key: Callable | None = None):
    """Evaluate the identity plus ``n_perm - 1`` shuffles of ``x``.

    Returns ``(best, loss)`` or, with ``top_k``, the ``top_k`` lowest-loss
    distinct candidates as ``[(candidate, loss), ...]`` in ascending order
    (ties keep generation order).
    """
    if n_perm < 1:
        raise ValueError("n_perm must be >= 1")
    cands = [x] + [shuffle(x, rng) for _ in range(n_perm - 1)]
    if key is not None:
        seen, unique = set(), []
        for c in cands:
            k = key(c)
            if k not in seen:
                seen.add(k)
                unique.append(c)
        cands = unique
    losses = [evaluate(c) for c in cands]
    order = sorted(range(len(cands)), key=lambda i: (losses[i], i))
    if top_k is None:
        return cands[order[0]], losses[order[0]]
    return [(cands[i], losses[i]) for i in order[:top_k]]


def shuffle_embedding(E: torch.Tensor, layout: Layout, positional: torch.Tensor,
                      rng: np.random.Generator) -> torch.Tensor:
    """Permute the token component of each row's free positions independently."""
    tok = (E - positional).clone()
    for i in range(layout.batch_size):
        f = layout.free_positions(i)
        tok[i, f] = tok[i, rng.permutation(f)]
    return tok + positional


def cont_opt(E: torch.Tensor, soft_labels: torch.Tensor, masks: DropoutMaskSet | None,
             objective: RecoveryObjective, layout: Layout, cfg: ContOptConfig,
             rng: np.random.Generator, learn_labels: bool = False,
             learn_masks: bool = False, permute: bool = True) -> ContResult:
    """Permutation restart followed by ``cfg.steps`` AdamW steps on (E, labels, masks)."""
    model = objective.model
    pos = model.positional(layout.seq_len).detach()
    pinned = model.embed(layout.pinned_tokens())
    free = layout.free_mask(model.config.hidden_dim)
    E = compose(E.detach(), pinned, free)
    y = soft_labels.detach().clone()
    masks = masks.clone() if masks is not None else None

    def loss_of(e):
        return objective.evaluate(e, y, masks)

    if permute and cfg.n_perm > 1:
        E, start = permute_select(E, cfg.n_perm, loss_of,
                                  lambda e, r: shuffle_embedding(e, layout, pos, r), rng)
    else:
        start = loss_of(E)

    E_var = E.clone().requires_grad_(True)
    params = [E_var]
    if learn_labels:
        y.requires_grad_(True)
        params.append(y)
    if learn_masks and masks is not None:
        masks = masks.clone(requires_grad=True)
        masks.binary = False
        params.extend(masks.tensors())
    opt = torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.StepLR(opt, step_size=cfg.decay_every, gamma=cfg.decay)

    trace = []
    for step in range(cfg.steps):
        opt.zero_grad(set_to_none=True)
        loss = objective(compose(E_var, pinned, free), y, masks)
        lr = opt.param_groups[0]["lr"]
        trace.append((step, float(loss.detach()), lr))
        if not torch.isfinite(loss):
            raise NumericalError("non-finite recovery loss", trace=trace)
        loss.backward()
        if cfg.grad_clip is not None:
            torch.nn.utils.clip_grad_norm_([E_var], cfg.grad_clip)
        opt.step()
        if learn_masks and masks is not None:
            masks.clamp_()
        sched.step()

    E_out = compose(E_var.detach(), pinned, free)
    masks_out = masks.clone() if masks is not None else None
    return ContResult(E_out, y.detach().clone(), masks_out, trace, start)
