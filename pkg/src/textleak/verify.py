"""Fast invariant and oracle checks, runnable from an installed package."""

from __future__ import annotations

import itertools
import math
from dataclasses import replace

import numpy as np
import torch

from .continuous import ContOptConfig, cont_opt
from .discrete import DiscOptConfig, disc_opt
from .fedsim import client_step, mean_gradient
from .layout import Layout
from .metrics import rouge
from .model import (DTYPE, DropoutMaskSet, EncoderClassifier, GradientView, ModelConfig,
                    TokenBatch, one_hot)
from .recovery import DistanceSpec, RecoveryObjective, grad_distance


def tiny_config(**kw) -> ModelConfig:
    """About 800 parameters: small enough for finite-difference checks."""
    base = dict(vocab_size=16, num_layers=1, num_heads=2, hidden_dim=8, ffn_dim=16,
                max_seq_len=8, num_classes=2, dropout_rate=0.1)
    base.update(kw)
    return ModelConfig(**base)


def random_batch(rng, cfg: ModelConfig, b: int, n: int, fixed_length: bool = True) -> TokenBatch:
    low = 4
    rows = []
    for _ in range(b):
        k = n - 2 if fixed_length else int(rng.integers(1, n - 1))
        rows.append(rng.integers(low, cfg.vocab_size, size=k).tolist())
    return TokenBatch.from_rows(rows, rng.integers(0, cfg.num_classes, size=b), cfg.special, n)


def view(names, *arrays) -> GradientView:
    return GradientView(list(names), [torch.tensor(a, dtype=DTYPE) for a in arrays],
                        [False] * len(names))


def check_exactness():
    g = view(["w"], [3.0, 4.0])
    zero = view(["w"], [0.0, 0.0])
    hand = float(grad_distance(g, zero, DistanceSpec("l2_plus_l1", 0.01)))
    same = float(grad_distance(g, g, DistanceSpec()))
    cos = float(grad_distance(view(["w"], [6.0, 8.0]), g, DistanceSpec("cosine")))
    rep = rouge([[2, 5, 6, 7, 3]], [[2, 7, 5, 6, 3]])
    ok = (abs(hand - 5.07) <= 1e-12 and same == 0.0 and abs(cos) <= 1e-12
          and abs(rep.r1 - 1) <= 1e-9 and abs(rep.r2 - 0.5) <= 1e-9
          and abs(rep.rl - 2 / 3) <= 1e-9)
    return ok, f"hand={hand!r} cos={cos:.2e} rouge=({rep.r1}, {rep.r2}, {rep.rl})"


def check_pooling(seed: int = 0, clients: int = 4, per_client: int = 2):
    cfg = tiny_config()
    model = EncoderClassifier(cfg, seed=seed)
    rng = np.random.default_rng(seed)
    pooled = random_batch(rng, cfg, clients * per_client, 6, fixed_length=False)
    masks = DropoutMaskSet.bernoulli(cfg, clients * per_client, 6,
                                     torch.Generator().manual_seed(seed))
    g_pool, _ = client_step(pooled, model, masks=masks)
    parts = []
    for i, part in enumerate(pooled.split(clients)):
        sl = slice(i * per_client, (i + 1) * per_client)
        sub = DropoutMaskSet({k: v[sl] for k, v in masks.masks.items()}, True)
        parts.append(client_step(part, model, masks=sub)[0])
    avg = mean_gradient(parts).flat()
    ref = g_pool.flat()
    err = float(torch.linalg.vector_norm(avg - ref) / torch.linalg.vector_norm(ref))
    return err <= 1e-6, f"relative error {err:.2e}"


def finite_difference(f, x: torch.Tensor, idx, h: float = 1e-5) -> float:
    xp, xm = x.clone(), x.clone()
    xp.view(-1)[idx] += h
    xm.view(-1)[idx] -= h
    return (float(f(xp)) - float(f(xm))) / (2 * h)


def check_second_order(seed: int = 0, probes: int = 12):
    """d(recovery loss)/dE and /dmask against central differences."""
    cfg = tiny_config()
    model = EncoderClassifier(cfg, seed=seed)
    rng = np.random.default_rng(seed)
    batch = random_batch(rng, cfg, 2, 5)
    gen = torch.Generator().manual_seed(seed)
    target, _ = client_step(batch, model, masks=DropoutMaskSet.bernoulli(cfg, 2, 5, gen))
    obj = RecoveryObjective(model, target, DistanceSpec("l2_plus_l1", 0.01))
    y = one_hot(batch.labels, cfg.num_classes)
    E0 = model.embed(batch.token_ids) + 0.3 * torch.randn(2, 5, cfg.hidden_dim, generator=gen,
                                                          dtype=DTYPE)
    masks = DropoutMaskSet({k: torch.rand(v.shape, generator=gen, dtype=DTYPE) * 0.8 + 0.1
                            for k, v in DropoutMaskSet.ones(cfg, 2, 5).masks.items()})
    site = cfg.dropout_sites[0]

    E = E0.clone().requires_grad_(True)
    m = masks.clone(requires_grad=True)
    gE, gM = torch.autograd.grad(obj(E, y, m), [E, m.masks[site]])

    def loss_E(x):
        return obj.evaluate(x, y, masks)

    def loss_M(x):
        mm = masks.clone()
        mm.masks[site] = x
        return obj.evaluate(E0, y, mm)

    worst = 0.0
    for grad, fn, x in ((gE, loss_E, E0), (gM, loss_M, masks.masks[site])):
        flat = grad.reshape(-1)
        for idx in rng.choice(flat.numel(), size=probes, replace=False):
            fd = finite_difference(fn, x, int(idx))
            an = float(flat[idx])
            rel = abs(an - fd) / max(abs(fd), abs(an), 1e-6)
            worst = max(worst, rel)
    return worst <= 1e-3, f"worst relative error {worst:.2e}"


def check_round_trip(batches: int = 1000, seed: int = 0):
    cfg = ModelConfig()
    model = EncoderClassifier(cfg, seed=seed)
    rng = np.random.default_rng(seed)
    bad = 0
    for _ in range(batches):
        b, n = int(rng.integers(1, 5)), int(rng.integers(3, cfg.max_seq_len + 1))
        X = rng.integers(0, cfg.vocab_size, size=(b, n))
        bad += not np.array_equal(model.tokenize_embedding(model.embed(X)), X)
    return bad == 0, f"{batches - bad}/{batches} exact"


def check_clamp(steps: int = 1000, seed: int = 0):
    cfg = tiny_config(dropout_rate=0.2)
    model = EncoderClassifier(cfg, seed=seed)
    rng = np.random.default_rng(seed)
    batch = random_batch(rng, cfg, 1, 6)
    gen = torch.Generator().manual_seed(seed)
    g, masks = client_step(batch, model, dropout_generator=gen)
    obj = RecoveryObjective(model, g)
    layout = Layout(1, 6, cfg.special, batch.lengths)
    E = model.embed(batch.token_ids) + torch.randn(1, 6, cfg.hidden_dim, generator=gen, dtype=DTYPE)
    psi = DropoutMaskSet.bernoulli(cfg, 1, 6, gen)
    y = one_hot(batch.labels, 2)
    worst = 0.0
    done = 0
    while done < steps:
        chunk = min(100, steps - done)
        lr = float(10 ** rng.uniform(-3, 0))
        res = cont_opt(E, y, psi, obj, layout, ContOptConfig(n_perm=1, steps=chunk, lr=lr),
                       rng, learn_masks=True, permute=False)
        for m in res.masks.tensors():
            worst = max(worst, float(torch.clamp(-m, min=0).max()), float(torch.clamp(m - 1, min=0).max()))
        E, psi = res.embedding, res.masks
        done += chunk
    return worst == 0.0, f"{steps} steps, max violation {worst}"


def exhaustive_minimum(content, layout: Layout, values, loss_of_tokens, row: int = 0):
    best = math.inf
    slots = layout.slots(row)
    for assign in itertools.product(values, repeat=len(slots)):
        C = np.array(content)
        C[row, slots] = assign
        best = min(best, loss_of_tokens(layout.frame(C)))
    return best


def beam_oracle_instance(seed: int):
    """One random instance; returns ``(beam loss, exhaustive min, monotone)``."""
    rng = np.random.default_rng(seed)
    cfg = tiny_config(dropout_rate=0.0)
    model = EncoderClassifier(cfg, seed=seed)
    n = int(rng.integers(3, 6))
    target_batch = random_batch(rng, cfg, 1, n)
    g, _ = client_step(target_batch, model)
    obj = RecoveryObjective(model, g)
    y = one_hot(target_batch.labels, 2)
    layout = Layout(1, n, cfg.special, target_batch.lengths)
    toks = rng.choice(np.arange(4, cfg.vocab_size), size=2, replace=False)
    start = rng.choice(toks, size=n - 2)
    content = np.full((1, n - 2), cfg.special.pad)
    content[0] = start
    X = layout.frame(content)
    T = sorted(set(int(t) for t in start) | {cfg.special.pad})

    def loss(X):
        return obj.evaluate_tokens(X, y)

    width = len(T) ** (n - 2)
    res = disc_opt(X, loss, layout, DiscOptConfig(passes=1, beam_width=width, n_perm=1), rng)
    oracle = exhaustive_minimum(layout.content(X), layout, T, loss)
    seq = [res.start_loss] + res.pass_losses
    monotone = all(b <= a for a, b in zip(seq, seq[1:]))
    return res.loss, oracle, monotone


def check_beam_oracle(instances: int = 50):
    worst, mono = 0.0, True
    for s in range(instances):
        got, oracle, m = beam_oracle_instance(s)
        worst = max(worst, abs(got - oracle))
        mono &= m
    return worst <= 1e-9 and mono, f"max |beam - exhaustive| = {worst:.2e}, monotone={mono}"


SUITES = {
    "exactness": check_exactness,
    "pooling-equivalence": check_pooling,
    "second-order-gradient": check_second_order,
    "round-trip": check_round_trip,
    "clamp": check_clamp,
    "beam-oracle": check_beam_oracle,
}


def run_all(names=None, report=print) -> bool:
    ok_all = True
    for name, fn in SUITES.items():
        if names and name not in names:
            continue
        ok, detail = fn()
        ok_all &= bool(ok)
        report(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    return ok_all
