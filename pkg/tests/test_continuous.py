import itertools

import numpy as np
import pytest
import torch

from textleak.continuous import (ContOptConfig, cont_opt, init_dummy, permute_select,
                                 shuffle_embedding)
from textleak.fedsim import client_step
from textleak.layout import Layout
from textleak.model import DTYPE, DropoutMaskSet, EncoderClassifier, TokenBatch, one_hot
from textleak.recovery import RecoveryObjective
from textleak.verify import tiny_config


@pytest.fixture
def setup(tiny, tiny_model):
    batch = TokenBatch.from_rows([[5, 6, 7]], [1], tiny.special, 5)
    g, masks = client_step(batch, tiny_model, masks=DropoutMaskSet.ones(tiny, 1, 5))
    layout = Layout(1, 5, tiny.special, batch.lengths)
    return batch, RecoveryObjective(tiny_model, g), layout, masks


def test_single_candidate_init_is_deterministic(setup):
    batch, obj, layout, masks = setup
    a = init_dummy(obj, layout, 1, torch.Generator().manual_seed(3), masks, batch.labels)
    b = init_dummy(obj, layout, 1, torch.Generator().manual_seed(3), masks, batch.labels)
    assert torch.equal(a[0], b[0]) and a[2] == b[2]


def test_init_pins_special_positions(setup, tiny_model):
    batch, obj, layout, masks = setup
    E, y, _ = init_dummy(obj, layout, 4, torch.Generator().manual_seed(0), masks, batch.labels)
    truth = tiny_model.embed(batch.token_ids)
    assert torch.equal(E[0, 0], truth[0, 0]) and torch.equal(E[0, 4], truth[0, 4])
    assert torch.equal(y, one_hot(batch.labels, 2))


def test_true_embedding_wins_initialization(setup, tiny_model):
    batch, obj, layout, masks = setup
    truth = tiny_model.embed(batch.token_ids)
    y = one_hot(batch.labels, 2)
    E, _, loss = init_dummy(obj, layout, 20, torch.Generator().manual_seed(0), masks,
                            batch.labels, extra=[(truth, y)])
    assert torch.equal(E, truth) and loss <= 1e-10


def test_unknown_labels_are_sampled(setup):
    _, obj, layout, masks = setup
    _, y, _ = init_dummy(obj, layout, 2, torch.Generator().manual_seed(0), masks, None)
    assert y.shape == (1, 2) and not torch.all((y == 0) | (y == 1))


def test_single_permutation_is_identity():
    x = np.array([3, 1, 2])
    best, loss = permute_select(x, 1, lambda c: float(c[0]), lambda c, r: r.permutation(c),
                                np.random.default_rng(0))
    assert best is x and loss == 3.0


def test_permutation_search_finds_best_of_all_orderings():
    # 400 draws over 6 orderings see all of them with overwhelming probability
    x = np.array([5, 7, 9])
    weights = np.array([1.0, 10.0, 100.0])

    def loss(c):
        return float(np.dot(c, weights))

    best, value = permute_select(x, 400, loss, lambda c, r: r.permutation(c),
                                 np.random.default_rng(0))
    brute = min(loss(np.array(p)) for p in itertools.permutations(x))
    assert value == brute and best.tolist() == [9, 7, 5]


def test_top_k_is_sorted_and_distinct():
    x = np.array([1, 2, 3])
    out = permute_select(x, 200, lambda c: float(c[0]), lambda c, r: r.permutation(c),
                         np.random.default_rng(1), top_k=4, key=lambda c: c.tobytes())
    losses = [l for _, l in out]
    assert losses == sorted(losses)
    assert len({c.tobytes() for c, _ in out}) == len(out)


def test_shuffle_moves_only_free_positions(tiny, tiny_model):
    layout = Layout(2, 6, tiny.special, np.array([6, 4]))
    E = tiny_model.embed([[2, 5, 6, 7, 8, 3], [2, 9, 10, 3, 0, 0]])
    pos = tiny_model.positional(6)
    out = shuffle_embedding(E, layout, pos, np.random.default_rng(0))
    assert torch.equal(out[:, 0], E[:, 0])
    assert torch.equal(out[1, 3:], E[1, 3:])
    got = sorted(tiny_model.tokenize_embedding(out)[0, 1:5].tolist())
    assert got == [5, 6, 7, 8]


def test_masks_stay_in_unit_interval():
    cfg = tiny_config(dropout_rate=0.3)
    model = EncoderClassifier(cfg, seed=2)
    batch = TokenBatch.from_rows([[5, 6, 7, 8]], [0], cfg.special)
    g, masks = client_step(batch, model, dropout_generator=torch.Generator().manual_seed(1))
    obj = RecoveryObjective(model, g)
    layout = Layout(1, 6, cfg.special, batch.lengths)
    E = model.embed(batch.token_ids) + 0.5
    start = DropoutMaskSet({k: torch.full_like(v, 0.5) for k, v in masks.masks.items()})
    res = cont_opt(E, one_hot(batch.labels, 2), start, obj, layout,
                   ContOptConfig(steps=60, lr=0.5), np.random.default_rng(0), learn_masks=True,
                   permute=False)
    for m in res.masks.tensors():
        assert float(m.min()) >= 0.0 and float(m.max()) <= 1.0
    assert not torch.equal(res.masks.tensors()[0], start.tensors()[0])


def test_true_embedding_is_a_fixed_point(setup, tiny_model):
    batch, obj, layout, masks = setup
    truth = tiny_model.embed(batch.token_ids)
    res = cont_opt(truth, one_hot(batch.labels, 2), masks, obj, layout,
                   ContOptConfig(n_perm=1, steps=20, lr=0.01), np.random.default_rng(0),
                   learn_masks=True)
    assert float(torch.linalg.vector_norm(res.embedding - truth)) <= 1e-6


def test_cont_opt_is_deterministic_and_decreases(setup, tiny_model):
    batch, obj, layout, masks = setup
    E = tiny_model.embed(batch.token_ids) + 0.3 * torch.randn(1, 5, 8, dtype=DTYPE)
    cfg = ContOptConfig(n_perm=8, steps=30, lr=0.02, decay_every=10, decay=0.5)
    runs = [cont_opt(E, one_hot(batch.labels, 2), masks, obj, layout, cfg,
                     np.random.default_rng(4)) for _ in range(2)]
    assert torch.equal(runs[0].embedding, runs[1].embedding)
    trace = runs[0].trace
    assert trace[-1][1] < trace[0][1]
    assert [lr for _, _, lr in trace[::10]] == pytest.approx([0.02, 0.01, 0.005])


def test_zero_steps_returns_selected_start(setup, tiny_model):
    batch, obj, layout, masks = setup
    E = tiny_model.embed(batch.token_ids)
    res = cont_opt(E, one_hot(batch.labels, 2), masks, obj, layout,
                   ContOptConfig(n_perm=1, steps=0), np.random.default_rng(0))
    assert torch.equal(res.embedding, E) and res.trace == []
    assert res.final_loss == res.start_loss


def test_config_validation():
    with pytest.raises(ValueError):
        ContOptConfig(n_init=0)
    with pytest.raises(ValueError):
        ContOptConfig(decay=0.0)
    with pytest.raises(ValueError):
        ContOptConfig(grad_clip=-1.0)
