import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from textleak.fedsim import Defense, client_step
from textleak.model import DTYPE, DropoutMaskSet, EncoderClassifier, one_hot
from textleak.recovery import (AttackerAdaptation, DistanceSpec, ProtocolError,
                               RecoveryObjective, derive_pruning_mask, detect_noise_defense,
                               grad_distance, match_norms, recovery_loss)
from textleak.verify import check_second_order, random_batch, tiny_config, view

finite = arrays(np.float64, 6, elements=st.floats(-1e3, 1e3, allow_nan=False))


def test_hand_case():
    d = grad_distance(view(["w"], [3.0, 4.0]), view(["w"], [0.0, 0.0]))
    assert abs(float(d) - 5.07) <= 1e-12


def test_sum_over_layers():
    a = view(["w", "v"], [3.0, 4.0], [1.0])
    z = view(["w", "v"], [0.0, 0.0], [0.0])
    assert abs(float(grad_distance(a, z, DistanceSpec(l1_weight=0.0))) - 6.0) <= 1e-12


@settings(max_examples=50)
@given(finite, finite)
def test_distance_symmetric_and_nonnegative(x, y):
    a, b = view(["w"], x), view(["w"], y)
    dab, dba = float(grad_distance(a, b)), float(grad_distance(b, a))
    assert dab >= 0 and math.isclose(dab, dba, rel_tol=1e-12, abs_tol=1e-12)
    assert float(grad_distance(a, a)) == 0.0


@settings(max_examples=50)
@given(finite, st.floats(0.01, 100))
def test_cosine_scale_invariant(x, s):
    if np.linalg.norm(x) < 1e-6:  # the clamped denominator dominates below this
        return
    a = view(["w"], x)
    d = float(grad_distance(view(["w"], x * s), a, DistanceSpec("cosine")))
    assert abs(d) <= 1e-12


def test_structure_mismatch_raises():
    with pytest.raises(ProtocolError):
        grad_distance(view(["w"], [1.0]), view(["v"], [1.0]))
    with pytest.raises(ValueError):
        DistanceSpec("huber")


def _target(cfg, model, seed=0, b=2, n=5, defense=Defense()):
    batch = random_batch(np.random.default_rng(seed), cfg, b, n)
    g, masks = client_step(batch, model, defense, torch.Generator().manual_seed(seed))
    return batch, g, masks


def test_true_input_has_zero_loss(tiny, tiny_model):
    batch, g, masks = _target(tiny, tiny_model)
    loss = recovery_loss(tiny_model.embed(batch.token_ids), one_hot(batch.labels, 2), masks,
                         tiny_model, g)
    assert float(loss.detach()) <= 1e-10


def test_wrong_masks_give_positive_loss(tiny, tiny_model):
    batch, g, masks = _target(tiny, tiny_model)
    flipped = DropoutMaskSet({k: 1 - v for k, v in masks.masks.items()})
    loss = recovery_loss(tiny_model.embed(batch.token_ids), one_hot(batch.labels, 2), flipped,
                         tiny_model, g)
    assert float(loss.detach()) > 1e-3


def test_embedding_layers_not_compared(tiny, tiny_model):
    _, g, _ = _target(tiny, tiny_model)
    obj = RecoveryObjective(tiny_model, g)
    assert not any(n.startswith("embeddings.") for n in obj.target.active_names)


def test_pruning_mask_zeroes_dummy_where_target_is_zero(tiny, tiny_model):
    batch, g, masks = _target(tiny, tiny_model, defense=Defense.prune(0.9))
    obj = RecoveryObjective(tiny_model, g, adaptation=AttackerAdaptation(pruning_mask=True))
    E = tiny_model.embed(batch.token_ids) + 0.1
    d = obj.dummy_gradients(E, one_hot(batch.labels, 2), masks, create_graph=False)
    for dummy, target in zip(d.active(), obj.target.active()):
        assert torch.all(dummy[target == 0] == 0)
    assert all(torch.equal(m, (t != 0).to(DTYPE))
               for m, t in zip(derive_pruning_mask(obj.target), obj.target.active()))


def test_norm_matching():
    g = view(["w", "v"], [3.0, 4.0], [1.0, 0.0])
    target = view(["w", "v"], [0.0, 10.0], [0.0, 2.0])
    out = match_norms(g, target)
    assert torch.allclose(out.active()[0], torch.tensor([6.0, 8.0], dtype=DTYPE))
    assert torch.allclose(out.active()[1], torch.tensor([2.0, 0.0], dtype=DTYPE))
    same = match_norms(target, target)
    assert all(torch.allclose(a, b) for a, b in zip(same.active(), target.active()))


def test_noise_detection(tiny, tiny_model):
    probe = random_batch(np.random.default_rng(7), tiny, 2, 5)
    _, clean, _ = _target(tiny, tiny_model)
    assert not detect_noise_defense(clean, probe, tiny_model, 5.0)
    _, clipped, _ = _target(tiny, tiny_model, defense=Defense.noise(0.0, 1e-3))
    assert detect_noise_defense(clipped, probe, tiny_model, 0.5)
    _, noisy, _ = _target(tiny, tiny_model, defense=Defense.noise(1.0, 1.0))
    assert detect_noise_defense(noisy, probe, tiny_model, 5.0)
    assert not detect_noise_defense(noisy, probe, tiny_model, math.inf)


def test_adaptation_validation():
    with pytest.raises(ValueError):
        AttackerAdaptation(threshold=0.0)


def test_second_order_gradients():
    ok, detail = check_second_order(seed=3, probes=6)
    assert ok, detail


def test_loss_differentiable_in_labels(tiny, tiny_model):
    batch, g, masks = _target(tiny, tiny_model)
    obj = RecoveryObjective(tiny_model, g, labels_trainable=True)
    y = torch.zeros(2, 2, dtype=DTYPE, requires_grad=True)
    loss = obj(tiny_model.embed(batch.token_ids), y, masks)
    (grad,) = torch.autograd.grad(loss, [y])
    assert torch.all(torch.isfinite(grad)) and float(grad.abs().sum()) > 0


def test_evaluation_counter(tiny, tiny_model):
    batch, g, masks = _target(tiny, tiny_model)
    obj = RecoveryObjective(tiny_model, g)
    obj.evaluate_tokens(batch.token_ids, one_hot(batch.labels, 2), masks)
    obj.evaluate_tokens(batch.token_ids, one_hot(batch.labels, 2), masks)
    assert obj.evaluations == 2


def test_model_dimension_mismatch_is_protocol_error(tiny):
    other = EncoderClassifier(tiny_config(hidden_dim=4))
    _, g, _ = _target(tiny, EncoderClassifier(tiny))
    obj = RecoveryObjective(other, g)
    E = other.embed([[2, 5, 6, 3, 0], [2, 5, 6, 3, 0]])
    with pytest.raises(ProtocolError):
        obj(E, one_hot([0, 1], 2))
