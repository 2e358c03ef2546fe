import json
import math

import numpy as np
import pytest
import torch

from textleak.fedsim import (Defense, FedConfig, RoundRecord, apply_gradient_noise,
                             apply_gradient_pruning, client_step, mean_gradient, run_rounds,
                             server_aggregate, view_from_payload, view_payload)
from textleak.model import DTYPE, DropoutMaskSet, EncoderClassifier, GradientView
from textleak.recovery import ProtocolError
from textleak.rng import torch_generator
from textleak.verify import check_pooling, random_batch, tiny_config, view


def test_client_step_is_deterministic(tiny_model, tiny_batch):
    a, ma = client_step(tiny_batch, tiny_model, dropout_generator=torch_generator(1, "d"))
    b, mb = client_step(tiny_batch, tiny_model, dropout_generator=torch_generator(1, "d"))
    assert torch.equal(a.flat(), b.flat())
    assert all(torch.equal(x, y) for x, y in zip(ma.tensors(), mb.tensors()))


def test_no_dropout_when_rate_zero(tiny_batch):
    model = EncoderClassifier(tiny_config(dropout_rate=0.0))
    _, masks = client_step(tiny_batch, model)
    assert masks is None


@pytest.mark.parametrize("ratio", [0.75, 0.95, 0.99])
def test_pruning_zeroes_exactly_floor_rn(ratio):
    g = view(["a", "b"], np.arange(1.0, 41.0), -np.arange(41.0, 101.0))
    pruned = apply_gradient_pruning(g, ratio)
    k = math.floor(ratio * 100)
    flat = pruned.flat()
    assert int((flat == 0).sum()) == k
    # survivors are the largest magnitudes
    assert torch.equal(flat.abs().nonzero().reshape(-1), torch.arange(k, 100))


def test_pruning_ties_go_to_earlier_layer():
    g = view(["a", "b"], [1.0, 1.0], [1.0, 1.0])
    pruned = apply_gradient_pruning(g, 0.5)
    assert pruned.active()[0].tolist() == [0.0, 0.0]
    assert pruned.active()[1].tolist() == [1.0, 1.0]


def test_noise_std_matches():
    g = view(["w"], np.zeros(200_000))
    noisy = apply_gradient_noise(g, 1e-3, clip=1.0, generator=torch.Generator().manual_seed(0))
    std = float(noisy.flat().std())
    assert abs(std - 1e-3) < 1e-5


def test_clipping_halves_a_layer_of_twice_the_clip_norm():
    g = view(["w", "v"], [6.0, 8.0], [0.3, 0.4])
    out = apply_gradient_noise(g, 0.0, clip=5.0)
    assert out.active()[0].tolist() == [3.0, 4.0]
    assert out.active()[1].tolist() == [0.3, 0.4]


def test_aggregate_single_client_zero_lr():
    g = view(["w"], [1.0, 2.0])
    params = {"w": np.array([5.0, 6.0])}
    out = server_aggregate([g], 1e-300, params)
    assert np.allclose(out["w"], params["w"])
    out = server_aggregate([g], 0.5, params)
    assert out["w"].tolist() == [4.5, 5.0]


def test_opposite_updates_cancel():
    g = view(["w"], [1.0, -2.0])
    neg = view(["w"], [-1.0, 2.0])
    params = {"w": np.array([0.25, 0.5])}
    assert server_aggregate([g, neg], 1.0, params)["w"].tolist() == [0.25, 0.5]


def test_mismatched_structures_raise():
    with pytest.raises(ProtocolError):
        server_aggregate([view(["w"], [1.0]), view(["v"], [1.0])], 1.0, {"w": np.zeros(1)})
    with pytest.raises(ProtocolError):
        server_aggregate([], 1.0, {})


def test_pooling_equivalence():
    ok, detail = check_pooling(seed=1)
    assert ok, detail


def test_round_log_round_trips(tiny, tiny_model, tiny_batch):
    g, masks = client_step(tiny_batch, tiny_model)
    rec = RoundRecord(0, [g], [masks], tiny_model.state_arrays())
    payload = json.loads(rec.to_json())
    back = view_from_payload(payload["clients"][0])
    assert back.names == g.names
    assert torch.equal(back.flat(), g.flat())


def test_frozen_layers_survive_payload():
    g = GradientView(["e", "w"], [None, torch.ones(2, dtype=DTYPE)], [True, False])
    back = view_from_payload(json.loads(json.dumps(view_payload(g))))
    assert back.frozen == [True, False] and back.grads[0] is None


def test_run_rounds_updates_model(tiny, tiny_batch):
    model = EncoderClassifier(tiny)
    before = model.state_arrays()
    records = run_rounds(model, lambda t: [tiny_batch], FedConfig(rounds=2, server_lr=0.1))
    assert len(records) == 2
    after = model.state_arrays()
    assert not np.allclose(before["head.weight"], after["head.weight"])
    # the first record holds the parameters the attacker sees in round 0
    assert np.array_equal(records[0].attacker_view()[0]["head.weight"], before["head.weight"])


def test_defense_validation():
    with pytest.raises(ValueError):
        Defense("shuffle")
    with pytest.raises(ValueError):
        Defense.prune(1.0)
    with pytest.raises(ValueError):
        FedConfig(num_clients=0)


def test_shared_masks_are_reused(tiny, tiny_model, tiny_batch):
    masks = DropoutMaskSet.bernoulli(tiny, 2, 5, torch.Generator().manual_seed(9))
    _, used = client_step(tiny_batch, tiny_model, masks=masks)
    assert used is masks


def test_noise_defense_changes_gradient(tiny, tiny_model):
    batch = random_batch(np.random.default_rng(2), tiny, 1, 5)
    clean, _ = client_step(batch, tiny_model)
    noisy, _ = client_step(batch, tiny_model, Defense.noise(0.01, 1.0),
                           noise_generator=torch.Generator().manual_seed(0))
    assert not torch.allclose(clean.flat(), noisy.flat())
    assert torch.equal(mean_gradient([clean, clean]).flat(), clean.flat())
