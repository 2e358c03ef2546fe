"""FedSGD rounds, client-side gradient defenses and round logging."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .model import (DTYPE, DropoutMaskSet, EncoderClassifier, GradientView, TokenBatch)
from .recovery import ProtocolError


@dataclass(frozen=True)
class Defense:
    kind: str = "none"
    noise_std: float = 0.0
    clip: float = 1.0
    prune_ratio: float = 0.0

    def __post_init__(self):
        if self.kind not in ("none", "noise", "prune"):
            raise ValueError(f"unknown defense {self.kind!r}")
        if self.noise_std < 0 or not self.clip > 0 or not 0 <= self.prune_ratio < 1:
            raise ValueError("need noise_std >= 0, clip > 0 and prune_ratio in [0, 1)")

    @classmethod
    def noise(cls, std, clip):
        return cls("noise", noise_std=std, clip=clip)

    @classmethod
    def prune(cls, ratio):
        return cls("prune", prune_ratio=ratio)


@dataclass(frozen=True)
class FedConfig:
    num_clients: int = 1
    server_lr: float = 0.01
    rounds: int = 1
    defense: Defense = field(default_factory=Defense)

    def __post_init__(self):
        if self.num_clients < 1 or self.rounds < 1 or not self.server_lr > 0:
            raise ValueError("num_clients, rounds and server_lr must be positive")


def apply_gradient_noise(g: GradientView, std: float, clip: float,
                         generator: torch.Generator | None = None) -> GradientView:
    """Clip each layer to norm ``clip``, then add N(0, std^2) to every entry."""
    out = []
    for t in g.active():
        n = float(torch.linalg.vector_norm(t))
        t = t * (clip / n) if n > clip else t.clone()
        if std > 0:
            t = t + torch.randn(t.shape, generator=generator, dtype=t.dtype) * std
        out.append(t)
    return g.replace(out)


def apply_gradient_pruning(g: GradientView, ratio: float) -> GradientView:
    """Zero the floor(ratio * N) smallest-magnitude entries across all active layers.

    Ties go to the earlier layer, then the earlier flat index.
    """
    flat = g.flat().detach()
    k = math.floor(ratio * flat.numel())
    if k == 0:
        return g.replace(t.clone() for t in g.active())
    order = torch.sort(flat.abs(), stable=True).indices
    flat = flat.clone()
    flat[order[:k]] = 0
    out, start = [], 0
    for t in g.active():
        out.append(flat[start:start + t.numel()].view_as(t))
        start += t.numel()
    return g.replace(out)


def apply_defense(g: GradientView, defense: Defense, generator=None) -> GradientView:
    if defense.kind == "noise":
        return apply_gradient_noise(g, defense.noise_std, defense.clip, generator)
    if defense.kind == "prune":
        return apply_gradient_pruning(g, defense.prune_ratio)
    return g


def client_step(batch: TokenBatch, model: EncoderClassifier, defense: Defense = Defense(),
                dropout_generator: torch.Generator | None = None,
                noise_generator: torch.Generator | None = None,
                masks: DropoutMaskSet | None = None):
    """Shared gradient of one client and its hidden dropout realization.

    A fresh Bernoulli(keep = 1 - p) realization is drawn unless ``masks`` is
    given; with p = 0 no dropout is applied. Returns ``(view, masks)``.
    """
    b, n = batch.token_ids.shape
    if masks is None and model.config.dropout_rate > 0:
        gen = dropout_generator or torch.Generator().manual_seed(0)
        masks = DropoutMaskSet.bernoulli(model.config, b, n, gen)
    g = model.client_gradients(batch, masks)
    return apply_defense(g, defense, noise_generator), masks


def server_aggregate(grads: Sequence[GradientView], server_lr: float,
                     params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """FedSGD update: theta - lr / m * sum of client gradients (active layers only)."""
    if not grads:
        raise ProtocolError("no client gradients")
    ref = grads[0]
    for g in grads[1:]:
        if not g.same_structure(ref):
            raise ProtocolError("client gradient views differ in structure")
    m = len(grads)
    new = {k: np.array(v, copy=True) for k, v in params.items()}
    for idx, name in enumerate(ref.active_names):
        total = sum(g.active()[idx].detach().numpy() for g in grads)
        new[name] = new[name] - server_lr / m * total
    return new


def mean_gradient(grads: Sequence[GradientView]) -> GradientView:
    m = len(grads)
    layers = zip(*(g.active() for g in grads))
    return grads[0].replace(sum(ts) / m for ts in layers)


@dataclass
class RoundRecord:
    round: int
    client_grads: list[GradientView]
    client_masks: list[DropoutMaskSet | None]
    params: dict[str, np.ndarray]

    def attacker_view(self, client: int = 0):
        """What the adversary observes: parameters and one client's update."""
        return self.params, self.client_grads[client]

    def to_json(self) -> str:
        return json.dumps({
            "schema_version": 1,
            "round": self.round,
            "params": [tensor_payload(k, v) for k, v in self.params.items()],
            "clients": [view_payload(g) for g in self.client_grads],
        })


def tensor_payload(name, value) -> dict:
    a = np.asarray(value.detach() if isinstance(value, torch.Tensor) else value, dtype=np.float64)
    return {"name": name, "shape": list(a.shape), "values": a.reshape(-1).tolist()}


def view_payload(g: GradientView) -> dict:
    return {"layers": [dict(tensor_payload(n, t) if t is not None else
                            {"name": n, "shape": None, "values": None}, frozen=fr)
                       for n, t, fr in zip(g.names, g.grads, g.frozen)]}


def view_from_payload(d: dict) -> GradientView:
    names, grads, frozen = [], [], []
    for layer in d["layers"]:
        names.append(layer["name"])
        frozen.append(bool(layer["frozen"]))
        grads.append(None if layer["frozen"] else
                     torch.tensor(layer["values"], dtype=DTYPE).reshape(layer["shape"]))
    return GradientView(names, grads, frozen)


def run_rounds(model: EncoderClassifier, client_batches, cfg: FedConfig, seed: int = 0,
               log=None) -> list[RoundRecord]:
    """Sequential FedSGD rounds; ``client_batches(t)`` yields the m batches of round t.

    The model is updated in place. ``log`` (a text stream) receives one JSON
    line per round.
    """
    from .rng import torch_generator

    records = []
    for t in range(cfg.rounds):
        params = model.state_arrays()
        batches = client_batches(t)
        if len(batches) != cfg.num_clients:
            raise ProtocolError("wrong number of client batches")
        grads, masks = [], []
        for i, batch in enumerate(batches):
            g, psi = client_step(batch, model, cfg.defense,
                                 torch_generator(seed, f"dropout/{t}/{i}"),
                                 torch_generator(seed, f"noise/{t}/{i}"))
            grads.append(g)
            masks.append(psi)
        model.load_arrays(server_aggregate(grads, cfg.server_lr, params))
        rec = RoundRecord(t, grads, masks, params)
        if log is not None:
            log.write(rec.to_json() + "\n")
        records.append(rec)
    return records
