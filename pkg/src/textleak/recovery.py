"""Gradient distances and the attacker's recovery objective."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .model import (DTYPE, EncoderClassifier, GradientView, DropoutMaskSet, NumericalError,
                    TokenBatch)


class ProtocolError(ValueError):
    """Gradient views with incompatible layer structure."""


@dataclass(frozen=True)
class DistanceSpec:
    kind: str = "l2_plus_l1"
    l1_weight: float = 0.01

    def __post_init__(self):
        if self.kind not in ("l2_plus_l1", "cosine"):
            raise ValueError(f"unknown distance kind {self.kind!r}")
        if self.l1_weight < 0:
            raise ValueError("l1_weight must be nonnegative")


@dataclass(frozen=True)
class AttackerAdaptation:
    norm_match: bool = False
    pruning_mask: bool = False
    threshold: float = 5.0

    def __post_init__(self):
        if not self.threshold > 0:
            raise ValueError("detection threshold must be positive")


def _layer_distance(a, b, spec):
    if spec.kind == "cosine":
        denom = torch.linalg.vector_norm(a) * torch.linalg.vector_norm(b)
        return 1.0 - (a * b).sum() / denom.clamp_min(1e-30)
    d = a - b
    out = torch.linalg.vector_norm(d)
    if spec.l1_weight:
        out = out + spec.l1_weight * d.abs().sum()
    return out


def grad_distance(g: GradientView, g_star: GradientView, spec: DistanceSpec = DistanceSpec()):
    """Sum over active layers of the per-layer distance; frozen layers are skipped."""
    if not g.same_structure(g_star):
        raise ProtocolError("gradient views differ in active-layer structure")
    total = torch.zeros((), dtype=DTYPE)
    for a, b in zip(g.active(), g_star.active()):
        total = total + _layer_distance(a, b, spec)
    return total


def derive_pruning_mask(g_star: GradientView) -> list[torch.Tensor]:
    """0 where the shared gradient is exactly zero, 1 elsewhere (per active layer)."""
    return [(g != 0).to(DTYPE) for g in g_star.active()]


def match_norms(g: GradientView, g_star: GradientView) -> GradientView:
    """Rescale every dummy layer to the corresponding target layer norm."""
    out = []
    for a, b in zip(g.active(), g_star.active()):
        na = torch.linalg.vector_norm(a)
        nb = torch.linalg.vector_norm(b).detach()
        out.append(a * (nb / na.clamp_min(1e-30)))
    return g.replace(out)


def detect_noise_defense(g_star: GradientView, probe: TokenBatch, model: EncoderClassifier,
                         threshold: float = 5.0) -> bool:
    """Flag a norm mismatch between the shared gradient and a probe batch's gradient."""
    if math.isinf(threshold):
        return False
    g_probe = model.client_gradients(probe).restrict(g_star.active_names)
    target = g_star.restrict(g_probe.active_names)
    n_probe = float(g_probe.norm())
    n_star = float(target.norm())
    return abs(n_star - n_probe) / max(n_probe, 1e-300) > threshold


class RecoveryObjective:
    """Recovery loss against one client's shared gradients.

    The dummy input enters the network after the embedding lookup, so
    embedding-table gradients are never compared; the shared view is
    restricted to the layers the dummy pass produces.
    """

    def __init__(self, model: EncoderClassifier, g_star: GradientView,
                 spec: DistanceSpec = DistanceSpec(),
                 adaptation: AttackerAdaptation = AttackerAdaptation(),
                 labels_trainable: bool = False, norm_match_active: bool | None = None):
        self.model = model
        self.spec = spec
        self.adaptation = adaptation
        self.labels_trainable = labels_trainable
        names = [n for n in g_star.active_names if not n.startswith("embeddings.")]
        self.target = g_star.restrict(names).detach()
        self.prune = derive_pruning_mask(self.target) if adaptation.pruning_mask else None
        if norm_match_active is None:
            norm_match_active = adaptation.norm_match
        self.norm_match = norm_match_active
        self.evaluations = 0

    def dummy_gradients(self, E, soft_labels, masks=None, create_graph=True) -> GradientView:
        g = self.model.param_gradients(E, soft_labels, masks, self.labels_trainable,
                                       freeze_embeddings=True, create_graph=create_graph)
        g = g.restrict(self.target.active_names)
        if self.prune is not None:
            g = g.replace(a * m for a, m in zip(g.active(), self.prune))
        if self.norm_match:
            g = match_norms(g, self.target)
        return g

    def __call__(self, E, soft_labels, masks: DropoutMaskSet | None = None,
                 create_graph: bool = True) -> torch.Tensor:
        self.evaluations += 1
        g = self.dummy_gradients(E, soft_labels, masks, create_graph)
        loss = grad_distance(g, self.target, self.spec)
        if not torch.isfinite(loss):
            bad = next((n for n, a in g.items() if not torch.all(torch.isfinite(a))), None)
            raise NumericalError("non-finite recovery loss", layer=bad)
        return loss

    def evaluate(self, E, soft_labels, masks=None) -> float:
        """Loss value only, no graph retained."""
        with torch.enable_grad():
            return float(self(E, soft_labels, masks, create_graph=False))

    def evaluate_tokens(self, token_ids, soft_labels, masks=None) -> float:
        return self.evaluate(self.model.embed(token_ids), soft_labels, masks)


def recovery_loss(E, soft_labels, masks, model, g_star, spec=DistanceSpec(),
                  adaptation=AttackerAdaptation(), labels_trainable=False,
                  norm_match_active=None) -> torch.Tensor:
    """One-shot recovery loss; differentiable in ``E``, ``soft_labels`` and the masks."""
    objective = RecoveryObjective(model, g_star, spec, adaptation, labels_trainable,
                                  norm_match_active)
    return objective(E, soft_labels, masks)
