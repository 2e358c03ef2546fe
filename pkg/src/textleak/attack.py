"""Hybrid continuous/discrete gradient-inversion attack and continuous-only baselines."""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .continuous import ContOptConfig, cont_opt, init_dummy
from .discrete import DiscOptConfig, disc_opt
from .layout import LENGTH_MODES, Layout
from .metrics import rouge
from .model import DropoutMaskSet, EncoderClassifier, GradientView, TokenBatch
from .recovery import AttackerAdaptation, DistanceSpec, RecoveryObjective, detect_noise_defense
from .rng import substream, torch_generator


@dataclass(frozen=True)
class AttackConfig:
    rounds: int = 5
    cont: ContOptConfig = field(default_factory=ContOptConfig)
    disc: DiscOptConfig = field(default_factory=DiscOptConfig)
    distance: DistanceSpec = field(default_factory=DistanceSpec)
    adaptation: AttackerAdaptation = field(default_factory=AttackerAdaptation)
    dropout_learning: bool = True
    known_labels: bool = True
    known_lengths: str = "per_sequence"
    use_discrete: bool = True
    baseline_steps: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.known_lengths not in LENGTH_MODES:
            raise ValueError(f"known_lengths must be one of {LENGTH_MODES}")

    @classmethod
    def full(cls, **kw) -> "AttackConfig":
        """Full-scale hyperparameters (BERT-base runs)."""
        return cls(**kw)

    @classmethod
    def desk(cls, **kw) -> "AttackConfig":
        """Budget sized for the toy model: minutes per run on one CPU core."""
        base = cls(rounds=3,
                   cont=ContOptConfig(n_init=200, n_perm=200, steps=400, lr=0.05, decay=0.89,
                                      decay_every=50),
                   disc=DiscOptConfig(passes=3, beam_width=4, n_perm=200))
        return replace(base, **kw)

    @classmethod
    def tuned(cls, **kw) -> "AttackConfig":
        """Desk budget plus clipping of the dummy-embedding gradient at 0.5."""
        base = cls.desk()
        return replace(base, cont=replace(base.cont, grad_clip=0.5), **kw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class AttackerKnowledge:
    """Side information the adversary holds besides parameters and the shared update."""

    batch_size: int
    seq_len: int
    lengths: np.ndarray | None = None
    labels: np.ndarray | None = None

    @classmethod
    def from_batch(cls, batch: TokenBatch, known_labels: bool, known_lengths: str):
        b, n = batch.token_ids.shape
        return cls(b, n,
                   np.array(batch.lengths) if known_lengths == "per_sequence" else None,
                   np.array(batch.labels) if known_labels else None)


@dataclass
class RecoveryResult:
    token_ids: np.ndarray
    final_loss: float
    rounds: list[tuple[float, float]]
    config: dict
    seed: int
    wall_time: float
    method: str = "grab"
    soft_labels: np.ndarray | None = None
    cont_traces: list[list[tuple[int, float, float]]] = field(default_factory=list)
    disc_passes: list[list[float]] = field(default_factory=list)
    noise_detected: bool | None = None
    early_stop_round: int | None = None
    selected: str = "discrete"
    rouge: dict | None = None

    def score(self, reference: TokenBatch, special_ids) -> dict:
        self.rouge = rouge(reference, self.token_ids, special_ids).as_dict()
        return self.rouge

    def to_record(self, with_traces: bool = False) -> dict:
        rec = {
            "method": self.method,
            "seed": self.seed,
            "token_ids": self.token_ids.tolist(),
            "final_loss": self.final_loss,
            "rounds": [list(r) for r in self.rounds],
            "selected": self.selected,
            "early_stop_round": self.early_stop_round,
            "noise_detected": self.noise_detected,
            "soft_labels": None if self.soft_labels is None else self.soft_labels.tolist(),
            "rouge": self.rouge,
            "config": self.config,
        }
        if with_traces:
            rec["cont_traces"] = [[list(t) for t in tr] for tr in self.cont_traces]
            rec["disc_passes"] = self.disc_passes
        return rec


def _probe_batch(knowledge: AttackerKnowledge, model: EncoderClassifier, rng) -> TokenBatch:
    sp = model.config.special
    low = max(sp.pad, sp.unk, sp.cls, sp.sep) + 1
    b, n = knowledge.batch_size, knowledge.seq_len
    rows = rng.integers(low, model.config.vocab_size, size=(b, n - 2)).tolist()
    labels = rng.integers(0, model.config.num_classes, size=b)
    return TokenBatch.from_rows(rows, labels, sp, n)


def _setup(model, g_star, cfg: AttackConfig, knowledge: AttackerKnowledge, adapt: bool):
    layout = Layout(knowledge.batch_size, knowledge.seq_len, model.config.special,
                    knowledge.lengths if cfg.known_lengths == "per_sequence" else None)
    labels = knowledge.labels if cfg.known_labels else None
    if cfg.known_labels and labels is None:
        raise ValueError("known_labels requested but no labels supplied")
    adaptation = cfg.adaptation if adapt else AttackerAdaptation()
    detected = None
    if adaptation.norm_match:
        probe = _probe_batch(knowledge, model, substream(cfg.seed, "probe"))
        detected = detect_noise_defense(g_star, probe, model, adaptation.threshold)
    objective = RecoveryObjective(model, g_star, cfg.distance, adaptation,
                                  labels_trainable=labels is None,
                                  norm_match_active=bool(detected))
    return layout, labels, objective, detected


def grab_attack(model: EncoderClassifier, g_star: GradientView, cfg: AttackConfig,
                knowledge: AttackerKnowledge) -> RecoveryResult:
    """Alternate continuous descent and beam-search reordering for ``cfg.rounds`` rounds."""
    t0 = time.perf_counter()
    layout, labels, objective, detected = _setup(model, g_star, cfg, knowledge, adapt=True)
    rng = substream(cfg.seed, "permutations")
    b, n = layout.batch_size, layout.seq_len

    masks = None
    if cfg.dropout_learning and model.config.dropout_rate > 0:
        masks = DropoutMaskSet.bernoulli(model.config, b, n, torch_generator(cfg.seed, "dropout"))
    E, y, _ = init_dummy(objective, layout, cfg.cont.n_init, torch_generator(cfg.seed, "init"),
                         masks, labels)

    rounds, traces, passes = [], [], []
    early = None
    X_c = X_d = None
    for r in range(cfg.rounds):
        cont = cont_opt(E, y, masks, objective, layout, cfg.cont, rng,
                        learn_labels=labels is None, learn_masks=masks is not None)
        y, masks = cont.soft_labels, cont.masks
        traces.append(cont.trace)

        def loss_of_tokens(X):
            return objective.evaluate_tokens(X, y, masks)

        X_c = model.tokenize_embedding(cont.embedding)
        cont_loss = loss_of_tokens(X_c)
        if cfg.use_discrete:
            disc = disc_opt(X_c, loss_of_tokens, layout, cfg.disc, rng)
            X_d, disc_loss = disc.token_ids, disc.loss
            passes.append(disc.pass_losses)
        else:
            X_d, disc_loss = X_c, cont_loss
        rounds.append((cont_loss, disc_loss))
        E = model.embed(X_d)
        if cfg.use_discrete and disc_loss >= cont_loss:
            early = r
            break

    cont_loss, disc_loss = rounds[-1]
    selected = "continuous" if cont_loss < disc_loss else "discrete"
    X = X_c if selected == "continuous" else X_d
    return RecoveryResult(
        token_ids=np.asarray(X), final_loss=min(cont_loss, disc_loss), rounds=rounds,
        config=cfg.to_dict(), seed=cfg.seed, wall_time=time.perf_counter() - t0,
        soft_labels=y.numpy(), cont_traces=traces, disc_passes=passes,
        noise_detected=detected, early_stop_round=early, selected=selected,
    )


def _continuous_only(model, g_star, cfg: AttackConfig, knowledge, method) -> RecoveryResult:
    t0 = time.perf_counter()
    layout, labels, objective, _ = _setup(model, g_star, cfg, knowledge, adapt=False)
    steps = cfg.baseline_steps if cfg.baseline_steps is not None else cfg.rounds * cfg.cont.steps
    cont_cfg = replace(cfg.cont, steps=steps, n_perm=1)
    E, y, _ = init_dummy(objective, layout, 1, torch_generator(cfg.seed, "init"), None, labels)
    cont = cont_opt(E, y, None, objective, layout, cont_cfg, substream(cfg.seed, "permutations"),
                    learn_labels=labels is None, permute=False)
    X = model.tokenize_embedding(cont.embedding)
    loss = objective.evaluate_tokens(X, cont.soft_labels)
    return RecoveryResult(
        token_ids=X, final_loss=loss, rounds=[(loss, loss)], config=cfg.to_dict(),
        seed=cfg.seed, wall_time=time.perf_counter() - t0, method=method,
        soft_labels=cont.soft_labels.numpy(), cont_traces=[cont.trace], selected="continuous",
    )


def baseline_dlg(model, g_star, cfg: AttackConfig, knowledge) -> RecoveryResult:
    """Continuous-only attack with a pure per-layer L2 gradient distance."""
    cfg = replace(cfg, distance=DistanceSpec("l2_plus_l1", 0.0))
    return _continuous_only(model, g_star, cfg, knowledge, "dlg")


def baseline_tag(model, g_star, cfg: AttackConfig, knowledge) -> RecoveryResult:
    """Continuous-only attack with the L2 + weighted L1 distance."""
    cfg = replace(cfg, distance=DistanceSpec("l2_plus_l1", cfg.distance.l1_weight))
    return _continuous_only(model, g_star, cfg, knowledge, "tag")


ATTACKS = {"grab": grab_attack, "dlg": baseline_dlg, "tag": baseline_tag}
