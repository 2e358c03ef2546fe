"""Tiny transformer-encoder sequence classifier.

The classifier is a post-LayerNorm BERT-style encoder with a linear head on the
position-0 representation. Dropout is not sampled internally: every dropout site
multiplies its activation by an externally supplied mask, so the same network
serves the victim client (binary Bernoulli masks) and the attacker (relaxed
masks in ``[0, 1]`` that are learned jointly with the dummy data).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

DTYPE = torch.float64

EMBEDDING_LAYERS = ("embeddings.token", "embeddings.position")


class ConfigError(ValueError):
    """Inconsistent model configuration or mask set."""


class NumericalError(FloatingPointError):
    """A non-finite value appeared in a gradient or loss."""

    def __init__(self, message, layer=None, trace=None):
        super().__init__(message)
        self.layer = layer
        self.trace = trace


@dataclass(frozen=True)
class SpecialTokens:
    pad: int = 0
    unk: int = 1
    cls: int = 2
    sep: int = 3


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 64
    num_layers: int = 2
    num_heads: int = 2
    hidden_dim: int = 16
    ffn_dim: int | None = None
    max_seq_len: int = 12
    num_classes: int = 2
    dropout_rate: float = 0.0
    freeze_embeddings: bool = False
    special: SpecialTokens = field(default_factory=SpecialTokens)
    init_std: float = 0.3
    embedding_std: float = 1.0

    def __post_init__(self):
        for name in ("vocab_size", "num_layers", "num_heads", "hidden_dim",
                     "max_seq_len", "num_classes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.hidden_dim % self.num_heads:
            raise ConfigError("hidden_dim must be divisible by num_heads")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must lie in [0, 1)")
        ids = [self.special.pad, self.special.unk, self.special.cls, self.special.sep]
        if len(set(ids)) != len(ids) or max(ids) >= self.vocab_size or min(ids) < 0:
            raise ConfigError("special token ids must be distinct and < vocab_size")

    @property
    def ffn(self) -> int:
        return self.ffn_dim or 4 * self.hidden_dim

    @property
    def dropout_sites(self) -> list[str]:
        sites = []
        for i in range(self.num_layers):
            sites += [f"layers.{i}.attn_out", f"layers.{i}.ffn_out"]
        return sites

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if isinstance(d.get("special"), dict):
            d["special"] = SpecialTokens(**d["special"])
        return cls(**d)


@dataclass
class TokenBatch:
    """Token ids ``(b, n)``, labels ``(b,)`` and true lengths ``(b,)``."""

    token_ids: np.ndarray
    labels: np.ndarray
    lengths: np.ndarray

    def __post_init__(self):
        self.token_ids = np.asarray(self.token_ids, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.lengths = np.asarray(self.lengths, dtype=np.int64)
        if self.token_ids.ndim != 2:
            raise ValueError("token_ids must be a (b, n) matrix")
        b, n = self.token_ids.shape
        if self.labels.shape != (b,) or self.lengths.shape != (b,):
            raise ValueError("labels and lengths must have one entry per row")
        if np.any(self.lengths < 1) or np.any(self.lengths > n):
            raise ValueError("lengths must lie in [1, n]")

    @property
    def shape(self):
        return self.token_ids.shape

    def validate(self, special: SpecialTokens, vocab_size: int | None = None):
        """Check CLS/SEP framing and PAD fill; raise ``ValueError`` otherwise."""
        X = self.token_ids
        if vocab_size is not None and (X.min() < 0 or X.max() >= vocab_size):
            raise ValueError("token id out of range")
        for i, L in enumerate(self.lengths):
            if X[i, 0] != special.cls or X[i, L - 1] != special.sep:
                raise ValueError(f"row {i} is not framed by CLS/SEP")
            if np.any(X[i, L:] != special.pad):
                raise ValueError(f"row {i} has non-PAD entries past its length")

    @classmethod
    def from_rows(cls, rows: Sequence[Sequence[int]], labels, special: SpecialTokens,
                  n: int | None = None) -> "TokenBatch":
        """Frame content rows as ``[CLS] row [SEP] [PAD]...``."""
        lengths = [len(r) + 2 for r in rows]
        n = n or max(lengths)
        X = np.full((len(rows), n), special.pad, dtype=np.int64)
        for i, r in enumerate(rows):
            X[i, 0] = special.cls
            X[i, 1:1 + len(r)] = r
            X[i, len(r) + 1] = special.sep
        return cls(X, labels, lengths)

    def concat(self, other: "TokenBatch") -> "TokenBatch":
        if self.shape[1] != other.shape[1]:
            raise ValueError("sequence lengths differ")
        return TokenBatch(np.concatenate([self.token_ids, other.token_ids]),
                          np.concatenate([self.labels, other.labels]),
                          np.concatenate([self.lengths, other.lengths]))

    def split(self, parts: int) -> list["TokenBatch"]:
        return [TokenBatch(X, y, L) for X, y, L in zip(
            np.array_split(self.token_ids, parts), np.array_split(self.labels, parts),
            np.array_split(self.lengths, parts))]


@dataclass
class EmbeddingState:
    embedding: torch.Tensor
    soft_labels: torch.Tensor
    labels_trainable: bool = False


@dataclass
class DropoutMaskSet:
    """One mask tensor per dropout site, entries in ``[0, 1]``."""

    masks: dict[str, torch.Tensor]
    binary: bool = False

    def __post_init__(self):
        for site, m in self.masks.items():
            if torch.any(m < 0) or torch.any(m > 1):
                raise ConfigError(f"mask at {site} leaves [0, 1]")
            if self.binary and torch.any((m != 0) & (m != 1)):
                raise ConfigError(f"binary mask at {site} has fractional entries")

    @classmethod
    def ones(cls, config: ModelConfig, b: int, n: int) -> "DropoutMaskSet":
        shape = (b, n, config.hidden_dim)
        return cls({s: torch.ones(shape, dtype=DTYPE) for s in config.dropout_sites}, True)

    @classmethod
    def bernoulli(cls, config: ModelConfig, b: int, n: int,
                  generator: torch.Generator) -> "DropoutMaskSet":
        keep = 1.0 - config.dropout_rate
        shape = (b, n, config.hidden_dim)
        masks = {s: torch.bernoulli(torch.full(shape, keep, dtype=DTYPE), generator=generator)
                 for s in config.dropout_sites}
        return cls(masks, True)

    def sites(self):
        return list(self.masks)

    def tensors(self) -> list[torch.Tensor]:
        return list(self.masks.values())

    def clone(self, requires_grad: bool = False) -> "DropoutMaskSet":
        masks = {k: v.detach().clone().requires_grad_(requires_grad) for k, v in self.masks.items()}
        return DropoutMaskSet(masks, self.binary)

    def clamp_(self):
        with torch.no_grad():
            for m in self.masks.values():
                m.clamp_(0.0, 1.0)
        return self

    def concat(self, other: "DropoutMaskSet") -> "DropoutMaskSet":
        return DropoutMaskSet({k: torch.cat([v, other.masks[k]]) for k, v in self.masks.items()},
                              self.binary and other.binary)


@dataclass
class GradientView:
    """Ordered per-layer gradients; frozen layers carry ``None``."""

    names: list[str]
    grads: list[torch.Tensor | None]
    frozen: list[bool]

    def __post_init__(self):
        if not len(self.names) == len(self.grads) == len(self.frozen):
            raise ValueError("names, grads and frozen must align")
        for name, g, fr in zip(self.names, self.grads, self.frozen):
            if fr and g is not None:
                raise ValueError(f"frozen layer {name} carries a gradient")
            if not fr and g is None:
                raise ValueError(f"active layer {name} lacks a gradient")

    @property
    def active_names(self) -> list[str]:
        return [n for n, fr in zip(self.names, self.frozen) if not fr]

    def active(self) -> list[torch.Tensor]:
        return [g for g in self.grads if g is not None]

    def items(self):
        return [(n, g) for n, g in zip(self.names, self.grads) if g is not None]

    def __len__(self):
        return len(self.active_names)

    def numel(self) -> int:
        return sum(g.numel() for g in self.active())

    def flat(self) -> torch.Tensor:
        return torch.cat([g.reshape(-1) for g in self.active()])

    def norm(self) -> torch.Tensor:
        return torch.sqrt(sum((g * g).sum() for g in self.active()))

    def layer_norms(self) -> list[torch.Tensor]:
        return [torch.linalg.vector_norm(g) for g in self.active()]

    def replace(self, grads: Iterable[torch.Tensor]) -> "GradientView":
        """New view with the active tensors replaced in order."""
        it = iter(grads)
        new = [None if fr else next(it) for fr in self.frozen]
        return GradientView(list(self.names), new, list(self.frozen))

    def detach(self) -> "GradientView":
        return self.replace(g.detach().clone() for g in self.active())

    def restrict(self, names: Sequence[str]) -> "GradientView":
        """Keep only the given active layers (in this view's order)."""
        keep = set(names)
        idx = [i for i, n in enumerate(self.names) if n in keep and not self.frozen[i]]
        return GradientView([self.names[i] for i in idx], [self.grads[i] for i in idx],
                            [False] * len(idx))

    def same_structure(self, other: "GradientView") -> bool:
        if self.active_names != other.active_names:
            return False
        return all(a.shape == b.shape for a, b in zip(self.active(), other.active()))


class _Layer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.hidden_dim
        self.heads = cfg.num_heads
        self.query = nn.Linear(d, d, dtype=DTYPE)
        self.key = nn.Linear(d, d, dtype=DTYPE)
        self.value = nn.Linear(d, d, dtype=DTYPE)
        self.out = nn.Linear(d, d, dtype=DTYPE)
        self.ln1 = nn.LayerNorm(d, dtype=DTYPE)
        self.ffn_in = nn.Linear(d, cfg.ffn, dtype=DTYPE)
        self.ffn_out = nn.Linear(cfg.ffn, d, dtype=DTYPE)
        self.ln2 = nn.LayerNorm(d, dtype=DTYPE)

    def attention(self, h):
        b, n, d = h.shape
        hd = d // self.heads

        def split(x):
            return x.view(b, n, self.heads, hd).transpose(1, 2)

        q, k, v = split(self.query(h)), split(self.key(h)), split(self.value(h))
        att = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(hd), dim=-1)
        return self.out((att @ v).transpose(1, 2).reshape(b, n, d))

    def forward(self, h, drop_attn, drop_ffn):
        h = self.ln1(h + drop_attn(self.attention(h)))
        return self.ln2(h + drop_ffn(self.ffn_out(F.gelu(self.ffn_in(h)))))


class EncoderClassifier(nn.Module):
    """Encoder classifier whose dropout realization is an explicit input."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        self.config = config
        init_std, embedding_std = config.init_std, config.embedding_std
        gen = torch.Generator().manual_seed(seed)
        d = config.hidden_dim
        self.embeddings = nn.ParameterDict({
            "token": nn.Parameter(torch.randn(config.vocab_size, d, generator=gen, dtype=DTYPE)
                                  * embedding_std),
            "position": nn.Parameter(torch.randn(config.max_seq_len, d, generator=gen, dtype=DTYPE)
                                     * embedding_std * 0.1),
        })
        self.layers = nn.ModuleList(_Layer(config) for _ in range(config.num_layers))
        self.head = nn.Linear(d, config.num_classes, dtype=DTYPE)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.startswith("embeddings"):
                    continue
                if name.endswith("weight") and p.ndim == 2:
                    p.copy_(torch.randn(p.shape, generator=gen, dtype=DTYPE) * init_std)
                elif ".ln" in name and name.endswith("weight"):
                    p.fill_(1.0)
                else:
                    p.zero_()
        self._check_distinct_rows()

    def _check_distinct_rows(self):
        table = self.embeddings["token"].detach()
        gaps = torch.cdist(table, table) + torch.eye(len(table), dtype=DTYPE) * 1e30
        if gaps.min() <= 0:
            raise ConfigError("token embedding rows must be distinct")

    # -- parameter access ---------------------------------------------------

    def layer_names(self) -> list[str]:
        return [n for n, _ in self.named_parameters()]

    def active_parameters(self, freeze_embeddings: bool | None = None):
        freeze = self.config.freeze_embeddings if freeze_embeddings is None else freeze_embeddings
        return [(n, p) for n, p in self.named_parameters()
                if not (freeze and n in EMBEDDING_LAYERS)]

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {n: p.detach().cpu().numpy().copy() for n, p in self.named_parameters()}

    def load_arrays(self, arrays: dict[str, np.ndarray]):
        with torch.no_grad():
            for n, p in self.named_parameters():
                a = torch.as_tensor(arrays[n], dtype=DTYPE)
                if not torch.all(torch.isfinite(a)):
                    raise NumericalError(f"non-finite values in {n}", layer=n)
                if a.shape != p.shape:
                    raise ConfigError(f"shape mismatch for {n}: {tuple(a.shape)} vs {tuple(p.shape)}")
                p.copy_(a)
        self._check_distinct_rows()

    def copy(self) -> "EncoderClassifier":
        clone = EncoderClassifier(self.config)
        clone.load_arrays(self.state_arrays())
        return clone

    # -- embedding <-> tokens -----------------------------------------------

    @property
    def token_table(self) -> torch.Tensor:
        return self.embeddings["token"]

    def positional(self, n: int) -> torch.Tensor:
        if n > self.config.max_seq_len:
            raise ConfigError(f"sequence length {n} exceeds max_seq_len")
        return self.embeddings["position"][:n]

    def embed(self, token_ids) -> torch.Tensor:
        X = torch.as_tensor(np.asarray(token_ids), dtype=torch.long)
        if X.min() < 0 or X.max() >= self.config.vocab_size:
            raise ValueError("token id out of range")
        return (self.token_table[X] + self.positional(X.shape[1])).detach()

    def tokenize_embedding(self, E: torch.Tensor, rel_tol: float = 1e-9) -> np.ndarray:
        """Nearest token row per position after removing the positional part.

        Distances within ``rel_tol`` of the minimum count as ties; ties go to
        the lowest token id.
        """
        with torch.no_grad():
            E = E.detach()
            tok = E - self.positional(E.shape[1])
            table = self.token_table.detach()
            d2 = ((tok.unsqueeze(-2) - table) ** 2).sum(-1)
            best = d2.min(dim=-1, keepdim=True).values
            near = d2 <= best * (1 + rel_tol) + 1e-300
            ids = torch.arange(table.shape[0]).expand_as(near)
            ids = torch.where(near, ids, torch.full_like(ids, table.shape[0]))
            return ids.min(dim=-1).values.numpy().astype(np.int64)

    # -- forward / loss / gradients -----------------------------------------

    def _check_masks(self, masks: DropoutMaskSet | None, shape):
        if masks is None:
            return
        if set(masks.masks) != set(self.config.dropout_sites):
            raise ConfigError("mask set does not cover exactly the configured dropout sites")
        for site, m in masks.masks.items():
            if tuple(m.shape) != tuple(shape):
                raise ConfigError(f"mask at {site} has shape {tuple(m.shape)}, expected {tuple(shape)}")

    def forward(self, E: torch.Tensor, masks: DropoutMaskSet | None = None,
                features: bool = False) -> torch.Tensor:
        """Logits ``(b, c)``; ``masks=None`` means dropout is inactive."""
        self._check_masks(masks, E.shape)
        scale = 1.0 / (1.0 - self.config.dropout_rate)

        def site(name):
            if masks is None:
                return lambda x: x
            m = masks.masks[name]
            return lambda x: x * m * scale

        h = E
        for i, layer in enumerate(self.layers):
            h = layer(h, site(f"layers.{i}.attn_out"), site(f"layers.{i}.ffn_out"))
        if features:
            return h
        return self.head(h[:, 0])

    def param_gradients(self, E, soft_labels, masks=None, labels_trainable=False,
                        freeze_embeddings=None, create_graph=True) -> GradientView:
        """Per-layer gradients of the classification loss.

        With ``create_graph`` the returned tensors stay differentiable with
        respect to ``E``, ``soft_labels`` and the masks. The embedding tables
        are not on the path from ``E`` so their entries are either frozen or
        computed from ``embedding_ids`` by the client-side helper.
        """
        loss = classification_loss(self(E, masks), soft_labels, labels_trainable)
        active = [(n, p) for n, p in self.active_parameters(freeze_embeddings)
                  if n not in EMBEDDING_LAYERS]
        grads = torch.autograd.grad(loss, [p for _, p in active], create_graph=create_graph)
        return _assemble(self, dict(zip([n for n, _ in active], grads)), freeze_embeddings)

    def client_gradients(self, batch: TokenBatch, masks: DropoutMaskSet | None = None,
                         freeze_embeddings=None) -> GradientView:
        """Gradients of a real token batch, embedding tables included unless frozen."""
        X = torch.as_tensor(batch.token_ids, dtype=torch.long)
        E = self.token_table[X] + self.positional(X.shape[1])
        targets = torch.as_tensor(batch.labels)
        loss = classification_loss(self(E, masks), targets, False)
        active = self.active_parameters(freeze_embeddings)
        grads = torch.autograd.grad(loss, [p for _, p in active])
        return _assemble(self, {n: g.detach() for (n, _), g in zip(active, grads)},
                         freeze_embeddings)


def _assemble(model, grads, freeze_embeddings) -> GradientView:
    freeze = model.config.freeze_embeddings if freeze_embeddings is None else freeze_embeddings
    names, tensors, frozen = [], [], []
    for n in model.layer_names():
        if n in grads:
            g = grads[n]
            if not torch.all(torch.isfinite(g)):
                raise NumericalError(f"non-finite gradient in {n}", layer=n)
            names.append(n), tensors.append(g), frozen.append(False)
        elif freeze and n in EMBEDDING_LAYERS:
            names.append(n), tensors.append(None), frozen.append(True)
    return GradientView(names, tensors, frozen)


def classification_loss(logits: torch.Tensor, targets: torch.Tensor,
                        labels_trainable: bool = False) -> torch.Tensor:
    """Mean cross-entropy.

    ``targets`` is an integer label vector, a one-hot/probability matrix, or
    (with ``labels_trainable``) a matrix of real scores read through softmax.
    """
    logp = torch.log_softmax(logits, dim=-1)
    if targets.ndim == 1:
        return F.nll_loss(logp, targets.long())
    if targets.shape != logits.shape:
        raise ValueError(f"target shape {tuple(targets.shape)} != logits {tuple(logits.shape)}")
    probs = torch.softmax(targets, dim=-1) if labels_trainable else targets
    return -(probs * logp).sum(-1).mean()


def one_hot(labels, num_classes: int) -> torch.Tensor:
    return F.one_hot(torch.as_tensor(np.asarray(labels)), num_classes).to(DTYPE)
