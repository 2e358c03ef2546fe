"""Text checkpoints and vocabulary files.

Checkpoint layout, one item per line::

    textleak-checkpoint 1
    config {"vocab_size": 64, ...}
    layer <name> <dim> [<dim> ...]
    <row-major values, space separated>
    layer ...

Values are written with 17 significant digits, so float64 parameters survive
a round trip exactly. A vocabulary file holds one token per line; the line
number (from 0) is the token id.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .model import EncoderClassifier, ModelConfig

MAGIC = "textleak-checkpoint"
VERSION = 1


def dumps(arrays: dict[str, np.ndarray], config: ModelConfig | None = None) -> str:
    lines = [f"{MAGIC} {VERSION}"]
    if config is not None:
        lines.append("config " + json.dumps(config.to_dict(), sort_keys=True))
    for name, a in arrays.items():
        a = np.asarray(a, dtype=np.float64)
        lines.append("layer " + " ".join([name, *map(str, a.shape)]))
        lines.append(" ".join(f"{v:.17g}" for v in a.reshape(-1)))
    return "\n".join(lines) + "\n"


def loads(text: str) -> tuple[dict[str, np.ndarray], ModelConfig | None]:
    lines = text.splitlines()
    if not lines or lines[0].split()[:1] != [MAGIC]:
        raise ValueError("not a textleak checkpoint")
    if int(lines[0].split()[1]) != VERSION:
        raise ValueError(f"unsupported checkpoint version {lines[0].split()[1]}")
    config, arrays = None, {}
    i = 1
    while i < len(lines):
        head = lines[i]
        if head.startswith("config "):
            config = ModelConfig.from_dict(json.loads(head[len("config "):]))
            i += 1
        elif head.startswith("layer "):
            parts = head.split()
            name, shape = parts[1], tuple(int(s) for s in parts[2:])
            body = lines[i + 1] if i + 1 < len(lines) else ""
            values = np.array([float(v) for v in body.split()], dtype=np.float64)
            if values.size != int(np.prod(shape)):
                raise ValueError(f"layer {name}: expected {int(np.prod(shape))} values, got {values.size}")
            arrays[name] = values.reshape(shape)
            i += 2
        elif not head.strip():
            i += 1
        else:
            raise ValueError(f"line {i + 1}: unexpected content {head[:40]!r}")
    return arrays, config


def save_checkpoint(model: EncoderClassifier, path):
    Path(path).write_text(dumps(model.state_arrays(), model.config))


def load_checkpoint(path, config: ModelConfig | None = None) -> EncoderClassifier:
    arrays, stored = loads(Path(path).read_text())
    config = config or stored
    if config is None:
        raise ValueError("checkpoint has no config line and none was given")
    model = EncoderClassifier(config)
    model.load_arrays(arrays)
    return model


def load_vocab(path) -> list[str]:
    tokens = Path(path).read_text().splitlines()
    if len(set(tokens)) != len(tokens):
        raise ValueError("duplicate tokens in vocabulary")
    return tokens


def save_vocab(tokens, path):
    Path(path).write_text("\n".join(tokens) + "\n")
