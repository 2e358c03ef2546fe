"""Named random substreams derived from one master seed."""

import zlib

import numpy as np
import torch


def _seed_sequence(seed: int, name: str) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=int(seed), spawn_key=(zlib.crc32(name.encode()),))


def substream(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(_seed_sequence(seed, name))


def torch_generator(seed: int, name: str) -> torch.Generator:
    state = _seed_sequence(seed, name).generate_state(2, dtype=np.uint32)
    return torch.Generator().manual_seed(int(state[0]) << 32 | int(state[1]))
