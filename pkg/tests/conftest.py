import numpy as np
import pytest
import torch

from textleak.model import EncoderClassifier, TokenBatch
from textleak.verify import random_batch, tiny_config

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def report():
    """Record a one-line verdict that is echoed in the terminal summary."""

    def emit(number: int, ok: bool, detail: str):
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)

    return emit


@pytest.fixture
def tiny():
    return tiny_config()


@pytest.fixture
def tiny_model(tiny):
    return EncoderClassifier(tiny, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def tiny_batch(tiny, rng) -> TokenBatch:
    return random_batch(rng, tiny, 2, 5)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)
