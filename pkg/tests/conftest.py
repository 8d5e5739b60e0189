import numpy as np
import pytest
import torch

from grfusion.core import SourceStack

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


def random_stack(n: int, h: int = 32, w: int = 32, seed: int = 0) -> SourceStack:
    gen = np.random.default_rng(seed)
    return SourceStack.from_list([gen.random((h, w, 3), dtype=np.float32) for _ in range(n)])
