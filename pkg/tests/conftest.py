import sys
from pathlib import Path

import numpy as np
import pytest
import scipy.sparse as sp

sys.path.insert(0, str(Path(__file__).parent))

from linfuse.graph_store import make_dataset  # noqa: E402

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def edge2():
    """Two nodes joined by one undirected edge, X = I."""
    a = sp.csr_matrix(np.array([[0.0, 1.0], [1.0, 0.0]]))
    return make_dataset(a, np.eye(2), np.array([0, 1]), {"train": [0], "test": [1]}, num_classes=2)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
