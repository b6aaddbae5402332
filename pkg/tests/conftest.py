import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_simplex(rng, n, C, alpha=1.0):
    return rng.dirichlet(np.full(C, alpha), size=n)


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion."""
    lines = []
    for status in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(status, []):
            nodeid = getattr(rep, "nodeid", "")
            if "test_acceptance.py::test_criterion_" not in nodeid or rep.when != "call" and status != "error":
                continue
            name = nodeid.split("::test_criterion_")[1]
            num, _, label = name.partition("_")
            lines.append((int(num), f"criterion {num} [{label.replace('_', ' ')}]: "
                                    f"{'PASS' if status == 'passed' else 'FAIL'}"))
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
