import numpy as np
import pytest
import torch

from palmdiff.graph import LayeredGraph, example_graph


class LogitModel:
    """Stand-in denoiser returning fixed logits regardless of input."""

    def __init__(self, logits, mask):
        self.logits = torch.as_tensor(np.asarray(logits, dtype=np.float64))
        self.mask = torch.as_tensor(mask)

    def __call__(self, x_t, t):
        B = x_t.shape[0]
        z = self.logits if self.logits.ndim == 3 else self.logits.expand(B, *self.logits.shape)
        return z.masked_fill(~self.mask, float("-inf"))

    def eval(self):
        return self


@pytest.fixture
def fig1():
    return example_graph()


@pytest.fixture
def degree_ladder():
    """Root with 8 children; child i has out-degree i (1..8)."""
    kids = [f"a{i}" for i in range(1, 9)]
    leaves = [f"b{i}" for i in range(1, 9)]
    edges = [("r", k) for k in kids]
    for i, k in enumerate(kids, start=1):
        edges += [(k, leaves[j]) for j in range(i)]
    return LayeredGraph.from_labels([["r"], kids, leaves], edges)


# acceptance verdicts travel on report.user_properties and are echoed once at the end
_ACCEPTANCE: list[str] = []


def pytest_runtest_logreport(report):
    if report.when == "call":
        _ACCEPTANCE.extend(v for k, v in report.user_properties if k == "acceptance")


def pytest_terminal_summary(terminalreporter, config):
    lines = _ACCEPTANCE
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
