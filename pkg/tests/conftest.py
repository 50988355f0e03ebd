import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from avt import network as nw
from avt.data import BlobSpec, synth_blobs

PAIR_CENTERS = [(0.1, 0.1), (0.2, 0.1), (0.8, 0.9), (0.9, 0.9)]


def random_mlp(rng, max_layers=3, max_width=16, in_dim=None, n_classes=None, seed=None):
    """Random ReLU MLP with 1..max_layers Dense layers, biases non-zero."""
    in_dim = in_dim or int(rng.integers(2, 7))
    n_classes = n_classes or int(rng.integers(2, 6))
    depth = int(rng.integers(1, max_layers + 1))
    widths = [in_dim] + [int(rng.integers(2, max_width + 1)) for _ in range(depth - 1)] + [n_classes]
    arch = []
    for i in range(depth):
        arch.append(nw.Dense(widths[i], widths[i + 1]))
        if i < depth - 1:
            arch.append(nw.ReLU())
    net = nw.init(arch, int(rng.integers(1 << 30)) if seed is None else seed)
    for t in net.parameters():
        if t.ndim == 1:
            t.data[:] = rng.normal(0, 0.3, size=t.shape)
    return net


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def pair_blobs():
    train = synth_blobs(BlobSpec(PAIR_CENTERS, 0.02, 100, seed=1), "pairs-train")
    test = synth_blobs(BlobSpec(PAIR_CENTERS, 0.02, 100, seed=2), "pairs-test")
    return train, test


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[key])
