import os
from pathlib import Path

import numpy as np
import pytest

from unipert import data

MNIST_DIR = Path(os.environ.get("UNIP_DATA_DIR", "/root/data/mnist"))


def mnist_available():
    return all((MNIST_DIR / f).exists() or (MNIST_DIR / (f + ".gz")).exists()
               for pair in data.MNIST_FILES.values() for f in pair)


requires_mnist = pytest.mark.skipif(not mnist_available(), reason=f"MNIST IDX files not found in {MNIST_DIR}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_conv_model(seed=0, dtype=np.float64):
    from unipert import nn

    layers = [
        nn.Conv2d(2, 3, 3, stride=1, padding=1), nn.ReLU(), nn.MaxPool2x2(),
        nn.Conv2d(3, 4, 2, stride=2, padding=0), nn.ReLU(),
        nn.Flatten(), nn.Dense(4 * 1 * 1, 5), nn.ReLU(), nn.Dense(5, 3),
    ]
    return nn.Model.build(layers, (2, 4, 4), 3, seed=seed, dtype=dtype)


def blob_dataset(n=60, seed=0):
    """Three Gaussian classes in a 2x4x4 image space, values kept inside [0, 1]."""
    rng = np.random.default_rng(seed)
    centers = rng.random((3, 2, 4, 4)) * 0.6 + 0.2
    y = rng.integers(0, 3, n)
    x = np.clip(centers[y] + 0.05 * rng.standard_normal((n, 2, 4, 4)), 0, 1)
    return data.Dataset(x, y, "train", "blobs", 3)


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: s.split("] ", 1)[-1]):
            terminalreporter.write_line(line)
