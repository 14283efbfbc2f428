import os
from pathlib import Path

import numpy as np
import pytest

from pepita_adv.model import Layer, Mlp
from pepita_adv.numerics import make_rng

MNIST_DIR = Path(os.environ.get("PEPITA_MNIST_DIR", "/root/data/mnist"))


def mnist_available() -> bool:
    return (MNIST_DIR / "train-images-idx3-ubyte").exists() or (MNIST_DIR / "train-images-idx3-ubyte.gz").exists()


@pytest.fixture(scope="session")
def mnist_dir() -> Path:
    if not mnist_available():
        pytest.skip(f"MNIST files not found in {MNIST_DIR} (set PEPITA_MNIST_DIR)")
    return MNIST_DIR


def random_net(seed, sizes, dropout=0.0, f_scale=0.05):
    return Mlp.create(list(sizes), make_rng(seed, "init"), f_scale=f_scale, dropout_rate=dropout)


def one_hot_cols(labels, k):
    return np.eye(k)[:, np.asarray(labels)]


def hand_net():
    """2-2-2 net with small hand-picked weights."""
    l1 = Layer(np.array([[0.5, -0.25], [0.75, 1.0]]), np.array([0.1, -0.2]), "relu")
    l2 = Layer(np.array([[1.0, -1.0], [0.5, 2.0]]), np.array([0.0, 0.3]), "softmax")
    F = np.array([[0.1, -0.2], [0.3, 0.05]])
    return Mlp([l1, l2], F, dropout_rate=0.0)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        ok, detail = RESULTS[n]
        terminalreporter.write_line(f"CRITERION {n}: {'PASS' if ok else 'FAIL'} | {detail}")
