import os
from pathlib import Path

import numpy as np
import pytest

from bcpnn_stream.config import ModelConfig
from bcpnn_stream.data import Dataset, load_idx

MNIST_DIR = Path(os.environ.get("BCPNN_MNIST_DIR", "/root/data/mnist"))


def tiny_config(**overrides) -> ModelConfig:
    """4x4 images, 4 hidden hypercolumns of 8, 3 classes."""
    values = dict(
        input_width=4, input_height=4, input_hc=16, input_mc=2,
        hidden_hc=4, hidden_mc=8, n_classes=3, nact_hi=8, epochs_unsup=1,
        noise_amp=0.01, packet_ih=8, packet_ho=4, fifo_depth=2, seed=3,
    )
    values.update(overrides)
    return ModelConfig(**values)


def random_dataset(n, cfg, seed=0) -> Dataset:
    rng = np.random.default_rng(seed)
    return Dataset(
        rng.random((n, cfg.input_height, cfg.input_width)),
        rng.integers(0, cfg.n_classes, n),
        cfg.input_width,
        cfg.input_height,
        cfg.n_classes,
    )


@pytest.fixture
def tiny_cfg():
    return tiny_config()


def _mnist_files(split):
    prefix = "train" if split == "train" else "t10k"
    return MNIST_DIR / f"{prefix}-images-idx3-ubyte", MNIST_DIR / f"{prefix}-labels-idx1-ubyte"


def mnist_available() -> bool:
    return all(p.exists() for s in ("train", "test") for p in _mnist_files(s))


def load_mnist(split) -> Dataset:
    if not mnist_available():
        pytest.skip(f"MNIST not found in {MNIST_DIR} (set BCPNN_MNIST_DIR)")
    return load_idx(*_mnist_files(split), n_classes=10)


@pytest.fixture(scope="session")
def mnist_train():
    return load_mnist("train")


@pytest.fixture(scope="session")
def mnist_test():
    return load_mnist("test")


def pattern_dataset(n, cfg, n_patterns=3, noise=0.1, seed=0) -> Dataset:
    """Noisy copies of a few random binary prototypes; labels name the prototype."""
    rng = np.random.default_rng(seed)
    protos = rng.integers(0, 2, (n_patterns, cfg.input_height, cfg.input_width)).astype(float)
    labels = rng.integers(0, n_patterns, n)
    images = np.clip(protos[labels] + rng.normal(0, noise, (n, cfg.input_height, cfg.input_width)), 0, 1)
    return Dataset(images, labels % cfg.n_classes, cfg.input_width, cfg.input_height, cfg.n_classes)


_ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = []


@pytest.fixture
def acceptance(request):
    """``record(criterion, ok, detail)`` adds a line to the end-of-run acceptance summary."""
    lines = request.config.stash[_ACCEPTANCE]

    def record(criterion, ok, detail):
        line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance")
        for line in sorted(lines):
            terminalreporter.write_line(line)
