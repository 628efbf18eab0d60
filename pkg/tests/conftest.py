import os
from pathlib import Path

import numpy as np
import pytest

REPO_ROOT = Path(__file__).resolve().parent.parent
DATA_DIR = Path(os.environ.get("MNIST_DIR", REPO_ROOT / "data" / "mnist"))


def mnist_available() -> bool:
    from bitnn import mnist_data

    for name in (mnist_data.TEST_IMAGES, mnist_data.TEST_LABELS):
        if not ((DATA_DIR / name).exists() or (DATA_DIR / (name + ".gz")).exists()):
            return False
    return True


requires_mnist = pytest.mark.skipif(
    not mnist_available(),
    reason=f"MNIST IDX files not found in {DATA_DIR} (set MNIST_DIR to override)",
)


@pytest.fixture(scope="session")
def mnist_test():
    from bitnn import mnist_data

    if not mnist_available():
        pytest.skip(f"MNIST IDX files not found in {DATA_DIR}")
    return mnist_data.load_dir(DATA_DIR, "test")


@pytest.fixture(scope="session")
def mnist_train():
    from bitnn import mnist_data

    if not mnist_available():
        pytest.skip(f"MNIST IDX files not found in {DATA_DIR}")
    return mnist_data.load_dir(DATA_DIR, "train")


def make_fixture_dataset(n=40, seed=123):
    """Small synthetic dataset with at least a few samples of each digit."""
    rng = np.random.default_rng(seed)
    from bitnn.mnist_data import Dataset

    images = rng.integers(0, 256, size=(n, 28, 28)).astype(np.uint8)
    labels = (np.arange(n) % 10).astype(np.uint8)
    return Dataset(images, labels, "test")
