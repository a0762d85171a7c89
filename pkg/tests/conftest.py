import os
from pathlib import Path

import numpy as np
import pytest
from sklearn.datasets import load_digits

from slimnn.data import Dataset


def mnist_data_dir():
    """Directory holding the standard MNIST IDX files, if configured."""
    d = os.environ.get("DATA_DIR")
    if not d:
        return None
    required = [
        "train-images-idx3-ubyte",
        "train-labels-idx1-ubyte",
        "t10k-images-idx3-ubyte",
        "t10k-labels-idx1-ubyte",
    ]
    root = Path(d)
    for stem in required:
        if not (root / stem).exists() and not (root / (stem + ".gz")).exists():
            return None
    return root


requires_mnist = pytest.mark.skipif(
    mnist_data_dir() is None,
    reason="MNIST IDX files not found (set DATA_DIR to a directory with the four standard files)",
)


@pytest.fixture(scope="session")
def digits28():
    """sklearn digits upscaled to 28x28: a small, learnable MNIST stand-in."""
    raw = load_digits()
    imgs = np.kron(raw.images / 16.0, np.ones((4, 4)))[:, 2:30, 2:30]
    return Dataset(images=imgs, labels=raw.target.astype(np.int64), name="mnist")


@pytest.fixture(scope="session")
def digits_arrays(digits28):
    """Normalized flat train/test arrays from the digits stand-in."""
    X = digits28.flat_images()
    y = digits28.labels
    mean, std = X.mean(), X.std()
    Xn = (X - mean) / std
    return Xn[:1400], y[:1400], Xn[1400:], y[1400:]
