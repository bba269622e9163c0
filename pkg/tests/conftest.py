import gzip
import struct

import numpy as np
import pytest

from probekit.datasets import Dataset, one_hot
from probekit.graph import build_mlp
from probekit.models.config import ProbeTrainConfig
from probekit.tensor import Rng


def write_idx(path, magic, array, gz=False):
    array = np.asarray(array, dtype=np.uint8)
    header = struct.pack(">I", magic) + struct.pack(f">{array.ndim}I", *array.shape)
    raw = header + array.tobytes()
    path.write_bytes(gzip.compress(raw) if gz else raw)
    return path


@pytest.fixture
def idx_writer():
    return write_idx


@pytest.fixture
def rng():
    return Rng(0)


@pytest.fixture
def tiny_mlp():
    return build_mlp(depth=3, width=8, alpha=0.5, num_classes=2, rng=Rng(1), input_dim=4)


@pytest.fixture
def blobs():
    """Two well separated 2-D clusters, 40 points each, alternating classes."""
    r = Rng(5)
    n = 80
    cls = np.arange(n) % 2
    centers = np.array([[-3.0, -3.0], [3.0, 3.0]])
    x = centers[cls] + 0.5 * r.normal((n, 2))
    return Dataset(x, one_hot(cls, 2))


@pytest.fixture
def fast_probe_config():
    return ProbeTrainConfig(learning_rate=0.05, max_epochs=30, patience=5, minibatch=16, validation_size=50)


@pytest.fixture
def mnist_dir(tmp_path):
    """Tiny MNIST-shaped IDX files: 60 train (gzip) and 20 test (raw) images."""
    r = Rng(11)
    d = tmp_path / "mnist"
    d.mkdir()

    def images(labels):
        # one bright 4-pixel-wide column per class plus noise
        n = len(labels)
        img = (r.uniform(n * 784).reshape(n, 28, 28) * 60).astype(np.uint8)
        for i, y in enumerate(labels):
            img[i, :, 2 + 2 * y : 4 + 2 * y] = 250
        return img

    train_labels = np.arange(60) % 10
    test_labels = np.arange(20) % 10
    write_idx(d / "train-images-idx3-ubyte.gz", 0x803, images(train_labels), gz=True)
    write_idx(d / "train-labels-idx1-ubyte.gz", 0x801, train_labels, gz=True)
    write_idx(d / "t10k-images-idx3-ubyte", 0x803, images(test_labels))
    write_idx(d / "t10k-labels-idx1-ubyte", 0x801, test_labels)
    return d
