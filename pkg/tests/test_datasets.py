import gzip
from pathlib import Path

import httpx
import numpy as np
import pytest

from probekit.datasets import (
    IDX_IMAGES,
    IDX_LABELS,
    MNIST_FILES,
    Dataset,
    fetch_mnist,
    gen_separable,
    load_mnist,
    load_mnist_dir,
    one_hot,
    read_idx,
    split_fractions,
)
from probekit.exceptions import DataError, DimensionError, InputError
from probekit.tensor import Rng


# ---------- synthetic ----------
def test_separable_labels_follow_the_hidden_direction():
    ds = gen_separable(500, 16, Rng(0))
    w = ds.info["w"]
    side = (ds.inputs.astype(np.float64) @ w > 0).astype(int)
    assert np.array_equal(side, ds.class_ids)
    assert ds.inputs.shape == (500, 16)


def test_separable_classes_are_balanced():
    ds = gen_separable(10_000, 128, Rng(1))
    assert abs(int(ds.class_ids.sum()) - 5000) <= 150


def test_separable_is_deterministic():
    a, b = gen_separable(50, 4, Rng(7)), gen_separable(50, 4, Rng(7))
    assert a.inputs.tobytes() == b.inputs.tobytes()


def test_split_fractions():
    ds = split_fractions(gen_separable(10_000, 4, Rng(2)))
    assert len(ds.split("train")) == 8000
    assert len(ds.split("validation")) == 1000
    assert len(ds.split("test")) == 1000
    with pytest.raises(InputError):
        split_fractions(ds, (0.5, 0.5, 0.5))


def test_dataset_rejects_misaligned_rows_and_unknown_tags():
    with pytest.raises(DimensionError):
        Dataset(np.zeros((3, 2)), np.zeros((2, 2)))
    with pytest.raises(InputError):
        Dataset(np.zeros((1, 2)), np.zeros((1, 2)), ["holdout"])
    with pytest.raises(InputError):
        Dataset(np.zeros((1, 2)), np.zeros((1, 2))).split("dev")


def test_one_hot_rejects_out_of_range():
    assert one_hot(np.array([2, 0]), 3).tolist() == [[0, 0, 1], [1, 0, 0]]
    with pytest.raises(InputError):
        one_hot(np.array([3]), 3)


# ---------- IDX ----------
@pytest.mark.parametrize("gz", [False, True])
def test_read_idx_raw_and_gzip(tmp_path, idx_writer, gz):
    data = np.arange(2 * 3 * 4, dtype=np.uint8).reshape(2, 3, 4)
    path = idx_writer(tmp_path / "x", IDX_IMAGES, data, gz=gz)
    assert np.array_equal(read_idx(path, IDX_IMAGES), data)


def test_read_idx_bad_magic(tmp_path, idx_writer):
    path = idx_writer(tmp_path / "labels", IDX_LABELS, np.arange(5))
    with pytest.raises(DataError) as exc:
        read_idx(path, IDX_IMAGES)
    assert "magic" in str(exc.value)


def test_read_idx_truncated(tmp_path, idx_writer):
    path = idx_writer(tmp_path / "x", IDX_IMAGES, np.zeros((4, 3, 3)))
    path.write_bytes(path.read_bytes()[:-5])
    with pytest.raises(DataError) as exc:
        read_idx(path, IDX_IMAGES)
    assert "truncated" in str(exc.value)
    short = tmp_path / "short"
    short.write_bytes(b"\x00\x00")
    with pytest.raises(DataError):
        read_idx(short, IDX_IMAGES)


def test_read_idx_corrupt_gzip(tmp_path):
    path = tmp_path / "broken.gz"
    path.write_bytes(gzip.compress(b"\x00\x00\x08\x01" + b"\x00" * 40)[:-12])
    with pytest.raises(DataError):
        read_idx(path, IDX_LABELS)


def test_read_idx_missing_file(tmp_path):
    with pytest.raises(DataError) as exc:
        read_idx(tmp_path / "nope", IDX_LABELS)
    assert "nope" in str(exc.value)


def test_load_mnist_count_mismatch(tmp_path, idx_writer):
    images = idx_writer(tmp_path / "img", IDX_IMAGES, np.zeros((3, 28, 28)))
    labels = idx_writer(tmp_path / "lab", IDX_LABELS, np.zeros(4))
    with pytest.raises(DataError):
        load_mnist(images, labels)


def test_load_mnist_scales_pixels(tmp_path, idx_writer):
    pixels = np.zeros((2, 28, 28), dtype=np.uint8)
    pixels[1] = 255
    images = idx_writer(tmp_path / "img", IDX_IMAGES, pixels)
    labels = idx_writer(tmp_path / "lab", IDX_LABELS, np.array([3, 7]))
    ds = load_mnist(images, labels, validation_size=1)
    assert ds.inputs.shape == (2, 28, 28, 1)
    assert ds.inputs.min() == -0.5 and ds.inputs.max() == 0.5
    assert ds.class_ids.tolist() == [3, 7]
    assert ds.splits.tolist() == ["train", "validation"]


def test_load_mnist_dir_splits(mnist_dir):
    ds = load_mnist_dir(mnist_dir, validation_size=10)
    assert len(ds.split("train")) == 50
    assert len(ds.split("validation")) == 10
    assert len(ds.split("test")) == 20
    assert ds.num_classes == 10
    assert -0.5 <= ds.inputs.min() and ds.inputs.max() <= 0.5


def test_load_mnist_dir_missing_file(mnist_dir):
    (mnist_dir / "t10k-labels-idx1-ubyte").unlink()
    with pytest.raises(DataError) as exc:
        load_mnist_dir(mnist_dir)
    assert "t10k-labels-idx1-ubyte" in str(exc.value)


# ---------- download ----------
def _payloads():
    return {f"/mnist/{stem}.gz": gzip.compress(stem.encode()) for stem in MNIST_FILES.values()}


def test_fetch_mnist_downloads_every_file(tmp_path):
    payloads = _payloads()
    seen = []

    def handler(request: httpx.Request) -> httpx.Response:
        seen.append(request.url.path)
        return httpx.Response(200, content=payloads[request.url.path])

    with httpx.Client(transport=httpx.MockTransport(handler)) as client:
        paths = fetch_mnist(tmp_path, "https://example.test/mnist/", client=client)
    assert len(paths) == 4
    assert sorted(seen) == sorted(payloads)
    for p in paths:
        assert p.read_bytes() == payloads[f"/mnist/{p.name}"]
    assert not list(tmp_path.glob("*.part"))


def test_fetch_mnist_skips_existing_files(tmp_path):
    (tmp_path / "train-images-idx3-ubyte").write_bytes(b"already here")
    seen = []

    def handler(request: httpx.Request) -> httpx.Response:
        seen.append(request.url.path)
        return httpx.Response(200, content=b"x")

    with httpx.Client(transport=httpx.MockTransport(handler)) as client:
        paths = fetch_mnist(tmp_path, "https://example.test/mnist", client=client)
    assert len(seen) == 3
    assert paths[0].name == "train-images-idx3-ubyte"
    assert paths[0].read_bytes() == b"already here"


def test_fetch_mnist_404_raises_data_error(tmp_path):
    def handler(request: httpx.Request) -> httpx.Response:
        return httpx.Response(404, json={"error": "gone"})

    with httpx.Client(transport=httpx.MockTransport(handler)) as client:
        with pytest.raises(DataError) as exc:
            fetch_mnist(tmp_path, "https://example.test/mnist", client=client)
    assert "not found" in str(exc.value)


def test_fetch_mnist_server_error_and_transport_failure(tmp_path):
    def failing(request: httpx.Request) -> httpx.Response:
        return httpx.Response(503)

    def broken(request: httpx.Request) -> httpx.Response:
        raise httpx.ConnectError("no route", request=request)

    with httpx.Client(transport=httpx.MockTransport(failing)) as client:
        with pytest.raises(DataError) as exc:
            fetch_mnist(tmp_path, "https://example.test/mnist", client=client)
    assert "503" in str(exc.value)
    with httpx.Client(transport=httpx.MockTransport(broken)) as client:
        with pytest.raises(DataError):
            fetch_mnist(tmp_path / "other", "https://example.test/mnist", client=client)


def test_fetch_mnist_write_failure_leaves_no_partial_file(tmp_path, monkeypatch):
    def full_disk(self, target):
        raise OSError("No space left on device")

    monkeypatch.setattr(Path, "replace", full_disk)

    def handler(request: httpx.Request) -> httpx.Response:
        return httpx.Response(200, content=b"payload")

    with httpx.Client(transport=httpx.MockTransport(handler)) as client:
        with pytest.raises(DataError) as exc:
            fetch_mnist(tmp_path, "https://example.test/mnist", client=client)
    assert "No space left" in str(exc.value)
    assert list(tmp_path.iterdir()) == []
