"""Datasets: the separable Gaussian task, MNIST IDX loading and downloading.

Highlights
----------
- ``Dataset``: row-aligned inputs, one-hot labels and a split tag per row
- ``gen_separable``: X ~ N(0, I), y = sign(x.w) for one hidden direction w
- ``read_idx`` / ``load_mnist`` / ``load_mnist_dir``: big-endian IDX files, raw or gzip
- ``fetch_mnist``: download the four MNIST archives with httpx
"""

import gzip
import logging
import struct
import zlib
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import httpx
import numpy as np

from .exceptions import DataError, DimensionError, InputError
from .tensor import Rng

logger = logging.getLogger(__name__)

SPLITS = ("train", "validation", "test")
IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801
MNIST_BASE_URL = "https://storage.googleapis.com/cvdf-datasets/mnist/"
MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}

PathLike = Union[str, Path]


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise InputError(f"labels must lie in [0, {num_classes}), got [{labels.min()}, {labels.max()}]")
    out = np.zeros((labels.shape[0], num_classes), dtype=np.float32)
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


class Dataset:
    """Inputs, one-hot labels and a split tag per example.

    Parameters
    ----------
    inputs : ndarray, n×...
    labels : ndarray, n×d one-hot
    splits : sequence of str, optional
        One of ``train``/``validation``/``test`` per row; defaults to all ``train``.
    info : dict, optional
        Generator metadata (e.g. the separating direction ``w``).
    """

    def __init__(
        self,
        inputs: np.ndarray,
        labels: np.ndarray,
        splits: Optional[Sequence[str]] = None,
        info: Optional[Dict[str, Any]] = None,
    ):
        self.inputs = np.asarray(inputs, dtype=np.float32)
        self.labels = np.asarray(labels, dtype=np.float32)
        if self.labels.ndim != 2 or self.labels.shape[0] != self.inputs.shape[0]:
            raise DimensionError(
                f"inputs {self.inputs.shape} and labels {self.labels.shape} are not row-aligned"
            )
        tags = np.full(len(self.inputs), "train", dtype=object) if splits is None else np.asarray(splits, dtype=object)
        if tags.shape != (len(self.inputs),):
            raise DimensionError(f"{tags.shape[0]} split tags for {len(self.inputs)} rows")
        unknown = set(tags.tolist()) - set(SPLITS)
        if unknown:
            raise InputError(f"unknown split tags {sorted(unknown)}")
        self.splits = tags
        self.info = dict(info or {})

    def __len__(self) -> int:
        return len(self.inputs)

    @property
    def num_classes(self) -> int:
        return self.labels.shape[1]

    @property
    def class_ids(self) -> np.ndarray:
        return self.labels.argmax(axis=1)

    def subset(self, indices: np.ndarray) -> "Dataset":
        return Dataset(self.inputs[indices], self.labels[indices], self.splits[indices], self.info)

    def split(self, tag: str) -> "Dataset":
        if tag not in SPLITS:
            raise InputError(f"unknown split {tag!r}, expected one of {SPLITS}")
        return self.subset(np.flatnonzero(self.splits == tag))

    def head(self, n: Optional[int]) -> "Dataset":
        return self if n is None or n >= len(self) else self.subset(np.arange(n))

    def __repr__(self) -> str:
        counts = {t: int(np.sum(self.splits == t)) for t in SPLITS}
        return f"Dataset(n={len(self)}, input_shape={self.inputs.shape[1:]}, classes={self.num_classes}, splits={counts})"


def gen_separable(n: int, d: int, rng: Rng) -> Dataset:
    """Gaussian points labelled by the side of a random hyperplane through the origin.

    ``info["w"]`` holds the direction; class 1 means x.w > 0.
    """
    if n < 1 or d < 1:
        raise InputError(f"gen_separable: n and d must be >= 1, got {n}, {d}")
    w = rng.normal(d)
    x = rng.normal((n, d))
    dots = x @ w
    while True:
        zero = np.flatnonzero(dots == 0.0)
        if zero.size == 0:
            break
        x[zero] = rng.normal((zero.size, d))
        dots[zero] = x[zero] @ w
    return Dataset(x, one_hot((dots > 0).astype(np.int64), 2), info={"w": w})


def split_fractions(dataset: Dataset, fractions: Tuple[float, float, float] = (0.8, 0.1, 0.1)) -> Dataset:
    """Tag consecutive rows train/validation/test in the given proportions."""
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise InputError(f"split fractions must be three non-negative numbers summing to 1, got {fractions}")
    n = len(dataset)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    tags = np.array(["train"] * n_train + ["validation"] * n_val + ["test"] * (n - n_train - n_val), dtype=object)
    return Dataset(dataset.inputs, dataset.labels, tags, dataset.info)


# ---------- IDX ----------
def _read_bytes(path: Path) -> bytes:
    if not path.exists():
        raise DataError(f"missing data file: {path}")
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        try:
            return gzip.decompress(raw)
        except (OSError, EOFError, zlib.error) as exc:
            raise DataError(f"{path}: corrupt gzip stream ({exc})") from exc
    return raw


def read_idx(path: PathLike, magic: int) -> np.ndarray:
    """uint8 array stored in an IDX file whose header must carry ``magic``."""
    path = Path(path)
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise DataError(f"{path}: truncated IDX header")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise DataError(f"{path}: bad magic {found:#010x}, expected {magic:#010x}")
    rank = magic & 0xFF
    header = 4 + 4 * rank
    if len(raw) < header:
        raise DataError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{rank}I", raw[4:header])
    count = int(np.prod(dims, dtype=np.int64))
    if len(raw) - header < count:
        raise DataError(f"{path}: truncated, expected {count} bytes of data, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_mnist(
    image_file: PathLike,
    label_file: PathLike,
    validation_size: int = 10_000,
    tag: str = "train",
) -> Dataset:
    """28×28×1 images scaled to [-0.5, 0.5] with one-hot labels.

    With ``tag="train"`` the last ``validation_size`` rows are tagged validation.
    """
    images = read_idx(image_file, IDX_IMAGES)
    labels = read_idx(label_file, IDX_LABELS)
    if images.shape[0] != labels.shape[0]:
        raise DataError(
            f"{image_file} has {images.shape[0]} images but {label_file} has {labels.shape[0]} labels"
        )
    if labels.size and labels.max() > 9:
        raise DataError(f"{label_file}: label {labels.max()} outside 0..9")
    x = (images.astype(np.float32) / 255.0 - 0.5)[..., None]
    n = len(x)
    if tag == "train":
        held = min(validation_size, n)
        tags = ["train"] * (n - held) + ["validation"] * held
    else:
        tags = [tag] * n
    return Dataset(x, one_hot(labels, 10), tags)


def _locate(data_dir: Path, stem: str) -> Path:
    for candidate in (data_dir / stem, data_dir / f"{stem}.gz"):
        if candidate.exists():
            return candidate
    raise DataError(f"missing MNIST file: {data_dir / stem}[.gz]")


def load_mnist_dir(data_dir: PathLike, validation_size: int = 10_000) -> Dataset:
    """Train (minus validation) + validation + test from the four standard files."""
    data_dir = Path(data_dir)
    train = load_mnist(
        _locate(data_dir, MNIST_FILES["train_images"]),
        _locate(data_dir, MNIST_FILES["train_labels"]),
        validation_size,
    )
    test = load_mnist(
        _locate(data_dir, MNIST_FILES["test_images"]),
        _locate(data_dir, MNIST_FILES["test_labels"]),
        tag="test",
    )
    logger.info("Loaded MNIST from %s: %r", data_dir, train)
    return Dataset(
        np.concatenate([train.inputs, test.inputs]),
        np.concatenate([train.labels, test.labels]),
        np.concatenate([train.splits, test.splits]),
    )


# ---------- Download ----------
def _check_response(resp: httpx.Response) -> None:
    """Map HTTP failures to DataError."""
    status = resp.status_code
    if status == 404:
        raise DataError(f"not found: {resp.request.url}")
    if status >= 400:
        raise DataError(f"{status} while fetching {resp.request.url}")


def fetch_mnist(
    data_dir: PathLike,
    base_url: str = MNIST_BASE_URL,
    client: Optional[httpx.Client] = None,
    timeout: float = 60.0,
) -> List[Path]:
    """Download the gzip IDX files that are not already present; returns all four paths."""
    data_dir = Path(data_dir)
    try:
        data_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {data_dir}: {exc}") from exc
    owned = client is None
    http = client if client is not None else httpx.Client(timeout=timeout, follow_redirects=True)
    paths: List[Path] = []
    try:
        for stem in MNIST_FILES.values():
            existing = [p for p in (data_dir / stem, data_dir / f"{stem}.gz") if p.exists()]
            if existing:
                paths.append(existing[0])
                continue
            url = f"{base_url.rstrip('/')}/{stem}.gz"
            logger.info("GET %s", url)
            try:
                resp = http.get(url)
            except httpx.HTTPError as exc:
                raise DataError(f"download of {url} failed: {exc}") from exc
            _check_response(resp)
            target = data_dir / f"{stem}.gz"
            partial = target.with_suffix(".gz.part")
            try:
                partial.write_bytes(resp.content)
                partial.replace(target)
            except OSError as exc:
                partial.unlink(missing_ok=True)
                raise DataError(f"cannot write {target}: {exc}") from exc
            paths.append(target)
    finally:
        if owned:
            http.close()
    return paths
