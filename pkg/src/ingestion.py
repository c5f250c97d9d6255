# pemn/src/ingestion.py

import gzip
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from src.protogen import rng_stream

logger = logging.getLogger(__name__)

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
CIFAR_RECORD = 3073
CIFAR_SHAPE = (3, 32, 32)

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
CIFAR10_TRAIN = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR10_TEST = ("test_batch.bin",)


class DatasetError(ValueError):
    """Base class for malformed dataset files."""


class IdxMagicError(DatasetError):
    pass


class IdxTruncatedError(DatasetError):
    pass


class IdxConsistencyError(DatasetError):
    pass


class CifarFormatError(DatasetError):
    pass


@dataclass
class Dataset:
    """Train/test splits as [n, ...] float32 tensors plus integer labels."""
    name: str
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    num_classes: int
    mean: np.ndarray = field(default_factory=lambda: np.zeros(1, dtype=np.float32))
    std: np.ndarray = field(default_factory=lambda: np.ones(1, dtype=np.float32))

    def __post_init__(self):
        for labels in (self.y_train, self.y_test):
            if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
                raise DatasetError(f"{self.name}: labels outside [0, {self.num_classes})")

    @property
    def input_shape(self) -> Tuple[int, ...]:
        return tuple(self.x_train.shape[1:])

    @property
    def num_train(self) -> int:
        return int(self.x_train.shape[0])

    @property
    def num_test(self) -> int:
        return int(self.x_test.shape[0])


def _open(path: Path):
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def load_idx(path) -> np.ndarray:
    """Parse one IDX file (images: [n, rows, cols], labels: [n]) of unsigned bytes."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"No such IDX file: {path}")
    with _open(path) as f:
        data = f.read()
    if len(data) < 4:
        raise IdxTruncatedError(f"{path}: file too short for a magic number")
    (magic,) = struct.unpack(">I", data[:4])
    if magic == IDX_IMAGE_MAGIC:
        ndim = 3
    elif magic == IDX_LABEL_MAGIC:
        ndim = 1
    else:
        raise IdxMagicError(f"{path}: magic number mismatch ({magic:#010x})")
    header = 4 + 4 * ndim
    if len(data) < header:
        raise IdxTruncatedError(f"{path}: header truncated")
    dims = struct.unpack(f">{ndim}I", data[4:header])
    count = int(np.prod(dims))
    if len(data) - header < count:
        raise IdxTruncatedError(f"{path}: expected {count} payload bytes, found {len(data) - header}")
    return np.frombuffer(data, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_idx_pair(images_path, labels_path) -> Tuple[np.ndarray, np.ndarray]:
    """Images as [n, 1, rows, cols] uint8 and matching labels."""
    images = load_idx(images_path)
    labels = load_idx(labels_path)
    if images.ndim != 3:
        raise IdxMagicError(f"{images_path}: not an image file")
    if labels.ndim != 1:
        raise IdxMagicError(f"{labels_path}: not a label file")
    if images.shape[0] != labels.shape[0]:
        raise IdxConsistencyError(
            f"{images.shape[0]} images in {images_path} but {labels.shape[0]} labels in {labels_path}")
    return images[:, None, :, :], labels.astype(np.int64)


def load_cifar_bin(path, num_classes: int = 10) -> Tuple[np.ndarray, np.ndarray]:
    """CIFAR binary batch: records of 1 label byte + 3072 channel-planar pixels."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"No such CIFAR batch: {path}")
    data = path.read_bytes()
    if len(data) % CIFAR_RECORD:
        raise CifarFormatError(f"{path}: size {len(data)} is not a multiple of {CIFAR_RECORD}")
    records = np.frombuffer(data, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    if labels.size and labels.max() >= num_classes:
        raise CifarFormatError(f"{path}: label {labels.max()} outside [0, {num_classes})")
    images = records[:, 1:].reshape((-1,) + CIFAR_SHAPE)
    return images, labels


def normalize(x_train: np.ndarray, x_test: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Per-channel standardization with statistics from the train split."""
    train = x_train.astype(np.float64)
    if train.ndim == 4:
        axes = (0, 2, 3)
        mean = train.mean(axis=axes) if train.size else np.zeros(train.shape[1])
        std = train.std(axis=axes) if train.size else np.ones(train.shape[1])
        shape = (1, -1, 1, 1)
    else:
        mean = np.array([train.mean()]) if train.size else np.zeros(1)
        std = np.array([train.std()]) if train.size else np.ones(1)
        shape = (1,) * train.ndim
    std = np.where(std > 0, std, 1.0)
    m, s = mean.reshape(shape), std.reshape(shape)
    out_train = ((train - m) / s).astype(np.float32)
    out_test = ((x_test.astype(np.float64) - m) / s).astype(np.float32)
    return out_train, out_test, mean.astype(np.float32), std.astype(np.float32)


def synth_blobs(classes: int, n: int, dim: int, seed: int, separation: float = 10.0,
                n_test: Optional[int] = None) -> Dataset:
    """Gaussian blobs (unit variance) with class means `separation` apart.

    Class c is centred on (separation / sqrt(2)) * e_c, so any two means are
    exactly `separation` standard deviations apart.
    """
    if classes < 1 or dim < classes:
        raise ValueError(f"need 1 <= classes <= dim, got classes={classes}, dim={dim}")
    n_test = n if n_test is None else n_test
    rng = rng_stream(seed, 0)
    means = np.eye(classes, dim) * (separation / np.sqrt(2.0))

    def split(count: int):
        labels = rng.integers(0, classes, size=count)
        points = means[labels] + rng.standard_normal((count, dim))
        return points.astype(np.float32), labels.astype(np.int64)

    x_train, y_train = split(n)
    x_test, y_test = split(n_test)
    return Dataset("blobs", x_train, y_train, x_test, y_test, classes)


class DatasetIngestion:
    """Loads the named datasets from a local directory (no downloads)."""

    def __init__(self, data_dir):
        data_dir = Path(data_dir)
        if not data_dir.is_dir():
            raise FileNotFoundError(f"No such directory: {data_dir}")
        self.data_dir = data_dir

    def _find(self, name: str) -> Path:
        for candidate in (self.data_dir / name, self.data_dir / f"{name}.gz"):
            if candidate.is_file():
                return candidate
        raise FileNotFoundError(f"No such file: {self.data_dir / name}")

    def load_mnist(self) -> Dataset:
        splits = {}
        for split, (images, labels) in MNIST_FILES.items():
            splits[split] = load_idx_pair(self._find(images), self._find(labels))
        x_train, x_test, mean, std = normalize(splits["train"][0], splits["test"][0])
        logger.info(f"Loaded MNIST: {x_train.shape[0]} train / {x_test.shape[0]} test")
        return Dataset("mnist", x_train, splits["train"][1], x_test, splits["test"][1], 10, mean, std)

    def load_cifar10(self) -> Dataset:
        folder = self.data_dir / "cifar-10-batches-bin"
        root = folder if folder.is_dir() else self.data_dir

        def read(names):
            parts = [load_cifar_bin(self._locate(root, name)) for name in names]
            return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])

        x_train, y_train = read(CIFAR10_TRAIN)
        x_test, y_test = read(CIFAR10_TEST)
        x_train, x_test, mean, std = normalize(x_train, x_test)
        logger.info(f"Loaded CIFAR-10: {x_train.shape[0]} train / {x_test.shape[0]} test")
        return Dataset("cifar10", x_train, y_train, x_test, y_test, 10, mean, std)

    @staticmethod
    def _locate(root: Path, name: str) -> Path:
        path = root / name
        if not path.is_file():
            raise FileNotFoundError(f"No such file: {path}")
        return path


def load_dataset(name: str, data_dir=None, seed: int = 0, blob_samples: int = 2000) -> Dataset:
    """Dataset by CLI name; blobs are generated, the others read from data_dir."""
    if name == "blobs":
        return synth_blobs(classes=2, n=blob_samples, dim=16, seed=seed)
    if data_dir is None:
        raise ValueError(f"dataset {name} needs a data directory")
    ingestion = DatasetIngestion(data_dir)
    if name == "mnist":
        return ingestion.load_mnist()
    if name == "cifar10":
        return ingestion.load_cifar10()
    raise ValueError(f"Unknown dataset: {name}")


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array as an IDX file (3-D images or 1-D labels)."""
    array = np.asarray(array, dtype=np.uint8)
    magic = {3: IDX_IMAGE_MAGIC, 1: IDX_LABEL_MAGIC}.get(array.ndim)
    if magic is None:
        raise ValueError(f"IDX writer supports 1-D or 3-D arrays, got {array.ndim}-D")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = struct.pack(f">I{array.ndim}I", magic, *array.shape)
    path.write_bytes(header + array.tobytes())
