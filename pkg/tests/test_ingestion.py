# pemn/tests/test_ingestion.py

import gzip
import shutil
import struct
import tempfile
from pathlib import Path

import numpy as np
import pytest

from src.ingestion import (
    CifarFormatError,
    DatasetError,
    DatasetIngestion,
    IdxConsistencyError,
    IdxMagicError,
    IdxTruncatedError,
    MNIST_FILES,
    load_cifar_bin,
    load_dataset,
    load_idx,
    load_idx_pair,
    normalize,
    synth_blobs,
    write_idx,
)


def idx_bytes(magic, dims, payload):
    return struct.pack(f">I{len(dims)}I", magic, *dims) + bytes(payload)


class TestIdx:
    def setup_method(self):
        self.tmp = tempfile.mkdtemp()
        self.path = Path(self.tmp)

    def teardown_method(self):
        shutil.rmtree(self.tmp)

    def test_hand_built_images(self):
        path = self.path / "images"
        path.write_bytes(idx_bytes(0x803, (2, 2, 2), [0, 1, 2, 3, 250, 251, 252, 253]))
        images = load_idx(path)
        assert images.shape == (2, 2, 2)
        np.testing.assert_array_equal(images[1], [[250, 251], [252, 253]])

    def test_gzip(self):
        path = self.path / "labels.gz"
        with gzip.open(path, "wb") as f:
            f.write(idx_bytes(0x801, (3,), [7, 0, 9]))
        np.testing.assert_array_equal(load_idx(path), [7, 0, 9])

    def test_wrong_magic(self):
        path = self.path / "bad"
        path.write_bytes(idx_bytes(0x802, (1,), [0]))
        with pytest.raises(IdxMagicError):
            load_idx(path)

    def test_truncated_payload(self):
        path = self.path / "short"
        path.write_bytes(idx_bytes(0x803, (2, 2, 2), [0, 1, 2]))
        with pytest.raises(IdxTruncatedError):
            load_idx(path)

    def test_pair_count_mismatch(self):
        write_idx(self.path / "img", np.zeros((3, 2, 2)))
        write_idx(self.path / "lbl", np.zeros(2))
        with pytest.raises(IdxConsistencyError):
            load_idx_pair(self.path / "img", self.path / "lbl")

    def test_pair_shapes(self):
        write_idx(self.path / "img", np.arange(8).reshape(2, 2, 2))
        write_idx(self.path / "lbl", [1, 4])
        images, labels = load_idx_pair(self.path / "img", self.path / "lbl")
        assert images.shape == (2, 1, 2, 2)
        assert labels.dtype == np.int64

    def test_missing_file_named(self):
        with pytest.raises(FileNotFoundError, match="nothing-here"):
            load_idx(self.path / "nothing-here")


class TestCifar:
    def setup_method(self):
        self.tmp = tempfile.mkdtemp()
        self.path = Path(self.tmp)

    def teardown_method(self):
        shutil.rmtree(self.tmp)

    def test_two_records(self):
        records = bytearray()
        for label, value in ((3, 10), (9, 200)):
            records.append(label)
            records.extend(bytes([value]) * 3072)
        path = self.path / "batch.bin"
        path.write_bytes(bytes(records))
        images, labels = load_cifar_bin(path)
        assert images.shape == (2, 3, 32, 32)
        np.testing.assert_array_equal(labels, [3, 9])
        assert images[1].min() == images[1].max() == 200

    def test_empty_file(self):
        path = self.path / "empty.bin"
        path.write_bytes(b"")
        images, labels = load_cifar_bin(path)
        assert images.shape == (0, 3, 32, 32) and labels.size == 0

    def test_bad_size(self):
        path = self.path / "odd.bin"
        path.write_bytes(b"\x00" * 3074)
        with pytest.raises(CifarFormatError):
            load_cifar_bin(path)

    def test_label_out_of_range(self):
        path = self.path / "label.bin"
        path.write_bytes(bytes([10]) + b"\x00" * 3072)
        with pytest.raises(CifarFormatError):
            load_cifar_bin(path)


class TestNormalize:
    def test_per_channel_statistics(self):
        rng = np.random.default_rng(0)
        x = rng.integers(0, 256, size=(20, 3, 4, 4)).astype(np.uint8)
        train, test, mean, std = normalize(x, x[:5])
        np.testing.assert_allclose(train.mean(axis=(0, 2, 3)), 0.0, atol=1e-5)
        np.testing.assert_allclose(train.std(axis=(0, 2, 3)), 1.0, atol=1e-4)
        assert mean.shape == (3,) and test.dtype == np.float32


class TestSynthBlobs:
    def test_linear_oracle(self):
        data = synth_blobs(classes=2, n=2000, dim=16, seed=0)
        # Bayes rule for equal-variance blobs on e_0 and e_1
        predicted = (data.x_test[:, 1] > data.x_test[:, 0]).astype(int)
        assert (predicted == data.y_test).mean() >= 0.999

    def test_deterministic(self):
        a, b = synth_blobs(3, 50, 8, seed=4), synth_blobs(3, 50, 8, seed=4)
        np.testing.assert_array_equal(a.x_train, b.x_train)
        np.testing.assert_array_equal(a.y_test, b.y_test)

    def test_empty(self):
        data = synth_blobs(2, 0, 4, seed=0)
        assert data.num_train == data.num_test == 0

    def test_bad_dims(self):
        with pytest.raises(ValueError):
            synth_blobs(5, 10, 3, seed=0)


class TestDatasetIngestion:
    def setup_method(self):
        self.tmp = tempfile.mkdtemp()
        self.path = Path(self.tmp)

    def teardown_method(self):
        shutil.rmtree(self.tmp)

    def test_missing_directory(self):
        with pytest.raises(FileNotFoundError, match="no-such-dir"):
            DatasetIngestion(self.path / "no-such-dir")

    def test_load_mnist_layout(self):
        rng = np.random.default_rng(1)
        for split, n in (("train", 6), ("test", 4)):
            images, labels = MNIST_FILES[split]
            write_idx(self.path / images, rng.integers(0, 256, size=(n, 28, 28)))
            write_idx(self.path / labels, rng.integers(0, 10, size=n))
        data = load_dataset("mnist", self.path)
        assert data.input_shape == (1, 28, 28)
        assert data.num_train == 6 and data.num_test == 4
        assert data.x_train.dtype == np.float32

    def test_missing_mnist_file(self):
        with pytest.raises(FileNotFoundError, match="train-images-idx3-ubyte"):
            DatasetIngestion(self.path).load_mnist()

    def test_labels_checked(self):
        with pytest.raises(DatasetError):
            synth = synth_blobs(2, 4, 4, seed=0)
            type(synth)("x", synth.x_train, synth.y_train + 5, synth.x_test, synth.y_test, 2)

    def test_blobs_by_name(self):
        data = load_dataset("blobs", seed=1, blob_samples=30)
        assert data.input_shape == (16,) and data.num_classes == 2
