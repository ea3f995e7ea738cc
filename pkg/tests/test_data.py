"""Dataset files (IDX, CIFAR binary), batching, and the surrogate builder."""

import struct

import numpy as np
import pytest

from nftrain.data import (
    Dataset,
    DataSplit,
    batches,
    load_cifar10,
    load_idx_images,
    load_mnist,
    save_idx_images,
    save_idx_labels,
    synthetic_digits,
)
from nftrain.errors import DataFormatError
from nftrain.streams import substream


@pytest.fixture
def idx_pair(tmp_path):
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, size=(50, 28, 28), dtype=np.uint8)
    labels = rng.integers(0, 10, size=50, dtype=np.uint8)
    ip, lp = tmp_path / "img.idx", tmp_path / "lab.idx"
    save_idx_images(ip, images)
    save_idx_labels(lp, labels)
    return ip, lp, images, labels


class TestIdx:
    def test_round_trip(self, idx_pair):
        ip, lp, images, labels = idx_pair
        split = load_mnist(ip, lp)
        assert len(split) == 50
        assert split.images.shape == (50, 28, 28, 1)
        np.testing.assert_array_equal(split.labels, labels)

    def test_pixels_scaled_to_unit_interval(self, idx_pair):
        ip, lp, images, _ = idx_pair
        split = load_mnist(ip, lp)
        assert split.images.min() >= 0.0 and split.images.max() <= 1.0
        np.testing.assert_allclose(split.images[..., 0], images / 255.0, atol=1e-7)

    def test_labels_in_range(self, idx_pair):
        ip, lp, _, _ = idx_pair
        split = load_mnist(ip, lp)
        assert split.labels.min() >= 0 and split.labels.max() <= 9

    def test_bad_magic_reports_offset_zero(self, tmp_path, idx_pair):
        ip = tmp_path / "bad.idx"
        ip.write_bytes(struct.pack(">I", 0x12345678) + b"\x00" * 100)
        with pytest.raises(DataFormatError, match="offset 0"):
            load_idx_images(ip)

    def test_truncated_data_reports_offset(self, idx_pair, tmp_path):
        ip, _, _, _ = idx_pair
        raw = ip.read_bytes()
        cut = tmp_path / "cut.idx"
        cut.write_bytes(raw[: len(raw) // 2])
        with pytest.raises(DataFormatError, match="byte offset"):
            load_idx_images(cut)

    def test_count_mismatch_between_files(self, idx_pair, tmp_path):
        ip, _, _, _ = idx_pair
        lp = tmp_path / "short.idx"
        save_idx_labels(lp, np.zeros(49, dtype=np.uint8))
        with pytest.raises(DataFormatError, match="50.*49"):
            load_mnist(ip, lp)


class TestCifar10:
    def test_round_trip_and_layout(self, tmp_path):
        rng = np.random.default_rng(1)
        n = 20
        labels = rng.integers(0, 10, size=n, dtype=np.uint8)
        planes = rng.integers(0, 256, size=(n, 3, 32, 32), dtype=np.uint8)
        records = np.concatenate([labels[:, None], planes.reshape(n, -1)], axis=1)
        path = tmp_path / "batch.bin"
        path.write_bytes(records.tobytes())
        split = load_cifar10([path])
        assert split.images.shape == (n, 32, 32, 3)
        np.testing.assert_array_equal(split.labels, labels)
        np.testing.assert_allclose(split.images[3, :, :, 1], planes[3, 1] / 255.0, atol=1e-7)

    def test_truncated_record(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"\x00" * 3080)  # one record is 3073 bytes
        with pytest.raises(DataFormatError, match="3073-byte record"):
            load_cifar10([path])


class TestBatches:
    def test_covers_split_in_order_without_rng(self):
        split = DataSplit(np.arange(10, dtype=np.float32).reshape(10, 1, 1, 1), np.arange(10))
        out = list(batches(split, 4))
        assert [len(y) for _, y in out] == [4, 4, 2]
        np.testing.assert_array_equal(np.concatenate([y for _, y in out]), np.arange(10))

    def test_shuffle_is_permutation(self):
        split = DataSplit(np.arange(10, dtype=np.float32).reshape(10, 1, 1, 1), np.arange(10))
        ys = np.concatenate([y for _, y in batches(split, 3, substream(0, 99))])
        assert sorted(ys.tolist()) == list(range(10))
        assert ys.tolist() != list(range(10))


class TestSyntheticDigits:
    def test_shapes_and_ranges(self):
        ds = synthetic_digits(n_train=300, n_test=100, seed=0)
        assert ds.train.images.shape == (300, 28, 28, 1)
        assert ds.test.images.shape == (100, 28, 28, 1)
        assert ds.train.images.dtype == np.float32
        assert ds.train.images.min() >= 0 and ds.train.images.max() <= 1
        assert set(np.unique(ds.train.labels)) <= set(range(10))

    def test_deterministic(self):
        a = synthetic_digits(200, 50, seed=3)
        b = synthetic_digits(200, 50, seed=3)
        assert a.train.images.tobytes() == b.train.images.tobytes()
        assert a.test.labels.tobytes() == b.test.labels.tobytes()

    def test_all_ten_classes_present(self):
        ds = synthetic_digits(2000, 500, seed=0)
        assert len(np.unique(ds.train.labels)) == 10
        assert len(np.unique(ds.test.labels)) == 10

    def test_round_trips_through_idx_files(self, tmp_path):
        ds = synthetic_digits(100, 40, seed=1)
        quantized = np.round(ds.train.images[..., 0] * 255).astype(np.uint8)
        save_idx_images(tmp_path / "i.idx", quantized)
        save_idx_labels(tmp_path / "l.idx", ds.train.labels)
        loaded = load_mnist(tmp_path / "i.idx", tmp_path / "l.idx")
        np.testing.assert_allclose(loaded.images[..., 0], quantized / 255.0, atol=1e-7)
        np.testing.assert_array_equal(loaded.labels, ds.train.labels)
