import gzip
import struct

import numpy as np
import pytest

from bitnn.bitcore import binarize_real
from bitnn.mnist_data import (
    BatchPlan,
    Dataset,
    IdxFormatError,
    binarize_image,
    binarize_images_pm1,
    dump_idx,
    load_idx,
    normalize,
    select_verification_set,
    verification_indices,
)

from conftest import make_fixture_dataset, requires_mnist


def write_idx_fixture(tmp_path, images, labels, prefix=""):
    """Independent byte-writer: builds IDX files with struct, no library code."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    img_path = tmp_path / f"{prefix}imgs-idx3-ubyte"
    lbl_path = tmp_path / f"{prefix}lbls-idx1-ubyte"
    with open(img_path, "wb") as f:
        f.write(struct.pack(">IIII", 2051, images.shape[0], 28, 28))
        f.write(images.tobytes())
    with open(lbl_path, "wb") as f:
        f.write(struct.pack(">II", 2049, labels.shape[0]))
        f.write(labels.tobytes())
    return img_path, lbl_path


class TestLoadIdx:
    def test_two_image_fixture_pixels_match_bytes(self, tmp_path):
        rng = np.random.default_rng(0)
        images = rng.integers(0, 256, size=(2, 28, 28)).astype(np.uint8)
        labels = np.array([3, 7], dtype=np.uint8)
        img_path, lbl_path = write_idx_fixture(tmp_path, images, labels)
        ds = load_idx(img_path, lbl_path)
        assert len(ds) == 2
        assert np.array_equal(ds.images, images)
        assert np.array_equal(ds.labels, labels)

    def test_wrong_magic_is_distinct_error(self, tmp_path):
        img_path, lbl_path = write_idx_fixture(
            tmp_path, np.zeros((1, 28, 28), np.uint8), np.zeros(1, np.uint8)
        )
        # feed the images file where labels are expected: magic 2051 != 2049
        with pytest.raises(IdxFormatError, match="bad magic 2051"):
            load_idx(img_path, img_path)

    def test_truncated_payload_reports_offset(self, tmp_path):
        img_path, lbl_path = write_idx_fixture(
            tmp_path, np.zeros((2, 28, 28), np.uint8), np.zeros(2, np.uint8)
        )
        data = img_path.read_bytes()[:-10]
        img_path.write_bytes(data)
        with pytest.raises(IdxFormatError, match="truncated image payload") as exc:
            load_idx(img_path, lbl_path)
        assert exc.value.offset == len(data)

    def test_count_mismatch(self, tmp_path):
        img_path, _ = write_idx_fixture(
            tmp_path, np.zeros((2, 28, 28), np.uint8), np.zeros(2, np.uint8)
        )
        _, lbl_path = write_idx_fixture(
            tmp_path, np.zeros((3, 28, 28), np.uint8), np.zeros(3, np.uint8), prefix="b-"
        )
        with pytest.raises(IdxFormatError, match="does not match"):
            load_idx(img_path, lbl_path)

    def test_gzip_sniffing(self, tmp_path):
        rng = np.random.default_rng(1)
        images = rng.integers(0, 256, size=(2, 28, 28)).astype(np.uint8)
        labels = np.array([1, 2], dtype=np.uint8)
        img_path, lbl_path = write_idx_fixture(tmp_path, images, labels)
        gz_img = tmp_path / "imgs.bin"  # deliberately no .gz suffix
        gz_img.write_bytes(gzip.compress(img_path.read_bytes()))
        ds = load_idx(gz_img, lbl_path)
        assert np.array_equal(ds.images, images)

    def test_roundtrip_through_dump(self, tmp_path):
        ds = make_fixture_dataset(n=12)
        img_path = tmp_path / "img"
        lbl_path = tmp_path / "lbl"
        dump_idx(ds, img_path, lbl_path)
        back = load_idx(img_path, lbl_path)
        assert np.array_equal(back.images, ds.images)
        assert np.array_equal(back.labels, ds.labels)

    @requires_mnist
    def test_canonical_test_split_has_10000(self, mnist_test):
        assert len(mnist_test) == 10000
        assert mnist_test.labels.min() == 0 and mnist_test.labels.max() == 9


class TestNormalize:
    def test_range_endpoints(self):
        img = np.zeros((28, 28), np.uint8)
        img[0, 0] = 255
        out = normalize(img)
        assert out[0] == 1.0
        assert out[1] == -1.0

    def test_midpoint_values(self):
        img = np.zeros((28, 28), np.uint8)
        img[0, 0] = 127
        img[0, 1] = 128
        out = normalize(img)
        assert out[0] == pytest.approx(127 / 127.5 - 1)  # -0.00392...
        assert out[1] == pytest.approx(128 / 127.5 - 1)  # +0.00392...
        assert out[0] < 0 < out[1]

    def test_all_zero_image(self):
        out = normalize(np.zeros((28, 28), np.uint8))
        assert out.shape == (784,)
        assert np.all(out == -1.0)

    def test_row_major_flatten(self):
        img = np.zeros((28, 28), np.uint8)
        img[1, 0] = 255  # flat index 28
        assert normalize(img)[28] == 1.0

    def test_monotone_in_pixel_value(self):
        vals = np.array([normalize(np.full((28, 28), p, np.uint8))[0] for p in range(256)])
        assert np.all(np.diff(vals) > 0)


class TestBinarizeImage:
    def test_all_255(self):
        v = binarize_image(np.full((28, 28), 255, np.uint8))
        assert v.popcount() == 784

    def test_threshold_127_128(self):
        img = np.zeros((28, 28), np.uint8)
        img[0, 0] = 127
        img[0, 1] = 128
        v = binarize_image(img)
        assert v.get_bit(0) == 0
        assert v.get_bit(1) == 1

    def test_popcount_equals_pixels_ge_128(self):
        rng = np.random.default_rng(2)
        for _ in range(10):
            img = rng.integers(0, 256, size=(28, 28)).astype(np.uint8)
            v = binarize_image(img)
            assert v.popcount() == int((img >= 128).sum())

    def test_equals_binarize_real_of_normalize(self):
        rng = np.random.default_rng(3)
        img = rng.integers(0, 256, size=(28, 28)).astype(np.uint8)
        assert binarize_image(img) == binarize_real(normalize(img))

    def test_batch_pm1_matches_single(self):
        rng = np.random.default_rng(4)
        images = rng.integers(0, 256, size=(5, 28, 28)).astype(np.uint8)
        batch = binarize_images_pm1(images)
        for i in range(5):
            assert np.array_equal(batch[i], binarize_image(images[i]).to_signs())

    def test_monotone(self):
        # raising a pixel never flips its bit 1 -> 0
        img = np.full((28, 28), 100, np.uint8)
        low = binarize_image(img).to_bits()
        img2 = img.copy()
        img2[5, 5] = 200
        high = binarize_image(img2).to_bits()
        assert np.all(high >= low)


class TestVerificationSet:
    def test_exactly_100_ten_per_digit(self):
        ds = make_fixture_dataset(n=200)
        suite = select_verification_set(ds)
        assert len(suite) == 100
        counts = np.bincount(suite.labels, minlength=10)
        assert np.all(counts == 10)
        # digit-major ordering
        assert np.array_equal(suite.labels, np.repeat(np.arange(10), 10))

    def test_missing_digit_errors_with_name(self):
        images = np.zeros((30, 28, 28), np.uint8)
        labels = np.full(30, 7, np.uint8)
        ds = Dataset(images, labels, "test")
        with pytest.raises(ValueError, match="digit 0"):
            select_verification_set(ds)

    def test_deterministic(self):
        ds = make_fixture_dataset(n=150)
        a = verification_indices(ds)
        b = verification_indices(ds)
        assert np.array_equal(a, b)

    @requires_mnist
    def test_canonical_suite(self, mnist_test):
        suite = select_verification_set(mnist_test)
        assert len(suite) == 100
        assert np.all(np.bincount(suite.labels, minlength=10) == 10)


class TestBatchPlan:
    def test_permutation_is_bijection(self):
        plan = BatchPlan(n=1000, batch_size=64, seed=7)
        for epoch in range(3):
            order = plan.epoch_order(epoch)
            assert np.array_equal(np.sort(order), np.arange(1000))

    def test_same_seed_same_sequence(self):
        a = BatchPlan(n=500, batch_size=32, seed=99)
        b = BatchPlan(n=500, batch_size=32, seed=99)
        for epoch in range(3):
            assert np.array_equal(a.epoch_order(epoch), b.epoch_order(epoch))

    def test_different_epochs_differ(self):
        plan = BatchPlan(n=500, batch_size=32, seed=99)
        assert not np.array_equal(plan.epoch_order(0), plan.epoch_order(1))

    def test_batches_cover_every_index_once(self):
        plan = BatchPlan(n=130, batch_size=64, seed=1)
        seen = np.concatenate(list(plan.batches(0)))
        assert np.array_equal(np.sort(seen), np.arange(130))
        assert plan.steps_per_epoch() == 3
