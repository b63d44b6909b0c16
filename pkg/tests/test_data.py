import gzip

import numpy as np
import pytest

from agelock.data import (
    IMAGES_MAGIC, LABELS_MAGIC, Dataset, load_idx, read_idx, split, subsample, write_idx,
)
from agelock.errors import DataFormatError


def fixture_bytes():
    """Two 2x3 images, built by hand."""
    head = bytes.fromhex("00000803") + (2).to_bytes(4, "big") + (2).to_bytes(4, "big") + (3).to_bytes(4, "big")
    pixels = bytes([0, 1, 2, 253, 254, 255, 10, 20, 30, 40, 50, 60])
    labels = bytes.fromhex("00000801") + (2).to_bytes(4, "big") + bytes([7, 3])
    return head + pixels, labels


def test_idx_fixture_roundtrip(tmp_path):
    img, lab = fixture_bytes()
    (tmp_path / "img").write_bytes(img)
    (tmp_path / "lab").write_bytes(lab)
    ds = load_idx(tmp_path / "img", tmp_path / "lab", "test")
    assert ds.images.shape == (2, 6) and ds.split == "test"
    assert ds.images[0].tolist() == [0, 1, 2, 253, 254, 255]
    assert ds.labels.tolist() == [7, 3]
    write_idx(tmp_path / "img2", ds.images.reshape(2, 2, 3), IMAGES_MAGIC)
    write_idx(tmp_path / "lab2", ds.labels, LABELS_MAGIC)
    assert (tmp_path / "img2").read_bytes() == img
    assert (tmp_path / "lab2").read_bytes() == lab


def test_gzip_input(tmp_path):
    img, _ = fixture_bytes()
    (tmp_path / "img.gz").write_bytes(gzip.compress(img))
    assert read_idx(tmp_path / "img.gz", IMAGES_MAGIC).shape == (2, 2, 3)


def test_bad_magic(tmp_path):
    _, lab = fixture_bytes()
    (tmp_path / "lab").write_bytes(lab)
    with pytest.raises(DataFormatError, match="magic"):
        read_idx(tmp_path / "lab", IMAGES_MAGIC)


def test_truncated_and_mismatched(tmp_path):
    img, lab = fixture_bytes()
    (tmp_path / "img").write_bytes(img[:-1])
    with pytest.raises(DataFormatError):
        read_idx(tmp_path / "img", IMAGES_MAGIC)
    (tmp_path / "img").write_bytes(img)
    (tmp_path / "lab").write_bytes(bytes.fromhex("00000801") + (3).to_bytes(4, "big") + bytes([1, 2, 3]))
    with pytest.raises(DataFormatError):
        load_idx(tmp_path / "img", tmp_path / "lab")
    (tmp_path / "tiny").write_bytes(b"\x00\x00")
    with pytest.raises(DataFormatError):
        read_idx(tmp_path / "tiny", LABELS_MAGIC)


def test_dataset_invariants():
    with pytest.raises(DataFormatError):
        Dataset(np.zeros((2, 4), np.uint8), np.zeros(3, np.uint8))
    with pytest.raises(DataFormatError):
        Dataset(np.zeros((1, 4), np.uint8), np.array([10], np.uint8))
    ds = Dataset(np.full((1, 4), 255, np.uint8), np.array([1], np.uint8))
    assert ds.pixels.max() == 1.0


def synthetic(count=1000, seed=0):
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(10), count // 10).astype(np.uint8)
    rng.shuffle(labels)
    return Dataset(rng.integers(0, 256, (count, 784), dtype=np.uint8), labels)


def test_stratified_subsample_balance():
    ds = synthetic(1000)
    sub = subsample(ds, 1000, 0, stratified=True)
    assert np.bincount(sub.labels, minlength=10).tolist() == [100] * 10
    for k in (7, 95, 333):
        counts = np.bincount(subsample(ds, k, 3, stratified=True).labels, minlength=10)
        assert counts.sum() == k and counts.max() - counts.min() <= 1


def test_subsample_determinism_and_identity():
    ds = synthetic(200)
    a = subsample(ds, 50, 9)
    b = subsample(ds, 50, 9)
    np.testing.assert_array_equal(a.images, b.images)
    full = subsample(ds, 200, 1)
    assert sorted(map(bytes, full.images)) == sorted(map(bytes, ds.images))
    with pytest.raises(ValueError):
        subsample(ds, 201, 0)


def test_split_disjoint():
    ds = synthetic(100)
    ds = Dataset(ds.images, ds.labels)
    ds.images[:, 0] = np.arange(100)
    rest, val = split(ds, 20, 0)
    assert len(rest) == 80 and len(val) == 20 and val.split == "val"
    assert not set(rest.images[:, 0]) & set(val.images[:, 0])
