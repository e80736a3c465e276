import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unipert import data
from unipert.data import BatchPlan, Dataset

from conftest import MNIST_DIR, requires_mnist


def write_idx_images(path, pixels, magic=2051):
    n, h, w = pixels.shape
    path.write_bytes(struct.pack(">IIII", magic, n, h, w) + pixels.astype(np.uint8).tobytes())


def write_idx_labels(path, labels, magic=2049):
    path.write_bytes(struct.pack(">II", magic, len(labels)) + np.asarray(labels, np.uint8).tobytes())


@pytest.fixture
def idx_pair(tmp_path):
    rng = np.random.default_rng(0)
    px = rng.integers(0, 256, (7, 5, 6))
    px[0, 0, 0] = 255
    px[0, 0, 1] = 0
    lab = rng.integers(0, 10, 7)
    write_idx_images(tmp_path / "img", px)
    write_idx_labels(tmp_path / "lab", lab)
    return tmp_path / "img", tmp_path / "lab", px, lab


def test_load_mnist_parses_idx(idx_pair):
    img, lab, px, labels = idx_pair
    ds = data.load_mnist(img, lab)
    assert ds.images.shape == (7, 1, 5, 6)
    assert ds.images[0, 0, 0, 0] == 1.0 and ds.images[0, 0, 0, 1] == 0.0
    np.testing.assert_array_equal(ds.images[:, 0], px.astype(np.float32) / np.float32(255))
    np.testing.assert_array_equal(ds.labels, labels)


def test_load_mnist_gzip(tmp_path, idx_pair):
    img, lab, _, labels = idx_pair
    for p in (img, lab):
        (tmp_path / (p.name + "2.gz")).write_bytes(gzip.compress(p.read_bytes()))
    ds = data.load_mnist(tmp_path / "img2", tmp_path / "lab2")
    np.testing.assert_array_equal(ds.labels, labels)


def test_labels_passed_as_images_is_magic_mismatch(idx_pair):
    _, lab, _, _ = idx_pair
    with pytest.raises(data.MagicMismatchError):
        data.load_mnist(lab, lab)


def test_truncated_idx(tmp_path, idx_pair):
    img, lab, _, _ = idx_pair
    (tmp_path / "short").write_bytes(img.read_bytes()[:-3])
    with pytest.raises(data.TruncatedFileError):
        data.load_mnist(tmp_path / "short", lab)
    (tmp_path / "hdr").write_bytes(img.read_bytes()[:9])
    with pytest.raises(data.TruncatedFileError):
        data.load_mnist(tmp_path / "hdr", lab)


def test_count_mismatch(tmp_path, idx_pair):
    img, _, _, _ = idx_pair
    write_idx_labels(tmp_path / "lab6", [1] * 6)
    with pytest.raises(data.CountMismatchError):
        data.load_mnist(img, tmp_path / "lab6")


def test_error_classes_are_distinct():
    errs = {data.MagicMismatchError, data.TruncatedFileError, data.CountMismatchError, data.RecordSizeError}
    assert len(errs) == 4 and all(issubclass(e, data.DataError) for e in errs)


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        data.load_mnist(tmp_path / "nope", tmp_path / "nope2")


def write_cifar(root, n_per_file, first_label=6):
    rng = np.random.default_rng(1)
    for fname in data.CIFAR_FILES["train"] + data.CIFAR_FILES["val"]:
        rec = rng.integers(0, 256, (n_per_file, 3073)).astype(np.uint8)
        rec[:, 0] %= 10
        rec[0, 0] = first_label
        (root / fname).write_bytes(rec.tobytes())


def test_load_cifar10(tmp_path):
    write_cifar(tmp_path, 3)
    tr = data.load_cifar10(tmp_path, "train")
    va = data.load_cifar10(tmp_path, "val")
    assert tr.images.shape == (15, 3, 32, 32) and len(va) == 3
    assert tr.labels[0] == 6
    assert 0 <= tr.images.min() and tr.images.max() <= 1
    raw = np.frombuffer((tmp_path / "data_batch_1.bin").read_bytes(), np.uint8)
    np.testing.assert_array_equal(tr.images[0, 0, 0, :3], raw[1:4] / np.float32(255))  # R plane first
    np.testing.assert_array_equal(tr.images[0, 1, 0, 0], raw[1 + 1024] / np.float32(255))


def test_cifar_truncated_batch(tmp_path):
    write_cifar(tmp_path, 2)
    p = tmp_path / "data_batch_3.bin"
    p.write_bytes(p.read_bytes()[:-100])
    with pytest.raises(data.RecordSizeError):
        data.load_cifar10(tmp_path, "train")


def toy(n):
    return Dataset(np.arange(n, dtype=np.float32).reshape(n, 1, 1, 1), np.arange(n) % 10, "train", "toy")


def test_subset_determinism_and_full_permutation():
    ds = toy(50)
    a, b = data.subset(ds, 20, 3), data.subset(ds, 20, 3)
    np.testing.assert_array_equal(a.labels, b.labels)
    full = data.subset(ds, 50, 1)
    assert sorted(full.images.ravel().tolist()) == list(range(50))
    assert len(set(a.images.ravel().tolist())) == 20
    with pytest.raises(ValueError):
        data.subset(ds, 51, 0)


@pytest.mark.parametrize("n, bs, sizes", [(10, 4, [4, 4, 2]), (8, 4, [4, 4]), (5000, 128, [128] * 39 + [8])])
def test_batch_sizes(n, bs, sizes):
    got = [len(y) for _, y in data.batches(toy(n), BatchPlan(bs, seed=0))]
    assert got == sizes


def test_no_shuffle_keeps_order():
    xs = np.concatenate([x.ravel() for x, _ in data.batches(toy(10), BatchPlan(3, shuffle=False))])
    np.testing.assert_array_equal(xs, np.arange(10))


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 60), bs=st.integers(1, 20), seed=st.integers(0, 2**32), epochs=st.integers(1, 3))
def test_coverage_and_replay(n, bs, seed, epochs):
    ds = toy(n)
    plan = BatchPlan(bs, seed, True, epochs)
    run1 = [x.ravel().copy() for x, _ in data.batches(ds, plan)]
    run2 = [x.ravel().copy() for x, _ in data.batches(ds, plan)]
    assert all(a.tobytes() == b.tobytes() for a, b in zip(run1, run2)) and len(run1) == len(run2)
    per_epoch = -(-n // bs)
    for e in range(epochs):
        seen = np.concatenate(run1[e * per_epoch : (e + 1) * per_epoch])
        assert sorted(seen.tolist()) == list(range(n))


def test_epochs_reshuffle():
    orders = [data.epoch_order(100, 7, e) for e in range(3)]
    assert not np.array_equal(orders[0], orders[1])
    np.testing.assert_array_equal(orders[1], np.random.default_rng(8).permutation(100))


def test_step_batches_cycles_epochs():
    got = list(data.step_batches(toy(10), 4, 0, 7))
    assert [len(y) for _, y in got] == [4, 4, 2, 4, 4, 2, 4]


@requires_mnist
def test_official_mnist_shapes():
    tr = data.load_mnist_dir(MNIST_DIR, "train")
    va = data.load_mnist_dir(MNIST_DIR, "val")
    assert tr.images.shape == (60000, 1, 28, 28) and len(va) == 10000
    assert tr.images.max() == 1.0 and tr.images.min() == 0.0
    a, b = data.subset_indices(60000, 5000, 0), data.subset_indices(60000, 5000, 0)
    np.testing.assert_array_equal(a, b)
