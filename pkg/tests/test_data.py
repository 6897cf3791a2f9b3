from pathlib import Path

import numpy as np
import pytest
import torch

from dafar import data
from dafar.data import ImageBatch, batch_hash, concat_batches, load_dataset, normalize_bytes, read_cifar_batch
from dafar.errors import BadMagicError, DatasetFileMissingError, ShapeMismatchError, TruncatedRecordError


def test_mnist_loads_in_file_order(mnist_dir):
    train = load_dataset("mnist", "train", mnist_dir)
    test = load_dataset("mnist", "test", mnist_dir)
    assert train.pixels.shape == (32, 1, 28, 28)
    assert test.pixels.shape == (16, 1, 28, 28)
    assert train.labels.dtype == torch.int64
    assert train.provenance == "clean"
    assert float(train.pixels.min()) >= -1.0 and float(train.pixels.max()) <= 1.0


def test_pixel_scaling():
    raw = np.array([0, 127, 255], dtype=np.uint8)
    assert normalize_bytes(raw).tolist() == pytest.approx([-1.0, 127 / 127.5 - 1.0, 1.0])


def test_gzipped_idx_is_read(tmp_path, idx_writers):
    write_images, write_labels = idx_writers
    images = np.full((3, 28, 28), 255, dtype=np.uint8)
    write_images(tmp_path / "t10k-images-idx3-ubyte", images, compress=True)
    write_labels(tmp_path / "t10k-labels-idx1-ubyte", np.array([1, 2, 3]))
    batch = load_dataset("mnist", "test", tmp_path)
    assert batch.labels.tolist() == [1, 2, 3]
    assert bool((batch.pixels == 1.0).all())


def test_bad_magic(tmp_path, idx_writers):
    write_images, _ = idx_writers
    path = write_images(tmp_path / "images", np.zeros((2, 4, 4), dtype=np.uint8), magic=0x00000801)
    with pytest.raises(BadMagicError):
        data.read_idx_images(path)


def test_truncated_images(tmp_path, idx_writers):
    write_images, _ = idx_writers
    path = write_images(tmp_path / "images", np.zeros((2, 4, 4), dtype=np.uint8))
    path.write_bytes(path.read_bytes()[:-5])
    with pytest.raises(TruncatedRecordError):
        data.read_idx_images(path)


def test_image_label_count_mismatch(tmp_path, idx_writers):
    write_images, write_labels = idx_writers
    write_images(tmp_path / "t10k-images-idx3-ubyte", np.zeros((3, 28, 28), dtype=np.uint8))
    write_labels(tmp_path / "t10k-labels-idx1-ubyte", np.array([0, 1]))
    with pytest.raises(TruncatedRecordError):
        load_dataset("mnist", "test", tmp_path)


def test_missing_file(tmp_path):
    with pytest.raises(DatasetFileMissingError):
        load_dataset("mnist", "train", tmp_path)
    with pytest.raises(FileNotFoundError):
        load_dataset("cifar10", "test", tmp_path)


def test_cifar_record_layout(tmp_path, monkeypatch):
    monkeypatch.setattr(data, "CIFAR_RECORDS_PER_FILE", 2)
    records = np.zeros((2, data.CIFAR_RECORD_BYTES), dtype=np.uint8)
    records[0, 0] = 3
    records[0, 1] = 255  # first red pixel
    records[0, 1 + 1024] = 255  # first green pixel
    records[1, 0] = 9
    (tmp_path / "test_batch.bin").write_bytes(records.tobytes())

    batch = load_dataset("cifar10", "test", tmp_path)
    assert batch.pixels.shape == (2, 3, 32, 32)
    assert batch.labels.tolist() == [3, 9]
    assert batch.pixels[0, 0, 0, 0].item() == 1.0
    assert batch.pixels[0, 1, 0, 0].item() == 1.0
    assert batch.pixels[0, 2, 0, 0].item() == -1.0


def test_cifar_partial_record(tmp_path):
    path = tmp_path / "test_batch.bin"
    path.write_bytes(b"\x00" * (data.CIFAR_RECORD_BYTES + 10))
    with pytest.raises(TruncatedRecordError):
        read_cifar_batch(path)


def test_unknown_dataset_and_split(tmp_path):
    with pytest.raises(ValueError):
        load_dataset("svhn", "train", tmp_path)
    with pytest.raises(ValueError):
        load_dataset("mnist", "validation", tmp_path)


def test_image_batch_validation():
    with pytest.raises(ValueError, match="\\[-1, 1\\]"):
        ImageBatch(torch.full((1, 1, 2, 2), 1.5), torch.tensor([0]))
    with pytest.raises(ShapeMismatchError):
        ImageBatch(torch.zeros(2, 1, 2, 2), torch.tensor([0]))
    with pytest.raises(ShapeMismatchError):
        ImageBatch(torch.zeros(2, 4), torch.tensor([0, 1]))


def test_batches_cover_everything_and_shuffle_deterministically(toy_clean):
    plain = list(toy_clean.batches(5))
    assert [len(b) for b in plain] == [5] * 6 + [2]
    assert torch.equal(torch.cat([b.pixels for b in plain]), toy_clean.pixels)

    a = torch.cat([b.labels for b in toy_clean.batches(5, shuffle_seed=3)])
    b = torch.cat([b.labels for b in toy_clean.batches(5, shuffle_seed=3)])
    assert torch.equal(a, b)
    assert sorted(a.tolist()) == sorted(toy_clean.labels.tolist())


def test_subset_take_and_concat(toy_clean):
    head = toy_clean.take(4)
    picked = toy_clean.subset([0, 2])
    assert len(head) == 4
    assert torch.equal(picked.pixels[1], toy_clean.pixels[2])
    assert len(toy_clean.take(1000)) == len(toy_clean)
    joined = concat_batches([head, picked])
    assert len(joined) == 6


def test_batch_hash_is_content_addressed(toy_clean):
    assert batch_hash(toy_clean) == batch_hash(toy_clean.subset(slice(None)))
    assert batch_hash(toy_clean) != batch_hash(toy_clean.take(31))


def real_root(dataset):
    root = Path("data") / dataset
    if not root.is_dir():
        pytest.skip(f"{dataset} files not found under {root}")
    return root


@pytest.mark.dataset
def test_real_mnist_counts():
    root = real_root("mnist")
    test = load_dataset("mnist", "test", root)
    assert len(test) == data.MNIST_COUNTS["test"]
    assert test.pixels.shape[1:] == (1, 28, 28)
    assert float(test.pixels.min()) == -1.0 and float(test.pixels.max()) == 1.0


@pytest.mark.dataset
def test_real_cifar10_test_split():
    root = real_root("cifar10")
    test = load_dataset("cifar10", "test", root)
    assert len(test) == 10000
    assert int(test.labels.min()) >= 0 and int(test.labels.max()) <= 9
