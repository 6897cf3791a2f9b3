import gzip
import struct
from pathlib import Path

import numpy as np
import pytest
import torch

from dafar.config import (
    AttackConfig,
    BaselineConfig,
    DafarConfig,
    ExperimentConfig,
    ThresholdConfig,
    TrainConfig,
)
from dafar.data import ImageBatch
from dafar.detection import calibrate_model
from dafar.harness import ExperimentContext
from dafar.models import build_model
from dafar.verify import TOY_4x4, TOY_8x8, toy_batch


# ----------------------------
# Toy models and batches
# ----------------------------

@pytest.fixture
def toy_model():
    return build_model(TOY_4x4, seed=0).eval()


@pytest.fixture
def toy8_model():
    return build_model(TOY_8x8, seed=0).eval()


@pytest.fixture
def toy_clean():
    return toy_batch(TOY_4x4, 32, seed=1)


@pytest.fixture
def toy_predicted(toy_model):
    """Toy samples labelled with the toy model's own predictions, so all are correctly classified."""
    batch = toy_batch(TOY_4x4, 32, seed=2)
    with torch.no_grad():
        labels = toy_model.predict(batch.pixels)
    return ImageBatch(batch.pixels, labels)


@pytest.fixture
def toy_config(tmp_path):
    return DafarConfig(
        dataset="mnist",
        seed=0,
        data_root=tmp_path / "data",
        out_dir=tmp_path / "runs",
        checkpoint_dir=tmp_path / "checkpoints",
        scorer="detector",
        train=TrainConfig(epochs=1, batch_size=8),
        detector_train=TrainConfig(epochs=1, batch_size=8),
        threshold=ThresholdConfig(z=3.0, mode="population", samples=32),
        attacks={
            "fgsm": AttackConfig("fgsm", epsilon=0.3),
            "pgd": AttackConfig("pgd", epsilon=0.3, steps=3),
            "gaussian": AttackConfig("gaussian", epsilon=0.3),
        },
        experiments=ExperimentConfig(
            samples=16,
            batch_size=8,
            interference_pairs=16,
            bins=5,
            grids={"fgsm": [0.0, 0.1, 0.3], "pgd": [0.0, 0.1], "gaussian": [0.0, 0.1]},
            methods=("fgsm", "pgd"),
        ),
        baselines=BaselineConfig(train=TrainConfig(epochs=1, batch_size=8)),
    )


@pytest.fixture
def toy_context(toy_config, toy_model, toy_predicted, toy_clean):
    calibrations = {
        scorer: calibrate_model(toy_model, toy_clean, 3.0, "population", scorer)
        for scorer in ("detector", "plain_l2")
    }
    return ExperimentContext(cfg=toy_config, model=toy_model, test=toy_predicted, calibrations=calibrations)


# ----------------------------
# Synthetic dataset files
# ----------------------------

def write_idx_images(path: Path, images: np.ndarray, magic: int = 0x00000803, compress: bool = False) -> Path:
    count, rows, cols = images.shape
    data = struct.pack(">IIII", magic, count, rows, cols) + images.astype(np.uint8).tobytes()
    if compress:
        path = path.with_name(path.name + ".gz")
        path.write_bytes(gzip.compress(data))
    else:
        path.write_bytes(data)
    return path


def write_idx_labels(path: Path, labels: np.ndarray, magic: int = 0x00000801) -> Path:
    data = struct.pack(">II", magic, labels.shape[0]) + labels.astype(np.uint8).tobytes()
    path.write_bytes(data)
    return path


@pytest.fixture
def idx_writers():
    return write_idx_images, write_idx_labels


@pytest.fixture
def mnist_dir(tmp_path):
    """Tiny MNIST-shaped IDX files: 32 train and 16 test images."""
    root = tmp_path / "mnist"
    root.mkdir()
    rng = np.random.default_rng(0)
    for split, count in (("train", 32), ("t10k", 16)):
        images = rng.integers(0, 256, size=(count, 28, 28), dtype=np.uint8)
        labels = rng.integers(0, 10, size=count, dtype=np.uint8)
        write_idx_images(root / f"{split}-images-idx3-ubyte", images)
        write_idx_labels(root / f"{split}-labels-idx1-ubyte", labels)
    return root
