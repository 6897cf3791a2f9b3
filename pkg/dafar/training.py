# dafar/training.py
# Joint training of victim + feedback decoder, reconstruction-error harvesting,
# and semi-supervised training of the anomaly detector.
#
# CONTRACT:
# - joint_loss = mean over batch of [ λ·‖x − D(E(x))‖₂ + CE(p(x), F(E(x))) ].
#   The reconstruction term is a per-sample L2 norm, not a per-pixel MSE, so it
#   scales with sqrt(input dim) (28 for MNIST, ~55 for CIFAR-10).
# - Non-finite losses raise NumericalDivergenceError; nothing is stepped.
# - Epoch checkpoints are atomic, so an interrupted run leaves a valid file.
# - ErrorDataset can only be built from clean batches.

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Tuple

import torch
import torch.nn as nn
from tqdm import tqdm

from dafar.config import TrainConfig
from dafar.data import ImageBatch
from dafar.errors import NumericalDivergenceError
from dafar.models import DefendedModel, Detector, load_checkpoint, parameter_hash, save_checkpoint


logger = logging.getLogger(__name__)

PROBABILITY_FLOOR = 1e-12

_COLLECTED = object()


# ----------------------------
# Data structures
# ----------------------------

@dataclass(frozen=True)
class JointLoss:
    total: torch.Tensor
    cross_entropy: torch.Tensor
    reconstruction: torch.Tensor
    probabilities: torch.Tensor


@dataclass(frozen=True)
class EpochLog:
    epoch: int
    joint_loss: float
    ce_term: float
    recon_term: float
    clean_accuracy: float
    steps: int


@dataclass(frozen=True)
class DetectorEpochLog:
    epoch: int
    detector_loss: float
    steps: int


@dataclass
class TrainResult:
    model: nn.Module
    log: List[Any] = field(default_factory=list)
    optimizer_state: Optional[Dict[str, Any]] = None


@dataclass(frozen=True)
class ErrorDataset:
    """
    Flattened reconstruction errors δ = x − D(E(x)) of clean samples.

    Only collect_errors() and split() can build one; direct construction
    raises, so adversarial or noisy inputs never reach detector training.
    """
    records: torch.Tensor
    provenance: str
    model_hash: str
    _origin: object = field(default=None, repr=False, compare=False)

    def __post_init__(self) -> None:
        if self._origin is not _COLLECTED:
            raise ValueError("ErrorDataset must be built by collect_errors()")
        if self.provenance != "clean":
            raise ValueError(f"ErrorDataset only holds clean-sample errors (got provenance {self.provenance!r})")
        if self.records.dim() != 2:
            raise ValueError("records must be 2-D (n, flattened image size)")

    def __len__(self) -> int:
        return int(self.records.shape[0])

    @property
    def record_length(self) -> int:
        return int(self.records.shape[1])

    def split(self, held_out: int) -> Tuple["ErrorDataset", "ErrorDataset"]:
        """(first n - held_out records, last held_out records)."""
        cut = len(self) - held_out
        return (_clean_errors(self.records[:cut], self.model_hash),
                _clean_errors(self.records[cut:], self.model_hash))


def _clean_errors(records: torch.Tensor, model_hash: str) -> ErrorDataset:
    return ErrorDataset(records, "clean", model_hash, _origin=_COLLECTED)


# ----------------------------
# Losses
# ----------------------------

def cross_entropy_from_probabilities(probabilities: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Per-sample Σ p(x)·log(1/F(E(x))) with one-hot p(x) and a 1e-12 floor."""
    picked = probabilities.gather(1, labels.view(-1, 1)).squeeze(1)
    return -torch.log(picked.clamp_min(PROBABILITY_FLOOR))


def reconstruction_norms(x: torch.Tensor, reconstruction: torch.Tensor) -> torch.Tensor:
    return (x - reconstruction).flatten(1).norm(p=2, dim=1)


def joint_loss(model: DefendedModel, batch: ImageBatch, loss_weight: float = 1.0) -> JointLoss:
    if loss_weight < 0.0:
        raise ValueError(f"loss_weight must be >= 0 (got {loss_weight})")
    out = model(batch.pixels)
    ce = cross_entropy_from_probabilities(out.probabilities, batch.labels).mean()
    recon = reconstruction_norms(batch.pixels, out.reconstruction).mean()
    total = loss_weight * recon + ce
    if not torch.isfinite(total):
        raise NumericalDivergenceError(f"joint loss is not finite (ce={ce.item()}, recon={recon.item()})")
    return JointLoss(total=total, cross_entropy=ce, reconstruction=recon, probabilities=out.probabilities)


def detector_loss(detector: Detector, records: torch.Tensor) -> torch.Tensor:
    loss = (records - detector(records)).norm(p=2, dim=1).mean()
    if not torch.isfinite(loss):
        raise NumericalDivergenceError(f"detector loss is not finite ({loss.item()})")
    return loss


def make_optimizer(params: Iterable[nn.Parameter], cfg: TrainConfig) -> torch.optim.Optimizer:
    if cfg.optimizer == "adam":
        return torch.optim.Adam(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    return torch.optim.SGD(params, lr=cfg.learning_rate, momentum=cfg.momentum, weight_decay=cfg.weight_decay)


# ----------------------------
# Victim + decoder
# ----------------------------

def train_joint(
    model: DefendedModel,
    train: ImageBatch,
    cfg: TrainConfig,
    *,
    eval_batch: Optional[ImageBatch] = None,
    checkpoint_path: Optional[Path] = None,
    start_epoch: int = 0,
    optimizer_state: Optional[Dict[str, Any]] = None,
    log: Optional[List[EpochLog]] = None,
    progress: bool = True,
) -> TrainResult:
    """
    Minimize joint_loss over `train` for cfg.epochs epochs.

    Only the victim (encoder + head) and decoder are optimized; the detector,
    if present, is left untouched. clean_accuracy is measured on eval_batch
    when given, otherwise on the training batches as they are seen.
    """
    params = [p for name, p in model.named_parameters() if not name.startswith("detector.")]
    optimizer = make_optimizer(params, cfg)
    if optimizer_state is not None:
        optimizer.load_state_dict(optimizer_state)
    history: List[EpochLog] = list(log or [])

    for epoch in range(start_epoch, cfg.epochs):
        model.train()
        totals = {"joint": 0.0, "ce": 0.0, "recon": 0.0}
        seen = 0
        correct = 0
        steps = 0
        batches = train.batches(cfg.batch_size, shuffle_seed=cfg.seed * 100003 + epoch)
        n_batches = math.ceil(len(train) / cfg.batch_size)
        for batch in tqdm(batches, total=n_batches, desc=f"epoch {epoch + 1}/{cfg.epochs}",
                          leave=False, disable=not progress):
            loss = joint_loss(model, batch, cfg.loss_weight)
            optimizer.zero_grad()
            loss.total.backward()
            optimizer.step()

            n = len(batch)
            totals["joint"] += loss.total.item() * n
            totals["ce"] += loss.cross_entropy.item() * n
            totals["recon"] += loss.reconstruction.item() * n
            correct += int((loss.probabilities.argmax(1) == batch.labels).sum().item())
            seen += n
            steps += 1

        model.eval()
        if eval_batch is not None:
            accuracy = evaluate_accuracy(model, eval_batch, cfg.batch_size)
        else:
            accuracy = correct / seen if seen else float("nan")

        entry = EpochLog(
            epoch=epoch + 1,
            joint_loss=totals["joint"] / seen if seen else float("nan"),
            ce_term=totals["ce"] / seen if seen else float("nan"),
            recon_term=totals["recon"] / seen if seen else float("nan"),
            clean_accuracy=accuracy,
            steps=steps,
        )
        history.append(entry)
        logger.info("epoch %d: joint=%.4f ce=%.4f recon=%.4f acc=%.4f",
                    entry.epoch, entry.joint_loss, entry.ce_term, entry.recon_term, entry.clean_accuracy)

        if checkpoint_path is not None:
            save_checkpoint(model, checkpoint_path, extra={
                "training": {
                    "epoch": epoch + 1,
                    "optimizer": optimizer.state_dict(),
                    "log": [asdict(e) for e in history],
                },
            })

    model.eval()
    return TrainResult(model=model, log=history, optimizer_state=optimizer.state_dict())


def load_training_state(path: Path) -> Tuple[DefendedModel, int, Optional[Dict[str, Any]], List[EpochLog]]:
    """(model, completed epochs, optimizer state, log) from an epoch checkpoint."""
    model, extra = load_checkpoint(path)
    training = extra.get("training")
    if not training:
        return model, 0, None, []
    log = [EpochLog(**e) for e in training.get("log", [])]
    return model, int(training["epoch"]), training.get("optimizer"), log


def evaluate_accuracy(model: DefendedModel, batch: ImageBatch, batch_size: int = 512) -> float:
    if len(batch) == 0:
        return float("nan")
    correct = 0
    with torch.no_grad():
        for sub in batch.batches(batch_size):
            correct += int((model.predict(sub.pixels) == sub.labels).sum().item())
    return correct / len(batch)


# ----------------------------
# Detector
# ----------------------------

def collect_errors(model: DefendedModel, clean: ImageBatch, batch_size: int = 512) -> ErrorDataset:
    """flatten(x − D(E(x))) for every clean sample, with the model frozen."""
    if clean.provenance != "clean":
        raise ValueError(f"collect_errors needs clean samples (got provenance {clean.provenance!r})")
    model.eval()
    chunks: List[torch.Tensor] = []
    with torch.no_grad():
        for sub in clean.batches(batch_size):
            reconstruction = model.reconstruct(sub.pixels)
            chunks.append((sub.pixels - reconstruction).flatten(1))
    records = torch.cat(chunks) if chunks else torch.empty(0, model.spec.input_dim)
    return _clean_errors(records, parameter_hash(model))


def train_detector(
    detector: Detector,
    errors: ErrorDataset,
    cfg: TrainConfig,
    *,
    progress: bool = True,
) -> TrainResult:
    """Minimize mean ‖δ − C(δ)‖₂ over clean reconstruction-error records."""
    if errors.record_length != detector.input_dim:
        raise ValueError(f"error records have length {errors.record_length}, detector expects {detector.input_dim}")
    optimizer = make_optimizer(detector.parameters(), cfg)
    history: List[DetectorEpochLog] = []
    gen = torch.Generator().manual_seed(cfg.seed)

    for epoch in range(cfg.epochs):
        detector.train()
        order = torch.randperm(len(errors), generator=gen)
        total = 0.0
        steps = 0
        starts = range(0, len(errors), cfg.batch_size)
        for start in tqdm(starts, desc=f"detector {epoch + 1}/{cfg.epochs}", leave=False, disable=not progress):
            records = errors.records[order[start:start + cfg.batch_size]]
            loss = detector_loss(detector, records)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += loss.item() * records.shape[0]
            steps += 1

        entry = DetectorEpochLog(
            epoch=epoch + 1,
            detector_loss=total / len(errors) if len(errors) else float("nan"),
            steps=steps,
        )
        history.append(entry)
        logger.info("detector epoch %d: loss=%.4f", entry.epoch, entry.detector_loss)

    detector.eval()
    return TrainResult(model=detector, log=history)
