# dafar/detection.py
# Reconstruction errors, distances, anomaly scores, threshold calibration and
# the adversarial/clean decision.
#
# CONTRACT:
# - Scores are computed without gradients and are non-negative and finite.
# - Calibration uses the population standard deviation (divide by n).
# - Decisions are strict: score > α is adversarial, score == α is clean.
# - A calibration is bound to the model it was computed on by parameter hash.

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Any, Dict, Mapping, Sequence, Union

import numpy as np
import torch

from dafar.config import SCORERS, THRESHOLD_MODES
from dafar.data import ImageBatch
from dafar.errors import CalibrationMismatchError, ShapeMismatchError
from dafar.models import DefendedModel, Detector, parameter_hash


Pixels = Union[ImageBatch, torch.Tensor]


def _pixels(x: Pixels) -> torch.Tensor:
    return x.pixels if isinstance(x, ImageBatch) else x


# ----------------------------
# Data structures
# ----------------------------

@dataclass(frozen=True)
class ReconstructionError:
    """δ = x − D(E(x)) per sample, image-shaped, values in [-2, 2]."""
    delta: torch.Tensor
    source_ids: torch.Tensor

    def __len__(self) -> int:
        return int(self.delta.shape[0])

    def flatten(self) -> torch.Tensor:
        return self.delta.flatten(1)


@dataclass(frozen=True)
class ThresholdCalibration:
    mean: float
    std: float
    n: int
    z: float
    mode: str
    alpha: float
    scored_with: str
    model_hash: str = ""

    def __post_init__(self) -> None:
        if self.n < 2:
            raise ValueError(f"calibration needs n >= 2 (got {self.n})")
        if self.std < 0.0:
            raise ValueError("std must be >= 0")
        if self.mode not in THRESHOLD_MODES:
            raise ValueError(f"mode must be one of {list(THRESHOLD_MODES)} (got {self.mode!r})")
        if self.scored_with not in SCORERS:
            raise ValueError(f"scored_with must be one of {list(SCORERS)} (got {self.scored_with!r})")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "ThresholdCalibration":
        return cls(
            mean=float(raw["mean"]),
            std=float(raw["std"]),
            n=int(raw["n"]),
            z=float(raw["z"]),
            mode=str(raw["mode"]),
            alpha=float(raw["alpha"]),
            scored_with=str(raw["scored_with"]),
            model_hash=str(raw.get("model_hash", "")),
        )


# ----------------------------
# Errors and distances
# ----------------------------

def reconstruction_errors(model: DefendedModel, x: Pixels, batch_size: int = 512) -> ReconstructionError:
    pixels = _pixels(x)
    chunks = []
    with torch.no_grad():
        for start in range(0, pixels.shape[0], batch_size):
            sub = pixels[start:start + batch_size]
            chunks.append(sub - model.reconstruct(sub))
    delta = torch.cat(chunks) if chunks else pixels.new_empty((0, *pixels.shape[1:]))
    return ReconstructionError(delta=delta, source_ids=torch.arange(pixels.shape[0]))


def reconstruction_distance(model: DefendedModel, x: Pixels, p: float = 2, batch_size: int = 512) -> torch.Tensor:
    """‖x − D(E(x))‖_p per sample."""
    errors = reconstruction_errors(model, x, batch_size)
    return torch.linalg.vector_norm(errors.flatten(), ord=p, dim=1)


def plain_l2_score(model: DefendedModel, x: Pixels, batch_size: int = 512) -> torch.Tensor:
    """Detector-free score: the L2 reconstruction distance itself."""
    return reconstruction_distance(model, x, 2, batch_size)


def anomaly_score(detector: Detector, errors: Union[ReconstructionError, torch.Tensor]) -> torch.Tensor:
    """‖δ − C(δ)‖₂ per record."""
    flat = errors.flatten() if isinstance(errors, ReconstructionError) else errors.flatten(1)
    if flat.shape[1] != detector.input_dim:
        raise ShapeMismatchError(f"error records have length {flat.shape[1]}, detector expects {detector.input_dim}")
    with torch.no_grad():
        return (flat - detector(flat)).norm(p=2, dim=1)


def score_errors(model: DefendedModel, delta: torch.Tensor, scorer: str) -> torch.Tensor:
    """Score precomputed reconstruction errors with the chosen scorer."""
    if scorer == "plain_l2":
        return delta.flatten(1).norm(p=2, dim=1)
    if scorer == "detector":
        if model.detector is None:
            raise ValueError("scorer 'detector' needs a model with a trained detector")
        return anomaly_score(model.detector, delta)
    raise ValueError(f"Unknown scorer {scorer!r}. Available: {list(SCORERS)}")


def score(model: DefendedModel, x: Pixels, scorer: str, batch_size: int = 512) -> torch.Tensor:
    errors = reconstruction_errors(model, x, batch_size)
    return score_errors(model, errors.delta, scorer)


def feature_interference(model: DefendedModel, x: Pixels, x_prime: Pixels, batch_size: int = 512) -> torch.Tensor:
    """‖E(x) − E(x')‖₂ per pair, on the flattened encoder output."""
    a, b = _pixels(x), _pixels(x_prime)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"paired batches differ in shape: {tuple(a.shape)} vs {tuple(b.shape)}")
    out = []
    with torch.no_grad():
        for start in range(0, a.shape[0], batch_size):
            fa, _ = model.encode(a[start:start + batch_size])
            fb, _ = model.encode(b[start:start + batch_size])
            out.append((fa - fb).flatten(1).norm(p=2, dim=1))
    return torch.cat(out) if out else a.new_empty(0)


# ----------------------------
# Calibration
# ----------------------------

def calibrate_threshold(
    scores: Union[Sequence[float], np.ndarray, torch.Tensor],
    z: float,
    mode: str = "population",
    *,
    scored_with: str = "detector",
    model_hash: str = "",
) -> ThresholdCalibration:
    """
    α from clean-sample scores.

    population:     α = x̄ + z·σ
    paper_literal:  α = x̄ + z·σ/n
    """
    if isinstance(scores, torch.Tensor):
        scores = scores.detach().cpu().numpy()
    arr = np.asarray(scores, dtype=np.float64).ravel()
    if arr.size < 2:
        raise ValueError(f"calibration needs at least 2 scores (got {arr.size})")
    if not np.all(np.isfinite(arr)) or np.any(arr < 0.0):
        raise ValueError("calibration scores must be finite and non-negative")
    if not z > 0.0:
        raise ValueError(f"z must be > 0 (got {z})")
    if mode not in THRESHOLD_MODES:
        raise ValueError(f"mode must be one of {list(THRESHOLD_MODES)} (got {mode!r})")

    n = int(arr.size)
    mean = float(arr.mean())
    std = float(arr.std(ddof=0))
    margin = z * std if mode == "population" else z * std / n
    return ThresholdCalibration(
        mean=mean,
        std=std,
        n=n,
        z=float(z),
        mode=mode,
        alpha=mean + margin,
        scored_with=scored_with,
        model_hash=model_hash,
    )


def calibrate_model(model: DefendedModel, clean: ImageBatch, z: float, mode: str, scorer: str,
                    batch_size: int = 512) -> ThresholdCalibration:
    if clean.provenance != "clean":
        raise ValueError(f"calibration needs clean samples (got provenance {clean.provenance!r})")
    scores = score(model, clean, scorer, batch_size)
    return calibrate_threshold(scores, z, mode, scored_with=scorer, model_hash=parameter_hash(model))


def check_calibration(cal: ThresholdCalibration, model: DefendedModel, scorer: str | None = None) -> None:
    actual = parameter_hash(model)
    if cal.model_hash != actual:
        raise CalibrationMismatchError(
            f"calibration was computed on model {cal.model_hash[:12] or '<unknown>'}, "
            f"current model is {actual[:12]}; rerun calibrate"
        )
    if scorer is not None and scorer != cal.scored_with:
        raise CalibrationMismatchError(f"calibration was scored with {cal.scored_with!r}, not {scorer!r}")


# ----------------------------
# Decisions
# ----------------------------

def is_adversarial(score_value: float, cal: ThresholdCalibration) -> bool:
    return bool(score_value > cal.alpha)


def flag_adversarial(scores: torch.Tensor, cal: ThresholdCalibration) -> torch.Tensor:
    return scores > cal.alpha
