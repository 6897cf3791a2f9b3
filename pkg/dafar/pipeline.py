# dafar/pipeline.py
# The end-to-end defense: score an input, reject it if the score exceeds α,
# otherwise classify (by default) its reconstruction.
#
# CONTRACT:
# - hybrid:      reject if score > α, else label = argmax F(E(D(E(x))))
# - detect_only: reject if score > α, else label = argmax F(E(x))
# - purify_only: never reject, label = argmax F(E(D(E(x))))
# - The score is always computed and reported, in every mode.
# - Outcomes come back in input order.

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Union

import torch

from dafar.config import SCORERS
from dafar.data import ImageBatch
from dafar.detection import ThresholdCalibration, check_calibration, score_errors
from dafar.models import DefendedModel


PIPELINE_MODES: tuple[str, ...] = ("hybrid", "detect_only", "purify_only")


# ----------------------------
# Data structures
# ----------------------------

@dataclass(frozen=True)
class DefenseOutcome:
    rejected: bool
    label: Optional[int]
    anomaly_score: float
    reconstruction_used: bool

    def __post_init__(self) -> None:
        if self.rejected and self.label is not None:
            raise ValueError("a rejected outcome carries no label")
        if not self.rejected and self.label is None:
            raise ValueError("an accepted outcome needs a label")

    @property
    def verdict(self) -> str:
        return "rejected" if self.rejected else "accepted"


@dataclass(frozen=True)
class PipelineConfig:
    mode: str = "hybrid"
    scorer: str = "detector"
    calibration: Optional[ThresholdCalibration] = None

    def __post_init__(self) -> None:
        if self.mode not in PIPELINE_MODES:
            raise ValueError(f"mode must be one of {list(PIPELINE_MODES)} (got {self.mode!r})")
        if self.scorer not in SCORERS:
            raise ValueError(f"scorer must be one of {list(SCORERS)} (got {self.scorer!r})")
        if self.mode != "purify_only" and self.calibration is None:
            raise ValueError(f"mode {self.mode!r} needs a threshold calibration")

    @property
    def alpha(self) -> float:
        if self.mode == "purify_only" or self.calibration is None:
            return math.inf
        return self.calibration.alpha


# ----------------------------
# Public API
# ----------------------------

def check_pipeline(model: DefendedModel, cfg: PipelineConfig) -> None:
    """Raise CalibrationMismatchError if cfg's calibration does not belong to model."""
    if cfg.mode != "purify_only" and cfg.calibration is not None:
        check_calibration(cfg.calibration, model, cfg.scorer)


def defend_batch(
    model: DefendedModel,
    xs: Union[ImageBatch, torch.Tensor],
    cfg: PipelineConfig,
    *,
    batch_size: int = 256,
    check: bool = True,
) -> List[DefenseOutcome]:
    if check:
        check_pipeline(model, cfg)
    pixels = xs.pixels if isinstance(xs, ImageBatch) else xs
    alpha = cfg.alpha
    use_reconstruction = cfg.mode != "detect_only"

    outcomes: List[DefenseOutcome] = []
    with torch.no_grad():
        for start in range(0, pixels.shape[0], batch_size):
            x = pixels[start:start + batch_size]
            reconstruction = model.reconstruct(x)
            scores = score_errors(model, x - reconstruction, cfg.scorer)
            labels = model.predict(reconstruction if use_reconstruction else x)
            rejected = scores > alpha
            for s, y, r in zip(scores.tolist(), labels.tolist(), rejected.tolist()):
                outcomes.append(DefenseOutcome(
                    rejected=bool(r),
                    label=None if r else int(y),
                    anomaly_score=float(s),
                    reconstruction_used=use_reconstruction,
                ))
    return outcomes


def defend(model: DefendedModel, x: torch.Tensor, cfg: PipelineConfig, *, check: bool = True) -> DefenseOutcome:
    """Single sample (C, H, W) or a batch of one."""
    if x.dim() == 3:
        x = x.unsqueeze(0)
    if x.shape[0] != 1:
        raise ValueError(f"defend takes one sample; use defend_batch for {x.shape[0]}")
    return defend_batch(model, x, cfg, check=check)[0]


def outcome_accuracy(outcomes: List[DefenseOutcome], labels: torch.Tensor, adversarial: torch.Tensor) -> float:
    """
    Mixed-set accuracy: a rejected adversarial sample counts as correct, a
    rejected clean sample as incorrect, an accepted sample is correct iff its
    label matches.
    """
    if len(outcomes) != labels.shape[0] or len(outcomes) != adversarial.shape[0]:
        raise ValueError("outcomes, labels and adversarial flags must have equal length")
    if not outcomes:
        return float("nan")
    correct = 0
    for outcome, y, adv in zip(outcomes, labels.tolist(), adversarial.tolist()):
        if outcome.rejected:
            correct += int(bool(adv))
        else:
            correct += int(outcome.label == y)
    return correct / len(outcomes)
