# dafar/analyze.py
# Summary statistics over scores and predictions.
#
# CONTRACT:
# - Pure functions over arrays; no models, no files.
# - Percentiles use linear interpolation (numpy's default).
# - Densities are normalized so that Σ density·bin_width = 1 per series.

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Mapping, Sequence, Tuple, Union

import numpy as np
import torch
from scipy import stats


ArrayLike = Union[Sequence[float], np.ndarray, torch.Tensor]

# Loose bounds: the clean score population should be roughly bell-shaped,
# not heavy-tailed or multi-modal.
SKEW_BOUND = 2.0
EXCESS_KURTOSIS_BOUND = 7.0


def as_array(values: ArrayLike) -> np.ndarray:
    if isinstance(values, torch.Tensor):
        values = values.detach().cpu().numpy()
    return np.asarray(values, dtype=np.float64).ravel()


# ----------------------------
# Data structures
# ----------------------------

@dataclass(frozen=True)
class Percentiles:
    p50: float
    p95: float
    p99: float
    min: float
    max: float
    mean: float


@dataclass(frozen=True)
class ScoreSummary:
    n: int
    mean: float
    std: float
    percentiles: Percentiles


@dataclass(frozen=True)
class NormalityCheck:
    skew: float
    excess_kurtosis: float
    passed: bool


@dataclass(frozen=True)
class Histogram:
    edges: np.ndarray
    densities: Dict[str, np.ndarray]

    @property
    def centers(self) -> np.ndarray:
        return (self.edges[:-1] + self.edges[1:]) / 2.0

    @property
    def widths(self) -> np.ndarray:
        return np.diff(self.edges)


# ----------------------------
# Percentiles and summaries
# ----------------------------

def compute_percentiles(values: ArrayLike) -> Percentiles:
    arr = as_array(values)
    if arr.size == 0:
        raise ValueError("values cannot be empty")
    p50, p95, p99 = np.percentile(arr, [50, 95, 99])
    return Percentiles(
        p50=float(p50),
        p95=float(p95),
        p99=float(p99),
        min=float(arr.min()),
        max=float(arr.max()),
        mean=float(arr.mean()),
    )


def summarize_scores(scores: ArrayLike) -> ScoreSummary:
    arr = as_array(scores)
    pct = compute_percentiles(arr)
    return ScoreSummary(n=int(arr.size), mean=pct.mean, std=float(arr.std(ddof=0)), percentiles=pct)


def normality_check(scores: ArrayLike) -> NormalityCheck:
    arr = as_array(scores)
    if arr.size < 3 or float(arr.std()) == 0.0:
        return NormalityCheck(skew=float("nan"), excess_kurtosis=float("nan"), passed=False)
    skew = float(stats.skew(arr))
    kurt = float(stats.kurtosis(arr, fisher=True))
    return NormalityCheck(
        skew=skew,
        excess_kurtosis=kurt,
        passed=abs(skew) <= SKEW_BOUND and abs(kurt) <= EXCESS_KURTOSIS_BOUND,
    )


# ----------------------------
# Densities
# ----------------------------

def density_histogram(series: Mapping[str, ArrayLike], bins: int) -> Histogram:
    """One shared set of bin edges across all series, density-normalized per series."""
    arrays = {name: as_array(v) for name, v in series.items()}
    pooled = np.concatenate([a for a in arrays.values() if a.size]) if arrays else np.empty(0)
    if pooled.size == 0:
        raise ValueError("cannot build a histogram without scores")
    edges = np.histogram_bin_edges(pooled, bins=bins)
    densities: Dict[str, np.ndarray] = {}
    for name, arr in arrays.items():
        if arr.size == 0:
            densities[name] = np.full(bins, np.nan)
            continue
        densities[name], _ = np.histogram(arr, bins=edges, density=True)
    return Histogram(edges=edges, densities=densities)


def integrated_density(hist: Histogram, name: str) -> float:
    return float(np.sum(hist.densities[name] * hist.widths))


# ----------------------------
# Rates
# ----------------------------

def fraction(flags: ArrayLike) -> Tuple[float, int]:
    """(mean of a boolean array, its length); NaN for an empty array."""
    arr = as_array(flags)
    if arr.size == 0:
        return float("nan"), 0
    return float(arr.mean()), int(arr.size)


def accuracy(predictions: torch.Tensor, labels: torch.Tensor) -> Tuple[float, int]:
    if predictions.shape != labels.shape:
        raise ValueError("predictions and labels must have the same shape")
    return fraction((predictions == labels).cpu())


def is_strictly_increasing(values: Sequence[float]) -> bool:
    return all(b > a for a, b in zip(values, values[1:]))
