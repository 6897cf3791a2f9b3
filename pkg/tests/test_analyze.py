import math

import numpy as np
import pytest
import torch

from dafar.analyze import (
    accuracy,
    compute_percentiles,
    density_histogram,
    fraction,
    integrated_density,
    is_strictly_increasing,
    normality_check,
    summarize_scores,
)


def test_percentiles_interpolate():
    pct = compute_percentiles(np.arange(1, 101))
    assert pct.p50 == pytest.approx(50.5)
    assert pct.p95 == pytest.approx(95.05)
    assert pct.p99 == pytest.approx(99.01)
    assert (pct.min, pct.max, pct.mean) == (1.0, 100.0, 50.5)


def test_percentiles_need_values():
    with pytest.raises(ValueError):
        compute_percentiles([])


def test_summary_uses_population_std():
    summary = summarize_scores(torch.tensor([1.0, 2.0, 3.0, 4.0]))
    assert summary.n == 4
    assert summary.std == pytest.approx(math.sqrt(1.25))


def test_normality_check():
    rng = np.random.default_rng(0)
    assert normality_check(rng.normal(5.0, 1.0, size=5000)).passed
    assert not normality_check(rng.exponential(1.0, size=5000) ** 3).passed
    constant = normality_check([2.0] * 10)
    assert not constant.passed
    assert math.isnan(constant.skew)


def test_density_histogram_integrates_to_one():
    rng = np.random.default_rng(1)
    hist = density_histogram({"clean": rng.normal(0, 1, 400), "fgsm": rng.normal(3, 1, 300), "none": []}, bins=20)
    assert len(hist.edges) == 21
    assert integrated_density(hist, "clean") == pytest.approx(1.0)
    assert integrated_density(hist, "fgsm") == pytest.approx(1.0)
    assert np.isnan(hist.densities["none"]).all()
    assert hist.centers.shape == (20,)


def test_density_histogram_needs_scores():
    with pytest.raises(ValueError):
        density_histogram({"clean": []}, bins=5)


def test_fraction_and_accuracy():
    rate, n = fraction([])
    assert math.isnan(rate) and n == 0
    assert fraction([True, False, True, True]) == (0.75, 4)
    assert accuracy(torch.tensor([1, 2, 3]), torch.tensor([1, 0, 3])) == (pytest.approx(2 / 3), 3)
    with pytest.raises(ValueError):
        accuracy(torch.tensor([1, 2]), torch.tensor([1]))


def test_is_strictly_increasing():
    assert is_strictly_increasing([0.1, 0.2, 0.5])
    assert not is_strictly_increasing([0.1, 0.1, 0.5])
    assert is_strictly_increasing([])
