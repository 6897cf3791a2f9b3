import math

import numpy as np
import pytest
import torch

from dafar.detection import (
    ThresholdCalibration,
    anomaly_score,
    calibrate_model,
    calibrate_threshold,
    check_calibration,
    feature_interference,
    flag_adversarial,
    is_adversarial,
    plain_l2_score,
    reconstruction_distance,
    reconstruction_errors,
    score,
)
from dafar.errors import CalibrationMismatchError, ShapeMismatchError
from dafar.models import build_model, parameter_hash
from dafar.verify import TOY_4x4, check_calibration_monotone, check_mode_inequality


def test_population_threshold():
    cal = calibrate_threshold([1.0, 2.0, 3.0, 4.0], z=2.0)
    assert cal.mean == pytest.approx(2.5)
    assert cal.std == pytest.approx(math.sqrt(1.25))
    assert cal.alpha == pytest.approx(2.5 + 2 * math.sqrt(1.25))
    assert cal.n == 4
    assert cal.mode == "population"


def test_literal_threshold_divides_by_n():
    cal = calibrate_threshold([1.0, 2.0, 3.0, 4.0], z=2.0, mode="paper_literal")
    assert cal.alpha == pytest.approx(2.5 + 2 * math.sqrt(1.25) / 4)


def test_threshold_properties():
    check_calibration_monotone(seed=1)
    check_mode_inequality(seed=1)


@pytest.mark.parametrize("scores,z", [([1.0], 3.0), ([1.0, -2.0], 3.0), ([1.0, float("nan")], 3.0), ([1.0, 2.0], 0.0)])
def test_bad_calibration_input(scores, z):
    with pytest.raises(ValueError):
        calibrate_threshold(scores, z)


def test_ties_are_clean():
    cal = calibrate_threshold(np.array([2.0, 2.0, 2.0]), z=3.0)
    assert cal.std == 0.0
    assert not is_adversarial(2.0, cal)
    assert is_adversarial(2.0 + 1e-9, cal)
    assert flag_adversarial(torch.tensor([1.0, 2.0, 3.0]), cal).tolist() == [False, False, True]


def test_calibration_round_trips_through_dict():
    cal = calibrate_threshold([0.5, 1.5, 1.0], z=3.0, scored_with="plain_l2", model_hash="abc")
    assert ThresholdCalibration.from_dict(cal.to_dict()) == cal


def test_calibration_is_bound_to_model(toy_model, toy_clean):
    cal = calibrate_model(toy_model, toy_clean, 3.0, "population", "detector")
    assert cal.model_hash == parameter_hash(toy_model)
    check_calibration(cal, toy_model)
    with pytest.raises(CalibrationMismatchError):
        check_calibration(cal, build_model(TOY_4x4, seed=99))
    with pytest.raises(CalibrationMismatchError):
        check_calibration(cal, toy_model, scorer="plain_l2")


def test_calibration_needs_clean_samples(toy_model, toy_clean):
    noisy = toy_clean.with_pixels(toy_clean.pixels, "noise")
    with pytest.raises(ValueError, match="clean"):
        calibrate_model(toy_model, noisy, 3.0, "population", "plain_l2")


def test_reconstruction_errors_and_distance(toy_model, toy_clean):
    errors = reconstruction_errors(toy_model, toy_clean, batch_size=5)
    assert errors.delta.shape == toy_clean.pixels.shape
    assert errors.source_ids.tolist() == list(range(32))
    assert float(errors.delta.abs().max()) <= 2.0
    l2 = reconstruction_distance(toy_model, toy_clean)
    l1 = reconstruction_distance(toy_model, toy_clean, p=1)
    assert torch.allclose(l2, plain_l2_score(toy_model, toy_clean))
    assert bool((l1 >= l2 - 1e-5).all())


def test_scores_are_non_negative(toy_model, toy_clean):
    for scorer in ("detector", "plain_l2"):
        s = score(toy_model, toy_clean, scorer)
        assert s.shape == (32,)
        assert bool((s >= 0).all())
        assert bool(torch.isfinite(s).all())


def test_detector_scorer_needs_detector(toy_clean):
    model = build_model(TOY_4x4, with_detector=False)
    with pytest.raises(ValueError, match="detector"):
        score(model, toy_clean, "detector")


def test_anomaly_score_checks_record_length(toy_model):
    with pytest.raises(ShapeMismatchError):
        anomaly_score(toy_model.detector, torch.zeros(3, 15))


def test_feature_interference(toy_model, toy_clean):
    same = feature_interference(toy_model, toy_clean, toy_clean)
    assert bool((same == 0).all())
    shifted = toy_clean.with_pixels(toy_clean.pixels.flip(0), "clean")
    assert bool((feature_interference(toy_model, toy_clean, shifted) >= 0).all())
    with pytest.raises(ShapeMismatchError):
        feature_interference(toy_model, toy_clean, toy_clean.take(3))
