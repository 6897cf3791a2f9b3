import math
from dataclasses import replace

import pytest

from dafar.errors import CalibrationMismatchError
from dafar.harness import (
    CurveResult,
    ExperimentContext,
    check_gates,
    correctly_classified,
    run_detection_curve,
    run_experiment,
    run_feature_interference_table,
    run_fpr_report,
    run_hybrid_eval,
    run_method_comparison,
    run_purification_curve,
    run_score_distribution,
)


def test_detection_curve_zero_entry_is_clean_fpr(toy_context):
    result = run_detection_curve(toy_context, "fgsm")
    assert result.axis == (0.0, 0.1, 0.3)
    assert result.axis_name == "epsilon"
    assert result.series["dafar"][0] == result.series["clean_fpr"][0]
    assert result.counts["dafar"][0] == 16
    assert "binary_classifier" not in result.series
    assert result.extras["alpha"] == toy_context.calibrations["detector"].alpha
    for value, count in zip(result.series["dafar"][1:], result.counts["dafar"][1:]):
        assert math.isnan(value) if count == 0 else 0.0 <= value <= 1.0


def test_detection_curve_with_other_scorer(toy_context):
    result = run_detection_curve(toy_context, "pgd", scorer="plain_l2")
    assert result.extras["scorer"] == "plain_l2"
    assert result.axis == (0.0, 0.1)


def test_method_comparison(toy_context):
    result = run_method_comparison(toy_context)
    assert result.axis == ("fgsm", "pgd")
    assert "spread" in result.extras
    assert len(result.series["dafar"]) == 2


def test_purification_curve(toy_context):
    result = run_purification_curve(toy_context, "fgsm")
    assert set(result.series) == {"no_defense", "dafar_purify", "binary_filter"}
    # the test samples are labelled with the model's own predictions
    assert result.value("no_defense", 0.0) == 1.0
    assert all(n == 16 for n in result.counts["dafar_purify"])


def test_purification_curve_skips_binary_filter_off_mnist(toy_context):
    toy_context.cfg = replace(toy_context.cfg, dataset="cifar10")
    result = run_purification_curve(toy_context, "fgsm", grid=[0.0, 0.1])
    assert "binary_filter" not in result.series


def test_hybrid_eval(toy_context):
    assert len(correctly_classified(toy_context)) == 16
    result = run_hybrid_eval(toy_context, "fgsm")
    assert set(result.series) == {"no_defense", "hybrid_detector", "hybrid_plain_l2"}
    assert result.value("no_defense", 0.0) == 1.0
    assert all(n == 16 for n in result.counts["no_defense"])
    assert result.extras["mix_ratio"] == "1:1"


def test_score_distribution(toy_context):
    result = run_score_distribution(toy_context, "fgsm")
    assert set(result.extras["means"]) == {"clean", "fgsm@0.1", "fgsm@0.3"}
    assert all(len(d) == 5 for d in result.series.values())
    assert len(result.extras["bin_edges"]) == 6
    assert result.extras["scorer_suffix"] == "detector"
    assert "passed" in result.extras["normality"]
    for pct in result.extras["percentiles"].values():
        assert pct["p50"] <= pct["p95"] <= pct["p99"]
        assert pct["p50"] <= result.extras["bin_edges"][-1]
    assert result.extras["density_mass"] == pytest.approx({name: 1.0 for name in result.series})


def test_feature_interference_table(toy_context):
    result = run_feature_interference_table(toy_context)
    assert result.axis == ("identity", "gaussian", "pgd", "fgsm")
    assert result.value("mean_distance", "identity") == 0.0
    assert result.extras["feature_layer"] == 2


def test_fpr_report(toy_context):
    result = run_fpr_report(toy_context)
    assert result.axis == ("detector", "plain_l2")
    assert result.series["victim_accuracy"] == (1.0, 1.0)
    assert set(result.extras["modes"].values()) == {"population"}


def test_run_experiment_dispatch(toy_context):
    assert run_experiment(toy_context, "fpr_report").kind == "fpr_report"
    with pytest.raises(ValueError):
        run_experiment(toy_context, "robustness_vs_everything")


def test_missing_calibration(toy_config, toy_model, toy_predicted):
    ctx = ExperimentContext(cfg=toy_config, model=toy_model, test=toy_predicted)
    with pytest.raises(CalibrationMismatchError):
        run_detection_curve(ctx, "fgsm")
    with pytest.raises(CalibrationMismatchError):
        run_fpr_report(ctx)


def test_attacks_are_cached(toy_context):
    x = toy_context.samples()
    assert toy_context.attack("fgsm", 0.1, x) is toy_context.attack("fgsm", 0.1, x)
    assert toy_context.attack("fgsm", 0.1, x) is not toy_context.attack("fgsm", 0.3, x)


def test_curve_result_validation():
    with pytest.raises(ValueError):
        CurveResult("robustness", "epsilon", (0.0,), {"a": (0.5,)}, {"a": (1,)})
    with pytest.raises(ValueError):
        CurveResult("fpr_report", "scorer", ("detector",), {"a": (0.5, 0.2)}, {"a": (1, 1)})
    with pytest.raises(ValueError):
        CurveResult("fpr_report", "scorer", ("detector",), {"a": (1.5,)}, {"a": (1,)})
    with pytest.raises(ValueError):
        CurveResult("fpr_report", "scorer", ("detector",), {"a": (0.5,)}, {"b": (1,)})
    # densities are not accuracies
    CurveResult("score_distribution", "score", (0.5,), {"clean": (3.0,)}, {"clean": (10,)})


def detection_result(rates, fpr=0.005):
    axis = (0.0, 0.1, 0.3)
    return CurveResult(
        kind="detection_vs_intensity",
        axis_name="epsilon",
        axis=axis,
        series={"dafar": (fpr,) + tuple(rates), "clean_fpr": (fpr,) * 3},
        counts={"dafar": (100, 90, 95), "clean_fpr": (100,) * 3},
        extras={"method": "fgsm", "scorer": "detector", "dataset": "mnist"},
    )


def test_gates_pass():
    gates = check_gates(detection_result((1.0, 0.995)))
    assert [g.name for g in gates] == ["clean_fpr", "fgsm_detection@0.1", "fgsm_detection@0.3"]
    assert all(g.passed for g in gates)


def test_gates_fail():
    gates = {g.name: g.passed for g in check_gates(detection_result((0.9, 1.0), fpr=0.02))}
    assert gates == {"clean_fpr": False, "fgsm_detection@0.1": False, "fgsm_detection@0.3": True}


def test_interference_gates():
    result = CurveResult(
        kind="feature_interference_table",
        axis_name="perturbation",
        axis=("identity", "gaussian", "pgd", "fgsm"),
        series={"mean_distance": (0.0, 1.0, 2.5, 3.0), "std_distance": (0.0, 0.1, 0.2, 0.2)},
        counts={"mean_distance": (10,) * 4, "std_distance": (10,) * 4},
        extras={"dataset": "mnist", "fgsm_gaussian_ratio": 3.0},
    )
    assert all(g.passed for g in check_gates(result))


def test_fpr_report_gates():
    result = CurveResult(
        kind="fpr_report",
        axis_name="scorer",
        axis=("detector",),
        series={"fpr": (0.005,), "pipeline_accuracy": (0.98,), "victim_accuracy": (0.99,)},
        counts={"fpr": (100,), "pipeline_accuracy": (100,), "victim_accuracy": (100,)},
        extras={"dataset": "mnist"},
    )
    gates = {g.name: g.passed for g in check_gates(result)}
    assert gates == {"clean_fpr": True, "victim_accuracy": True, "pipeline_clean_accuracy": False}
