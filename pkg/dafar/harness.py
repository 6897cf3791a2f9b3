# dafar/harness.py
# Experiment orchestration: one function per experiment kind, each returning a
# CurveResult, plus the acceptance gates evaluated by `evaluate --check`.
#
# CONTRACT:
# - Experiments only read models, calibrations and data; nothing is trained here.
# - Intensity 0 on any grid means "no attack" (clean samples).
# - Detection accuracy is measured on successful adversarial samples only;
#   the ε=0 entry of a detection curve holds the clean FPR instead.
# - Hybrid scoring: rejected adversarial = correct, rejected clean = incorrect,
#   accepted = correct iff the label matches.

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import torch

from dafar.analyze import (
    accuracy,
    density_histogram,
    fraction,
    integrated_density,
    is_strictly_increasing,
    normality_check,
    summarize_scores,
)
from dafar.attacks import AdversarialSet, gaussian_baseline, run_attack
from dafar.baselines import BinaryClassifierDetector, DenoisingAutoencoder, binary_filter, purify
from dafar.config import INTENSITY_KNOBS, DafarConfig
from dafar.data import ImageBatch
from dafar.detection import ThresholdCalibration, feature_interference, flag_adversarial, score
from dafar.errors import CalibrationMismatchError
from dafar.models import DefendedModel
from dafar.pipeline import PipelineConfig, check_pipeline, defend_batch, outcome_accuracy


logger = logging.getLogger(__name__)

EXPERIMENT_KINDS: tuple[str, ...] = (
    "detection_vs_intensity",
    "detection_vs_method",
    "purification_vs_intensity",
    "hybrid_vs_intensity",
    "score_distribution",
    "feature_interference_table",
    "fpr_report",
)
ACCURACY_KINDS = frozenset(EXPERIMENT_KINDS) - {"score_distribution", "feature_interference_table"}

# Acceptance thresholds
MNIST_FGSM_DETECTION = 0.99
CIFAR_FGSM_DETECTION = 0.95
STRONG_ATTACK_DETECTION = 0.95
METHOD_SPREAD = 0.10
MAX_FPR = {"mnist": 0.01, "cifar10": 0.05}
MIN_VICTIM_ACCURACY = {"mnist": 0.985}
PIPELINE_ACCURACY_DROP = 0.005
HYBRID_ACCURACY = {"detector": 0.95, "plain_l2": 0.90}
INTERFERENCE_RATIO = 2.0
INTERFERENCE_INTENSITY = 0.3


# ----------------------------
# Data structures
# ----------------------------

@dataclass(frozen=True)
class CurveResult:
    kind: str
    axis_name: str
    axis: Tuple[Any, ...]
    series: Mapping[str, Tuple[float, ...]]
    counts: Mapping[str, Tuple[int, ...]]
    extras: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.kind not in EXPERIMENT_KINDS:
            raise ValueError(f"Unknown experiment kind {self.kind!r}. Available: {list(EXPERIMENT_KINDS)}")
        if set(self.series) != set(self.counts):
            raise ValueError("series and counts must have the same keys")
        for name, values in self.series.items():
            if len(values) != len(self.axis) or len(self.counts[name]) != len(self.axis):
                raise ValueError(f"series {name!r} does not match the axis length {len(self.axis)}")
            if self.kind in ACCURACY_KINDS:
                for v in values:
                    if not math.isnan(v) and not 0.0 <= v <= 1.0:
                        raise ValueError(f"series {name!r} has accuracy {v} outside [0, 1]")

    def value(self, series: str, axis_value: Any) -> float:
        return self.series[series][self.axis.index(axis_value)]


@dataclass(frozen=True)
class GateResult:
    name: str
    passed: bool
    detail: str


@dataclass
class ExperimentContext:
    cfg: DafarConfig
    model: DefendedModel
    test: ImageBatch
    calibrations: Dict[str, ThresholdCalibration] = field(default_factory=dict)
    denoiser: Optional[DenoisingAutoencoder] = None
    binary_classifier: Optional[BinaryClassifierDetector] = None
    progress: bool = False
    _cache: Dict[Tuple[Any, ...], AdversarialSet] = field(default_factory=dict, repr=False)

    @property
    def scorer(self) -> str:
        return self.cfg.scorer

    @property
    def batch_size(self) -> int:
        return self.cfg.experiments.batch_size

    def calibration(self, scorer: Optional[str] = None) -> ThresholdCalibration:
        scorer = scorer or self.scorer
        if scorer not in self.calibrations:
            raise CalibrationMismatchError(f"no calibration for scorer {scorer!r}; run calibrate first")
        cal = self.calibrations[scorer]
        check_pipeline(self.model, PipelineConfig("detect_only", scorer, cal))
        return cal

    def samples(self, n: Optional[int] = None) -> ImageBatch:
        return self.test.take(n or self.cfg.experiments.samples)

    def attack(self, method: str, intensity: Optional[float], x: ImageBatch, tag: str = "test") -> AdversarialSet:
        """Adversarial set for (method, intensity) over x; None means the method's configured default."""
        key = (tag, method, intensity, len(x))
        if key not in self._cache:
            acfg = self.cfg.attack(method)
            if intensity is not None:
                acfg = acfg.with_intensity(intensity)
            logger.info("attacking %d %s samples with %s (%s=%s)", len(x), tag, method,
                        INTENSITY_KNOBS[method], acfg.intensity)
            self._cache[key] = run_attack(self.model, x, acfg, batch_size=self.batch_size, progress=self.progress)
        return self._cache[key]


# ----------------------------
# Helpers
# ----------------------------

def _successful(adv: AdversarialSet) -> ImageBatch:
    index = adv.success_mask.nonzero(as_tuple=True)[0]
    return adv.adversarials.subset(index)


def _predict(model: DefendedModel, pixels: torch.Tensor, batch_size: int) -> torch.Tensor:
    out = []
    with torch.no_grad():
        for start in range(0, pixels.shape[0], batch_size):
            out.append(model.predict(pixels[start:start + batch_size]))
    return torch.cat(out) if out else torch.zeros(0, dtype=torch.long)


def _detection_rate(ctx: ExperimentContext, batch: ImageBatch, scorer: str) -> Tuple[float, int]:
    if len(batch) == 0:
        return float("nan"), 0
    flags = flag_adversarial(score(ctx.model, batch, scorer, ctx.batch_size), ctx.calibration(scorer))
    return fraction(flags.cpu())


def _classifier_rate(ctx: ExperimentContext, batch: ImageBatch) -> Tuple[float, int]:
    if ctx.binary_classifier is None or len(batch) == 0:
        return float("nan"), 0
    return fraction(ctx.binary_classifier.flag(batch.pixels).cpu())


def _axis_name(method: str) -> str:
    return INTENSITY_KNOBS[method]


def _purify_scorer(ctx: ExperimentContext) -> str:
    return ctx.scorer if ctx.model.has_detector else "plain_l2"


# ----------------------------
# Experiments
# ----------------------------

def run_detection_curve(ctx: ExperimentContext, method: str, grid: Optional[Sequence[float]] = None,
                        scorer: Optional[str] = None, samples: Optional[int] = None) -> CurveResult:
    """Fraction of successful adversarial samples flagged, per intensity."""
    scorer = scorer or ctx.scorer
    axis = tuple(float(v) for v in (grid if grid is not None else ctx.cfg.grid(method)))
    x = ctx.samples(samples)
    fpr, n_clean = _detection_rate(ctx, x, scorer)

    dafar: List[float] = []
    dafar_n: List[int] = []
    clf: List[float] = []
    clf_n: List[int] = []
    for v in axis:
        if v == 0.0:
            dafar.append(fpr)
            dafar_n.append(n_clean)
            rate, n = _classifier_rate(ctx, x)
        else:
            adv = _successful(ctx.attack(method, v, x))
            rate, n = _detection_rate(ctx, adv, scorer)
            dafar.append(rate)
            dafar_n.append(n)
            rate, n = _classifier_rate(ctx, adv)
        clf.append(rate)
        clf_n.append(n)
        logger.info("detection %s %s=%g: %.4f over %d", method, _axis_name(method), v, dafar[-1], dafar_n[-1])

    series = {"dafar": tuple(dafar), "clean_fpr": (fpr,) * len(axis)}
    counts = {"dafar": tuple(dafar_n), "clean_fpr": (n_clean,) * len(axis)}
    if ctx.binary_classifier is not None:
        series["binary_classifier"] = tuple(clf)
        counts["binary_classifier"] = tuple(clf_n)
    return CurveResult(
        kind="detection_vs_intensity",
        axis_name=_axis_name(method),
        axis=axis,
        series=series,
        counts=counts,
        extras={"method": method, "scorer": scorer, "dataset": ctx.cfg.dataset, "zero_axis": "clean_fpr",
                "alpha": ctx.calibration(scorer).alpha},
    )


def run_method_comparison(ctx: ExperimentContext, methods: Optional[Sequence[str]] = None,
                          scorer: Optional[str] = None, samples: Optional[int] = None) -> CurveResult:
    """One detection accuracy per method at its configured default strength."""
    scorer = scorer or ctx.scorer
    axis = tuple(methods or ctx.cfg.experiments.methods)
    x = ctx.samples(samples)
    dafar: List[float] = []
    dafar_n: List[int] = []
    clf: List[float] = []
    clf_n: List[int] = []
    for method in axis:
        adv = _successful(ctx.attack(method, None, x))
        rate, n = _detection_rate(ctx, adv, scorer)
        dafar.append(rate)
        dafar_n.append(n)
        rate, n = _classifier_rate(ctx, adv)
        clf.append(rate)
        clf_n.append(n)
        logger.info("detection %s (default strength): %.4f over %d", method, dafar[-1], dafar_n[-1])

    series = {"dafar": tuple(dafar)}
    counts = {"dafar": tuple(dafar_n)}
    extras: Dict[str, Any] = {"scorer": scorer, "dataset": ctx.cfg.dataset}
    if ctx.binary_classifier is not None:
        series["binary_classifier"] = tuple(clf)
        counts["binary_classifier"] = tuple(clf_n)
        extras["classifier_attack"] = ctx.binary_classifier.attack.method
    finite = [v for v in dafar if not math.isnan(v)]
    extras["spread"] = (max(finite) - min(finite)) if finite else float("nan")
    return CurveResult("detection_vs_method", "method", axis, series, counts, extras)


def run_purification_curve(ctx: ExperimentContext, method: str, grid: Optional[Sequence[float]] = None,
                           samples: Optional[int] = None) -> CurveResult:
    """Classification accuracy on attacked inputs: no defense, purify_only and the baselines."""
    axis = tuple(float(v) for v in (grid if grid is not None else ctx.cfg.grid(method)))
    x = ctx.samples(samples)
    purify_cfg = PipelineConfig("purify_only", _purify_scorer(ctx))
    names = ["no_defense", "dafar_purify"]
    if ctx.cfg.dataset == "mnist":
        names.append("binary_filter")
    if ctx.denoiser is not None:
        names.append("denoising_ae")
    values: Dict[str, List[float]] = {name: [] for name in names}
    sizes: Dict[str, List[int]] = {name: [] for name in names}

    for v in axis:
        attacked = x if v == 0.0 else ctx.attack(method, v, x).adversarials
        rates: Dict[str, Tuple[float, int]] = {
            "no_defense": accuracy(_predict(ctx.model, attacked.pixels, ctx.batch_size), attacked.labels),
        }
        outcomes = defend_batch(ctx.model, attacked, purify_cfg, batch_size=ctx.batch_size, check=False)
        purified = torch.tensor([o.label for o in outcomes], dtype=torch.long, device=attacked.labels.device)
        rates["dafar_purify"] = accuracy(purified, attacked.labels)
        if "binary_filter" in values:
            filtered = binary_filter(attacked, ctx.cfg.baselines.filter_threshold)
            rates["binary_filter"] = accuracy(_predict(ctx.model, filtered.pixels, ctx.batch_size), attacked.labels)
        if ctx.denoiser is not None:
            denoised = purify(ctx.denoiser, attacked, ctx.batch_size)
            rates["denoising_ae"] = accuracy(_predict(ctx.model, denoised.pixels, ctx.batch_size), attacked.labels)
        for name in names:
            values[name].append(rates[name][0])
            sizes[name].append(rates[name][1])

    return CurveResult(
        kind="purification_vs_intensity",
        axis_name=_axis_name(method),
        axis=axis,
        series={k: tuple(v) for k, v in values.items()},
        counts={k: tuple(v) for k, v in sizes.items()},
        extras={"method": method, "dataset": ctx.cfg.dataset},
    )


def correctly_classified(ctx: ExperimentContext, n: Optional[int] = None) -> ImageBatch:
    """The first n test samples the victim classifies correctly."""
    n = n or ctx.cfg.experiments.samples
    predictions = _predict(ctx.model, ctx.test.pixels, ctx.batch_size)
    index = (predictions == ctx.test.labels).nonzero(as_tuple=True)[0][:n]
    return ctx.test.subset(index.cpu())


def run_hybrid_eval(ctx: ExperimentContext, method: str, grid: Optional[Sequence[float]] = None,
                    samples: Optional[int] = None) -> CurveResult:
    """
    Accuracy of the hybrid defense on 1:1 clean/attacked sets built from
    correctly classified samples, for every calibrated scorer.
    """
    axis = tuple(float(v) for v in (grid if grid is not None else ctx.cfg.grid(method)))
    pool = correctly_classified(ctx, samples)
    half = len(pool) // 2
    if half == 0:
        raise ValueError("hybrid evaluation needs at least 2 correctly classified samples")
    clean = pool.subset(slice(0, half))
    to_attack = pool.subset(slice(half, 2 * half))

    scorers = [s for s in ("detector", "plain_l2") if s in ctx.calibrations]
    if not scorers:
        raise CalibrationMismatchError("no calibration available; run calibrate first")
    configs = {s: PipelineConfig("hybrid", s, ctx.calibration(s)) for s in scorers}

    values: Dict[str, List[float]] = {"no_defense": []}
    values.update({f"hybrid_{s}": [] for s in scorers})
    for v in axis:
        if v == 0.0:
            attacked = to_attack.pixels
            flags = torch.zeros(half, dtype=torch.bool)
        else:
            attacked = ctx.attack(method, v, to_attack, tag="hybrid").adversarials.pixels
            flags = torch.ones(half, dtype=torch.bool)
        mixed = torch.cat([clean.pixels, attacked])
        labels = torch.cat([clean.labels, to_attack.labels])
        adversarial = torch.cat([torch.zeros(half, dtype=torch.bool), flags])

        values["no_defense"].append(accuracy(_predict(ctx.model, mixed, ctx.batch_size), labels)[0])
        for s in scorers:
            outcomes = defend_batch(ctx.model, mixed, configs[s], batch_size=ctx.batch_size, check=False)
            values[f"hybrid_{s}"].append(outcome_accuracy(outcomes, labels.cpu(), adversarial))
            logger.info("hybrid %s %s=%g: %.4f", s, _axis_name(method), v, values[f"hybrid_{s}"][-1])

    return CurveResult(
        kind="hybrid_vs_intensity",
        axis_name=_axis_name(method),
        axis=axis,
        series={k: tuple(v) for k, v in values.items()},
        counts={k: (2 * half,) * len(axis) for k in values},
        extras={"method": method, "dataset": ctx.cfg.dataset, "mix_ratio": "1:1",
                "scoring_rule": "rejected adversarial counts as correct, rejected clean as incorrect"},
    )


def run_score_distribution(ctx: ExperimentContext, method: str, grid: Optional[Sequence[float]] = None,
                           scorer: Optional[str] = None, samples: Optional[int] = None) -> CurveResult:
    """Score densities of clean and attacked samples on shared bins, with α and a normality check."""
    scorer = scorer or ctx.scorer
    intensities = [float(v) for v in (grid if grid is not None else ctx.cfg.grid(method)) if float(v) > 0.0]
    x = ctx.samples(samples)

    scores: Dict[str, torch.Tensor] = {"clean": score(ctx.model, x, scorer, ctx.batch_size)}
    for v in intensities:
        adv = ctx.attack(method, v, x)
        scores[f"{method}@{v:g}"] = score(ctx.model, adv.adversarials, scorer, ctx.batch_size)

    hist = density_histogram(scores, ctx.cfg.experiments.bins)
    summaries = {name: summarize_scores(s) for name, s in scores.items()}
    normal = normality_check(scores["clean"])
    alpha = ctx.calibrations[scorer].alpha if scorer in ctx.calibrations else float("nan")
    bins = len(hist.centers)
    return CurveResult(
        kind="score_distribution",
        axis_name="score",
        axis=tuple(float(c) for c in hist.centers),
        series={name: tuple(float(d) for d in dens) for name, dens in hist.densities.items()},
        counts={name: (int(scores[name].numel()),) * bins for name in hist.densities},
        extras={
            "method": method,
            "scorer": scorer,
            "scorer_suffix": scorer,
            "dataset": ctx.cfg.dataset,
            "alpha": alpha,
            "intensities": intensities,
            "means": {name: s.mean for name, s in summaries.items()},
            "percentiles": {name: {"p50": s.percentiles.p50, "p95": s.percentiles.p95, "p99": s.percentiles.p99}
                            for name, s in summaries.items()},
            "density_mass": {name: integrated_density(hist, name) for name in hist.densities},
            "bin_edges": [float(e) for e in hist.edges],
            "normality": {"skew": normal.skew, "excess_kurtosis": normal.excess_kurtosis, "passed": normal.passed},
        },
    )


def run_feature_interference_table(ctx: ExperimentContext, n: Optional[int] = None,
                                   intensity: float = INTERFERENCE_INTENSITY) -> CurveResult:
    """Mean ‖E(x) − E(x')‖₂ for x' = x, Gaussian, PGD and FGSM at the same intensity."""
    x = ctx.test.take(n or ctx.cfg.experiments.interference_pairs)
    perturbed = {
        "identity": x,
        "gaussian": gaussian_baseline(x, intensity, seed=ctx.cfg.seed),
        "pgd": ctx.attack("pgd", intensity, x).adversarials,
        "fgsm": ctx.attack("fgsm", intensity, x).adversarials,
    }
    axis = tuple(perturbed)
    means: List[float] = []
    stds: List[float] = []
    for name in axis:
        d = feature_interference(ctx.model, x, perturbed[name], ctx.batch_size)
        summary = summarize_scores(d)
        means.append(summary.mean)
        stds.append(summary.std)
    gaussian_mean = means[axis.index("gaussian")]
    ratio = means[axis.index("fgsm")] / gaussian_mean if gaussian_mean > 0 else float("inf")
    return CurveResult(
        kind="feature_interference_table",
        axis_name="perturbation",
        axis=axis,
        series={"mean_distance": tuple(means), "std_distance": tuple(stds)},
        counts={"mean_distance": (len(x),) * len(axis), "std_distance": (len(x),) * len(axis)},
        extras={"dataset": ctx.cfg.dataset, "intensity": intensity, "fgsm_gaussian_ratio": ratio,
                "feature_layer": ctx.model.spec.feedback_position},
    )


def run_fpr_report(ctx: ExperimentContext, samples: Optional[int] = None) -> CurveResult:
    """Clean FPR and hybrid clean accuracy per calibrated scorer, next to the victim's own accuracy."""
    x = ctx.samples(samples)
    axis = tuple(s for s in ("detector", "plain_l2") if s in ctx.calibrations)
    if not axis:
        raise CalibrationMismatchError("no calibration available; run calibrate first")
    victim, n = accuracy(_predict(ctx.model, x.pixels, ctx.batch_size), x.labels)
    fprs: List[float] = []
    accs: List[float] = []
    for scorer in axis:
        fpr, _ = _detection_rate(ctx, x, scorer)
        fprs.append(fpr)
        outcomes = defend_batch(ctx.model, x, PipelineConfig("hybrid", scorer, ctx.calibration(scorer)),
                                batch_size=ctx.batch_size, check=False)
        accs.append(outcome_accuracy(outcomes, x.labels.cpu(), torch.zeros(len(x), dtype=torch.bool)))
    return CurveResult(
        kind="fpr_report",
        axis_name="scorer",
        axis=axis,
        series={"fpr": tuple(fprs), "pipeline_accuracy": tuple(accs), "victim_accuracy": (victim,) * len(axis)},
        counts={"fpr": (n,) * len(axis), "pipeline_accuracy": (n,) * len(axis), "victim_accuracy": (n,) * len(axis)},
        extras={"dataset": ctx.cfg.dataset, "alphas": {s: ctx.calibrations[s].alpha for s in axis},
                "modes": {s: ctx.calibrations[s].mode for s in axis}},
    )


def run_experiment(ctx: ExperimentContext, kind: str, method: Optional[str] = None,
                   samples: Optional[int] = None) -> CurveResult:
    if kind not in EXPERIMENT_KINDS:
        raise ValueError(f"Unknown experiment kind {kind!r}. Available: {list(EXPERIMENT_KINDS)}")
    method = method or "fgsm"
    if kind == "detection_vs_intensity":
        return run_detection_curve(ctx, method, samples=samples)
    if kind == "detection_vs_method":
        return run_method_comparison(ctx, samples=samples)
    if kind == "purification_vs_intensity":
        return run_purification_curve(ctx, method, samples=samples)
    if kind == "hybrid_vs_intensity":
        return run_hybrid_eval(ctx, method, samples=samples)
    if kind == "score_distribution":
        return run_score_distribution(ctx, method, samples=samples)
    if kind == "feature_interference_table":
        return run_feature_interference_table(ctx, n=samples)
    return run_fpr_report(ctx, samples=samples)


# ----------------------------
# Acceptance gates
# ----------------------------

def _gate(name: str, passed: bool, detail: str) -> GateResult:
    return GateResult(name=name, passed=bool(passed), detail=detail)


def _at_least(name: str, value: float, bound: float) -> GateResult:
    return _gate(name, value >= bound, f"{value:.4f} >= {bound}")


def check_gates(result: CurveResult) -> List[GateResult]:
    """Acceptance gates that apply to this result; empty when none do."""
    dataset = result.extras.get("dataset", "mnist")
    gates: List[GateResult] = []

    if result.kind == "detection_vs_intensity":
        method = result.extras.get("method")
        if result.extras.get("scorer") == "detector" and dataset in MAX_FPR:
            fpr = result.series["clean_fpr"][0]
            gates.append(_gate("clean_fpr", fpr <= MAX_FPR[dataset], f"{fpr:.4f} <= {MAX_FPR[dataset]}"))
        if method == "fgsm":
            for eps, rate in zip(result.axis, result.series["dafar"]):
                if dataset == "mnist" and 0.1 <= eps <= 0.4:
                    gates.append(_at_least(f"fgsm_detection@{eps:g}", rate, MNIST_FGSM_DETECTION))
                elif dataset == "cifar10" and eps >= 0.1:
                    gates.append(_at_least(f"fgsm_detection@{eps:g}", rate, CIFAR_FGSM_DETECTION))

    elif result.kind == "detection_vs_method":
        dafar = dict(zip(result.axis, result.series["dafar"]))
        for method in ("pgd", "cw_l2"):
            if method in dafar:
                gates.append(_at_least(f"{method}_detection", dafar[method], STRONG_ATTACK_DETECTION))
        spread = result.extras.get("spread", float("nan"))
        gates.append(_gate("method_spread", spread <= METHOD_SPREAD, f"{spread:.4f} <= {METHOD_SPREAD}"))
        if "binary_classifier" in result.series:
            trained_on = result.extras.get("classifier_attack")
            for method, clf in zip(result.axis, result.series["binary_classifier"]):
                if method != trained_on:
                    gates.append(_gate(f"beats_binary_classifier_{method}", dafar[method] >= clf,
                                       f"{dafar[method]:.4f} >= {clf:.4f}"))

    elif result.kind == "purification_vs_intensity":
        if 0.0 in result.axis:
            victim = result.value("no_defense", 0.0)
            purified = result.value("dafar_purify", 0.0)
            gates.append(_gate("purify_clean_accuracy", victim - purified <= PIPELINE_ACCURACY_DROP,
                               f"{victim:.4f} - {purified:.4f} <= {PIPELINE_ACCURACY_DROP}"))

    elif result.kind == "hybrid_vs_intensity":
        for scorer, bound in HYBRID_ACCURACY.items():
            name = f"hybrid_{scorer}"
            if name in result.series:
                worst = min(result.series[name])
                gates.append(_at_least(f"{name}_min", worst, bound))

    elif result.kind == "score_distribution":
        means = result.extras.get("means", {})
        ordered = [means["clean"]] + [means[k] for k in means if k != "clean"]
        gates.append(_gate("mean_score_increasing", is_strictly_increasing(ordered),
                           ", ".join(f"{m:.3f}" for m in ordered)))
        normal = result.extras.get("normality", {})
        gates.append(_gate("clean_scores_normal", bool(normal.get("passed")),
                           f"skew={normal.get('skew')}, excess_kurtosis={normal.get('excess_kurtosis')}"))

    elif result.kind == "feature_interference_table":
        gaussian, pgd, fgsm = (result.value("mean_distance", k) for k in ("gaussian", "pgd", "fgsm"))
        gates.append(_gate("interference_order", gaussian < pgd <= fgsm,
                           f"gaussian {gaussian:.3f} < pgd {pgd:.3f} <= fgsm {fgsm:.3f}"))
        ratio = result.extras.get("fgsm_gaussian_ratio", float("nan"))
        gates.append(_at_least("fgsm_gaussian_ratio", ratio, INTERFERENCE_RATIO))

    elif result.kind == "fpr_report":
        if "detector" in result.axis and dataset in MAX_FPR:
            fpr = result.value("fpr", "detector")
            gates.append(_gate("clean_fpr", fpr <= MAX_FPR[dataset], f"{fpr:.4f} <= {MAX_FPR[dataset]}"))
        victim = result.series["victim_accuracy"][0]
        if dataset in MIN_VICTIM_ACCURACY:
            gates.append(_at_least("victim_accuracy", victim, MIN_VICTIM_ACCURACY[dataset]))
        if "detector" in result.axis:
            pipeline = result.value("pipeline_accuracy", "detector")
            gates.append(_gate("pipeline_clean_accuracy", victim - pipeline <= PIPELINE_ACCURACY_DROP,
                               f"{victim:.4f} - {pipeline:.4f} <= {PIPELINE_ACCURACY_DROP}"))

    return gates
