# dafar/verify.py
# Property checks on toy models: runs in seconds, needs no dataset.
#
# CONTRACT:
# - Every check returns a CheckResult; an exception inside a check is a failure,
#   never a crash of the whole suite.
# - Toy specs here are shared with the test suite.

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass
from typing import Callable, List, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from dafar.attacks import (
    cw_l2,
    fgsm,
    gaussian_baseline,
    input_gradient,
    jsma,
    next_class_targets,
    pgd,
    saliency_components,
    select_pixel_pair,
)
from dafar.baselines import binary_filter
from dafar.data import ImageBatch
from dafar.detection import ThresholdCalibration, calibrate_threshold, is_adversarial
from dafar.models import (
    Decoder,
    DefendedModel,
    Encoder,
    LayerSpec,
    NetworkSpec,
    build_model,
    conv,
    linear,
    parameter_hash,
    pool,
)
from dafar.pipeline import PipelineConfig, defend_batch
from dafar.training import joint_loss


logger = logging.getLogger(__name__)

TOY_4x4 = NetworkSpec(
    name="toy4",
    input_shape=(1, 4, 4),
    layers=(conv(2, 3), pool(), linear(10, "softmax")),
    feedback_position=2,
    detector_widths=(4,),
)

TOY_8x8 = NetworkSpec(
    name="toy8",
    input_shape=(1, 8, 8),
    layers=(conv(2, 3), pool(), linear(10, "softmax")),
    feedback_position=2,
    detector_widths=(8,),
)

GRADIENT_TOLERANCE = 1e-3
FINITE_DIFFERENCE_STEP = 1e-6
LINF_SLACK = 1e-6
JOINT_LOSS_WEIGHT = 0.5


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float


def toy_batch(spec: NetworkSpec, n: int, seed: int = 0, low: float = -1.0, high: float = 1.0) -> ImageBatch:
    gen = torch.Generator().manual_seed(seed)
    pixels = torch.rand((n, *spec.input_shape), generator=gen) * (high - low) + low
    labels = torch.randint(0, spec.num_classes, (n,), generator=gen)
    return ImageBatch(pixels, labels)


# ----------------------------
# Checks
# ----------------------------

def check_gradient(seed: int = 0) -> str:
    """Analytic input gradient vs central finite differences, in float64."""
    model = build_model(TOY_4x4, seed=seed, with_detector=False).double()
    batch = toy_batch(TOY_4x4, 3, seed, low=-0.9, high=0.9)
    x = batch.pixels.double()
    analytic = input_gradient(model, x, batch.labels)

    def loss(z: torch.Tensor) -> float:
        with torch.no_grad():
            return float(F.cross_entropy(model.logits(z), batch.labels, reduction="sum"))

    numeric = torch.zeros_like(x)
    flat = x.flatten()
    for i in range(flat.numel()):
        bump = torch.zeros_like(flat)
        bump[i] = FINITE_DIFFERENCE_STEP
        up = loss((flat + bump).view_as(x))
        down = loss((flat - bump).view_as(x))
        numeric.view(-1)[i] = (up - down) / (2 * FINITE_DIFFERENCE_STEP)

    rel = float((analytic - numeric).abs().max() / numeric.abs().max().clamp_min(1e-12))
    if rel > GRADIENT_TOLERANCE:
        raise AssertionError(f"relative gradient error {rel:.2e} > {GRADIENT_TOLERANCE}")
    return f"relative error {rel:.2e}"


def check_joint_loss_gradient(seed: int = 0) -> str:
    """joint_loss parameter gradients vs central finite differences, in float64."""
    model = build_model(TOY_4x4, seed=seed, with_detector=False).double()
    raw = toy_batch(TOY_4x4, 3, seed, low=-0.9, high=0.9)
    batch = ImageBatch(raw.pixels.double(), raw.labels)
    model.zero_grad()
    joint_loss(model, batch, JOINT_LOSS_WEIGHT).total.backward()

    gen = torch.Generator().manual_seed(seed)
    analytic: List[float] = []
    numeric: List[float] = []
    for name, param in model.named_parameters():
        if not name.startswith(("encoder.", "decoder.", "head.")):
            continue
        flat = param.data.view(-1)
        for i in torch.randperm(flat.numel(), generator=gen)[:3].tolist():
            original = float(flat[i])
            with torch.no_grad():
                flat[i] = original + FINITE_DIFFERENCE_STEP
                up = float(joint_loss(model, batch, JOINT_LOSS_WEIGHT).total)
                flat[i] = original - FINITE_DIFFERENCE_STEP
                down = float(joint_loss(model, batch, JOINT_LOSS_WEIGHT).total)
                flat[i] = original
            analytic.append(float(param.grad.view(-1)[i]))
            numeric.append((up - down) / (2 * FINITE_DIFFERENCE_STEP))

    a, n = np.asarray(analytic), np.asarray(numeric)
    rel = float(np.abs(a - n).max() / max(np.abs(n).max(), 1e-12))
    if rel > GRADIENT_TOLERANCE:
        raise AssertionError(f"relative joint-loss gradient error {rel:.2e} > {GRADIENT_TOLERANCE}")
    return f"{len(a)} parameters, relative error {rel:.2e}"


def check_linf_bounds(seed: int = 0) -> str:
    model = build_model(TOY_4x4, seed=seed, with_detector=False)
    batch = toy_batch(TOY_4x4, 16, seed)
    checked = 0
    for eps in (0.01, 0.05, 0.1, 0.3, 0.5):
        for adv in (
            fgsm(model, batch, eps),
            pgd(model, batch, eps, steps=5),
            pgd(model, batch, eps, steps=5, random_start=True, seed=seed),
        ):
            diff = float((adv.adversarials.pixels - batch.pixels).abs().max())
            if diff > 2 * eps + LINF_SLACK:
                raise AssertionError(f"{adv.config.method} eps={eps}: L∞ {diff} > {2 * eps}")
            px = adv.adversarials.pixels
            if px.min() < -1.0 or px.max() > 1.0:
                raise AssertionError(f"{adv.config.method} eps={eps}: output leaves [-1, 1]")
            checked += 1
    return f"{checked} attack runs within bounds"


def check_zero_intensity(seed: int = 0) -> str:
    model = build_model(TOY_4x4, seed=seed, with_detector=False)
    batch = toy_batch(TOY_4x4, 8, seed)
    outputs = {
        "fgsm": fgsm(model, batch, 0.0).adversarials.pixels,
        "pgd": pgd(model, batch, 0.0).adversarials.pixels,
        "jsma": jsma(model, batch, next_class_targets(batch.labels), gamma=0.0).adversarials.pixels,
        "cw_l2": cw_l2(model, batch, c=0.0).adversarials.pixels,
        "gaussian": gaussian_baseline(batch, 0.0).pixels,
    }
    for name, pixels in outputs.items():
        if not torch.equal(pixels, batch.pixels):
            raise AssertionError(f"{name} at zero intensity changed the input")
    return f"{len(outputs)} attacks are identities at zero intensity"


def check_calibration_monotone(seed: int = 0) -> str:
    rng = np.random.default_rng(seed)
    scores = rng.gamma(4.0, 2.0, size=500)
    for mode in ("population", "paper_literal"):
        alphas = [calibrate_threshold(scores, z, mode).alpha for z in (0.5, 1.0, 2.0, 3.0, 5.0)]
        if any(b < a for a, b in zip(alphas, alphas[1:])):
            raise AssertionError(f"{mode}: α not monotone in z: {alphas}")
    return "α non-decreasing in z for both modes"


def check_mode_inequality(seed: int = 0) -> str:
    rng = np.random.default_rng(seed)
    for n in (4, 10, 100):
        scores = rng.normal(10.0, 2.0, size=n).clip(0.0)
        for z in (2.0, 3.0):
            population = calibrate_threshold(scores, z, "population").alpha
            literal = calibrate_threshold(scores, z, "paper_literal").alpha
            if population < literal:
                raise AssertionError(f"n={n} z={z}: population α {population} < paper_literal α {literal}")
    return "population α >= paper_literal α for n > z"


def check_pool_unpool(seed: int = 0) -> str:
    """Max-unpool puts every pooled maximum back at its original location, zeros elsewhere."""
    gen = torch.Generator().manual_seed(seed)
    x = torch.randperm(16, generator=gen).float().view(1, 1, 4, 4)
    encoder = Encoder((1, 4, 4), (pool(),))
    decoder = Decoder((1, 2, 2), (LayerSpec("max_unpool", kernel=2),))
    features, records = encoder(x)
    restored = decoder(features, records)

    expected = np.zeros((4, 4), dtype=np.float32)
    grid = x[0, 0].numpy()
    for r in range(0, 4, 2):
        for c in range(0, 4, 2):
            window = grid[r:r + 2, c:c + 2]
            i, j = np.unravel_index(int(np.argmax(window)), window.shape)
            expected[r + i, c + j] = window[i, j]
    if not np.array_equal(restored[0, 0].detach().numpy(), expected):
        raise AssertionError("unpooled maxima are not at their pooled locations")
    return "4 maxima restored in place"


def brute_force_pair(alpha: torch.Tensor, beta: torch.Tensor, domain: torch.Tensor) -> Tuple[int, int] | None:
    best = None
    best_score = -math.inf
    dim = alpha.shape[0]
    for p in range(dim):
        if not domain[p]:
            continue
        for q in range(p + 1, dim):
            if not domain[q]:
                continue
            a = alpha[p] + alpha[q]
            b = beta[p] + beta[q]
            if a > 0 and b < 0:
                s = float(a.abs() * b.abs())
                if s > best_score:
                    best, best_score = (p, q), s
    return best


def check_jsma_pair(seed: int = 0) -> str:
    model = build_model(TOY_8x8, seed=seed, with_detector=False)
    batch = toy_batch(TOY_8x8, 3, seed, low=-1.0, high=0.5)
    for i in range(len(batch)):
        flat = batch.pixels[i].flatten()
        target = int(next_class_targets(model.predict(batch.pixels[i:i + 1]))[0])
        alpha, beta = saliency_components(model, flat, target)
        domain = flat < 1.0
        chosen = select_pixel_pair(alpha, beta, domain)
        expected = brute_force_pair(alpha, beta, domain)
        if chosen != expected:
            raise AssertionError(f"sample {i}: vectorized pair {chosen} != brute force {expected}")
    return f"{len(batch)} samples agree with exhaustive enumeration"


def check_tie_rule(seed: int = 0) -> str:
    cal = ThresholdCalibration(mean=1.0, std=0.5, n=10, z=3.0, mode="population", alpha=2.5, scored_with="plain_l2")
    if is_adversarial(cal.alpha, cal):
        raise AssertionError("score == α must be clean")
    if not is_adversarial(cal.alpha + 1e-9, cal):
        raise AssertionError("score just above α must be adversarial")
    return "ties are clean"


def check_binary_filter(seed: int = 0) -> str:
    batch = toy_batch(TOY_4x4, 8, seed)
    once = binary_filter(batch)
    twice = binary_filter(once)
    if not torch.equal(once.pixels, twice.pixels):
        raise AssertionError("binary filter is not idempotent")
    if not bool(((once.pixels == 1.0) | (once.pixels == -1.0)).all()):
        raise AssertionError("binary filter output is not in {-1, +1}")
    return "idempotent and range-preserving"


def check_mode_reduction(seed: int = 0) -> str:
    """hybrid with α = +inf labels exactly like purify_only."""
    model = build_model(TOY_4x4, seed=seed, with_detector=True)
    batch = toy_batch(TOY_4x4, 16, seed)
    cal = ThresholdCalibration(mean=0.0, std=0.0, n=2, z=3.0, mode="population", alpha=math.inf,
                               scored_with="detector", model_hash=parameter_hash(model))
    hybrid = defend_batch(model, batch, PipelineConfig("hybrid", "detector", cal))
    purify = defend_batch(model, batch, PipelineConfig("purify_only", "detector"))
    if [o.label for o in hybrid] != [o.label for o in purify]:
        raise AssertionError("hybrid(α=inf) and purify_only disagree")
    return "hybrid(α=inf) == purify_only"


def check_deterministic_init(seed: int = 0) -> str:
    a: DefendedModel = build_model(TOY_8x8, seed=seed)
    b: DefendedModel = build_model(TOY_8x8, seed=seed)
    if parameter_hash(a) != parameter_hash(b):
        raise AssertionError("same spec and seed gave different parameters")
    return "same seed, same parameters"


CHECKS: List[Tuple[str, Callable[[int], str]]] = [
    ("gradient_vs_finite_difference", check_gradient),
    ("joint_loss_gradient_vs_finite_difference", check_joint_loss_gradient),
    ("linf_bounds", check_linf_bounds),
    ("zero_intensity_identity", check_zero_intensity),
    ("calibration_monotone_in_z", check_calibration_monotone),
    ("threshold_mode_inequality", check_mode_inequality),
    ("pool_unpool_fidelity", check_pool_unpool),
    ("jsma_pair_brute_force", check_jsma_pair),
    ("tie_is_clean", check_tie_rule),
    ("binary_filter_idempotent", check_binary_filter),
    ("hybrid_infinite_alpha_is_purify", check_mode_reduction),
    ("deterministic_init", check_deterministic_init),
]


def run_verify(seed: int = 0) -> List[CheckResult]:
    results: List[CheckResult] = []
    for name, check in CHECKS:
        start = time.perf_counter()
        try:
            detail = check(seed)
            passed = True
        except Exception as e:  # a failing check is reported, not raised
            detail = f"{type(e).__name__}: {e}"
            passed = False
        elapsed = time.perf_counter() - start
        results.append(CheckResult(name, passed, detail, elapsed))
        logger.info("%s %s (%.2fs): %s", "PASS" if passed else "FAIL", name, elapsed, detail)
    return results
