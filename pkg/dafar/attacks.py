# dafar/attacks.py
# Gray-box attacks against the undefended victim F(E(.)).
#
# CONTRACT:
# - Public intensities (epsilon, sigma, step_size) are on the [0,1] pixel
#   scale; pixels live in [-1,1], so every intensity is doubled internally.
# - Attacks never touch model parameters: gradients are taken with
#   torch.autograd.grad w.r.t. the input only.
# - Outputs are clipped to [-1,1]; zero intensity / zero budget returns the
#   input bit-exactly.
# - Per-sample failure is reported in success_mask, never raised.

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import List, Optional, Tuple

import torch
import torch.nn.functional as F
from tqdm import tqdm

from dafar.config import AttackConfig
from dafar.data import NUM_CLASSES, ImageBatch, concat_batches
from dafar.models import DefendedModel


logger = logging.getLogger(__name__)

PIXEL_SCALE = 2.0  # [0,1]-scale intensity -> [-1,1]-scale distance
ATANH_SHRINK = 0.999999


def to_internal(value: float) -> float:
    return PIXEL_SCALE * value


# ----------------------------
# Data structures
# ----------------------------

@dataclass(frozen=True)
class AdversarialSet:
    originals: ImageBatch
    adversarials: ImageBatch
    config: AttackConfig
    success_mask: torch.Tensor
    targets: Optional[torch.Tensor] = None

    def __post_init__(self) -> None:
        if self.originals.pixels.shape != self.adversarials.pixels.shape:
            raise ValueError("originals and adversarials must have identical shapes")
        if self.success_mask.shape != (len(self.originals),):
            raise ValueError("success_mask must have one flag per sample")

    def __len__(self) -> int:
        return len(self.originals)

    @property
    def success_rate(self) -> float:
        if len(self) == 0:
            return float("nan")
        return float(self.success_mask.float().mean().item())


# ----------------------------
# Gradients
# ----------------------------

def input_gradient(model: DefendedModel, pixels: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """∇ₓ of the summed cross-entropy of F(E(x)); parameters get no .grad."""
    x = pixels.detach().clone().requires_grad_(True)
    with torch.enable_grad():
        loss = F.cross_entropy(model.logits(x), labels, reduction="sum")
        (grad,) = torch.autograd.grad(loss, [x])
    return grad


def _misclassified(model: DefendedModel, pixels: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    with torch.no_grad():
        return model.predict(pixels) != labels


def _result(model: DefendedModel, x: ImageBatch, adv: torch.Tensor, cfg: AttackConfig,
            success: Optional[torch.Tensor] = None, targets: Optional[torch.Tensor] = None) -> AdversarialSet:
    adversarials = x.with_pixels(adv, provenance=f"adversarial:{cfg.method}")
    if success is None:
        success = _misclassified(model, adversarials.pixels, x.labels)
    return AdversarialSet(x, adversarials, cfg, success.detach().cpu().bool(), targets)


# ----------------------------
# FGSM / PGD
# ----------------------------

def fgsm(model: DefendedModel, x: ImageBatch, epsilon: float) -> AdversarialSet:
    """x' = clip(x + ε·sign(∇ₓL(x, y))), ε doubled onto the [-1,1] scale."""
    cfg = AttackConfig(method="fgsm", epsilon=epsilon)
    if epsilon == 0.0:
        return _result(model, x, x.pixels.clone(), cfg)
    eps = to_internal(epsilon)
    grad = input_gradient(model, x.pixels, x.labels)
    adv = (x.pixels + eps * grad.sign()).clamp(-1.0, 1.0)
    return _result(model, x, adv, cfg)


def pgd(
    model: DefendedModel,
    x: ImageBatch,
    epsilon: float,
    step_size: Optional[float] = None,
    steps: int = 40,
    random_start: bool = False,
    seed: int = 0,
) -> AdversarialSet:
    """Iterated signed-gradient steps, each projected onto the ε-L∞ ball and [-1,1]."""
    step_size = epsilon / 10.0 if step_size is None else step_size
    cfg = AttackConfig(method="pgd", epsilon=epsilon, step_size=step_size if step_size > 0 else None,
                       steps=steps, random_start=random_start, seed=seed)
    if epsilon == 0.0:
        return _result(model, x, x.pixels.clone(), cfg)
    if step_size * steps < epsilon:
        logger.warning("pgd: step_size * steps = %.4f cannot reach epsilon %.4f", step_size * steps, epsilon)

    eps = to_internal(epsilon)
    alpha = to_internal(step_size)
    lower = x.pixels - eps
    upper = x.pixels + eps
    adv = x.pixels.clone()
    if random_start:
        gen = torch.Generator().manual_seed(seed)
        noise = torch.empty(adv.shape).uniform_(-eps, eps, generator=gen).to(adv.device)
        adv = (adv + noise).clamp(-1.0, 1.0)

    for _ in range(steps):
        grad = input_gradient(model, adv, x.labels)
        adv = adv + alpha * grad.sign()
        adv = torch.max(torch.min(adv, upper), lower).clamp(-1.0, 1.0)
    return _result(model, x, adv, cfg)


# ----------------------------
# JSMA
# ----------------------------

def saliency_components(model: DefendedModel, flat: torch.Tensor, target: int) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    (α, β) for one flattened sample: α = ∂Z_t/∂x, β = Σ_{j≠t} ∂Z_j/∂x,
    with Z the victim logits.
    """
    shape = (1, *model.spec.input_shape)
    jac = torch.autograd.functional.jacobian(lambda z: model.logits(z.view(shape))[0], flat)
    alpha = jac[target]
    beta = jac.sum(dim=0) - alpha
    return alpha, beta


def select_pixel_pair(alpha: torch.Tensor, beta: torch.Tensor, domain: torch.Tensor,
                      increase: bool = True) -> Optional[Tuple[int, int]]:
    """
    Pixel pair (p, q), p < q, both in the search domain, maximizing
    |α_p + α_q|·|β_p + β_q| subject to the saliency sign conditions
    (α sum > 0 and β sum < 0 when increasing pixels; flipped when decreasing).
    None when no pair qualifies.
    """
    a = alpha[:, None] + alpha[None, :]
    b = beta[:, None] + beta[None, :]
    valid = (a > 0) & (b < 0) if increase else (a < 0) & (b > 0)
    valid &= domain[:, None] & domain[None, :]
    valid.fill_diagonal_(False)
    if not bool(valid.any()):
        return None
    scores = torch.where(valid, a.abs() * b.abs(), torch.full_like(a, -math.inf))
    flat_index = int(scores.argmax().item())
    dim = alpha.shape[0]
    p, q = divmod(flat_index, dim)
    return (p, q) if p < q else (q, p)


def jsma(
    model: DefendedModel,
    x: ImageBatch,
    target_labels: torch.Tensor,
    theta: float = 1.0,
    gamma: float = 0.14,
    progress: bool = False,
) -> AdversarialSet:
    """
    Targeted saliency-map attack: repeatedly push the most salient pixel pair
    by θ until the victim predicts the target or γ·dim pixels have changed.
    """
    cfg = AttackConfig(method="jsma", theta=theta, gamma=gamma)
    if target_labels.shape != x.labels.shape:
        raise ValueError("target_labels must have one entry per sample")
    if bool((target_labels == x.labels).any()):
        raise ValueError("jsma targets must differ from the true labels")

    dim = int(x.pixels[0].numel()) if len(x) else 0
    max_pairs = int(math.floor(gamma * dim)) // 2
    increase = theta > 0
    step = to_internal(theta)

    adv = x.pixels.clone()
    success = torch.zeros(len(x), dtype=torch.bool)
    for i in tqdm(range(len(x)), desc="jsma", leave=False, disable=not progress):
        target = int(target_labels[i])
        flat = adv[i].flatten().clone()
        domain = flat < 1.0 if increase else flat > -1.0
        for _ in range(max_pairs):
            with torch.no_grad():
                if int(model.predict(flat.view(1, *model.spec.input_shape))[0]) == target:
                    break
            alpha, beta = saliency_components(model, flat, target)
            pair = select_pixel_pair(alpha, beta, domain, increase)
            if pair is None:
                break
            for pixel in pair:
                flat[pixel] = (flat[pixel] + step).clamp(-1.0, 1.0)
                domain[pixel] = False
        adv[i] = flat.view_as(adv[i]).detach()
        with torch.no_grad():
            success[i] = int(model.predict(adv[i:i + 1])[0]) == target

    return _result(model, x, adv, cfg, success=success, targets=target_labels.clone())


def next_class_targets(labels: torch.Tensor) -> torch.Tensor:
    """Deterministic targets: (y + 1) mod 10."""
    return (labels + 1) % NUM_CLASSES


# ----------------------------
# Carlini-Wagner L2
# ----------------------------

def margin_loss(logits: torch.Tensor, labels: torch.Tensor, targeted: bool, kappa: float) -> torch.Tensor:
    """
    untargeted: max(Z_y − max_{i≠y} Z_i, −κ)
    targeted:   max(max_{i≠t} Z_i − Z_t, −κ)
    """
    real = logits.gather(1, labels.view(-1, 1)).squeeze(1)
    others = logits.masked_fill(F.one_hot(labels, logits.shape[1]).bool(), -math.inf)
    other = others.max(dim=1).values
    diff = (other - real) if targeted else (real - other)
    return diff.clamp_min(-kappa)


def _cw_succeeded(logits: torch.Tensor, labels: torch.Tensor, targeted: bool, kappa: float) -> torch.Tensor:
    real = logits.gather(1, labels.view(-1, 1)).squeeze(1)
    others = logits.masked_fill(F.one_hot(labels, logits.shape[1]).bool(), -math.inf)
    other = others.max(dim=1).values
    pred = logits.argmax(dim=1)
    if targeted:
        return (real - other >= kappa) & (pred == labels)
    return (other - real >= kappa) & (pred != labels)


def cw_l2(
    model: DefendedModel,
    x: ImageBatch,
    target_labels: Optional[torch.Tensor] = None,
    c: Optional[float] = None,
    confidence: float = 0.0,
    steps: int = 200,
    search_steps: int = 5,
    c_low: float = 1e-3,
    c_high: float = 10.0,
    learning_rate: float = 1e-2,
    progress: bool = False,
) -> AdversarialSet:
    """
    Minimize ‖x' − x‖₂² + c·margin_loss over w with x' = tanh(w), so x' stays
    inside (-1, 1) without clipping. With c=None, c is searched per sample by
    bisection in log space over [c_low, c_high]; otherwise the given c is used.
    Untargeted when target_labels is None.
    """
    cfg = AttackConfig(method="cw_l2", c=c, confidence=confidence, steps=steps, search_steps=search_steps,
                       c_low=c_low, c_high=c_high, learning_rate=learning_rate)
    if c == 0.0:
        return _result(model, x, x.pixels.clone(), cfg, targets=target_labels)
    targeted = target_labels is not None
    labels = target_labels if targeted else x.labels
    n = len(x)
    original = x.pixels.detach()
    w0 = torch.atanh(original * ATANH_SHRINK)

    best_l2 = torch.full((n,), math.inf, device=original.device)
    best_adv = original.clone()
    found = torch.zeros(n, dtype=torch.bool, device=original.device)

    if c is None:
        lo = torch.full((n,), c_low, device=original.device)
        hi = torch.full((n,), c_high, device=original.device)
        const = torch.sqrt(lo * hi)
        rounds = search_steps
    else:
        const = torch.full((n,), float(c), device=original.device)
        rounds = 1

    for _ in tqdm(range(rounds), desc="cw_l2", leave=False, disable=not progress):
        w = w0.clone().requires_grad_(True)
        optimizer = torch.optim.Adam([w], lr=learning_rate)
        round_success = torch.zeros(n, dtype=torch.bool, device=original.device)
        for _ in range(steps):
            with torch.enable_grad():
                adv = torch.tanh(w)
                logits = model.logits(adv)
                l2 = (adv - original).pow(2).flatten(1).sum(dim=1)
                loss = (l2 + const * margin_loss(logits, labels, targeted, confidence)).sum()
                (grad,) = torch.autograd.grad(loss, [w])

            with torch.no_grad():
                succeeded = _cw_succeeded(logits, labels, targeted, confidence)
                improved = succeeded & (l2 < best_l2)
                best_l2 = torch.where(improved, l2, best_l2)
                best_adv[improved] = adv[improved].detach()
                found |= succeeded
                round_success |= succeeded

            optimizer.zero_grad()
            w.grad = grad
            optimizer.step()

        if c is None:
            hi = torch.where(round_success, const, hi)
            lo = torch.where(round_success, lo, const)
            const = torch.sqrt(lo * hi)

    return _result(model, x, best_adv, cfg, success=found, targets=target_labels)


# ----------------------------
# Gaussian noise
# ----------------------------

def gaussian_noise(shape: torch.Size | Tuple[int, ...], sigma: float, seed: int = 0) -> torch.Tensor:
    """N(0, 2σ) on the [-1,1] scale, i.e. N(0, σ) on the [0,1] scale."""
    gen = torch.Generator().manual_seed(seed)
    return torch.randn(tuple(shape), generator=gen) * to_internal(sigma)


def gaussian_baseline(x: ImageBatch, sigma: float, seed: int = 0) -> ImageBatch:
    if sigma < 0.0:
        raise ValueError(f"sigma must be >= 0 (got {sigma})")
    if sigma == 0.0:
        return x.with_pixels(x.pixels.clone(), provenance="noise")
    noise = gaussian_noise(x.pixels.shape, sigma, seed).to(x.pixels.device)
    return x.with_pixels((x.pixels + noise).clamp(-1.0, 1.0), provenance="noise")


# ----------------------------
# Dispatcher
# ----------------------------

def run_attack(
    model: DefendedModel,
    x: ImageBatch,
    cfg: AttackConfig,
    *,
    target_labels: Optional[torch.Tensor] = None,
    batch_size: int = 256,
    progress: bool = False,
) -> AdversarialSet:
    """Run cfg.method over x in chunks of batch_size and stitch the results."""
    if len(x) == 0:
        raise ValueError("cannot attack an empty batch")
    if cfg.method == "jsma" and target_labels is None:
        target_labels = next_class_targets(x.labels)

    parts: List[AdversarialSet] = []
    for start in range(0, len(x), batch_size):
        chunk = x.subset(slice(start, start + batch_size))
        targets = None if target_labels is None else target_labels[start:start + batch_size]
        parts.append(_run_chunk(model, chunk, cfg, targets, progress))

    return AdversarialSet(
        originals=concat_batches([p.originals for p in parts]),
        adversarials=concat_batches([p.adversarials for p in parts]),
        config=cfg,
        success_mask=torch.cat([p.success_mask for p in parts]),
        targets=None if target_labels is None else target_labels.clone(),
    )


def _run_chunk(model: DefendedModel, x: ImageBatch, cfg: AttackConfig,
               targets: Optional[torch.Tensor], progress: bool) -> AdversarialSet:
    if cfg.method == "fgsm":
        out = fgsm(model, x, cfg.epsilon)
    elif cfg.method == "pgd":
        out = pgd(model, x, cfg.epsilon, cfg.step_size, cfg.steps, cfg.random_start, cfg.seed)
    elif cfg.method == "jsma":
        assert targets is not None
        out = jsma(model, x, targets, cfg.theta, cfg.gamma, progress=progress)
    elif cfg.method == "cw_l2":
        out = cw_l2(model, x, targets, cfg.c, cfg.confidence, cfg.steps, cfg.search_steps,
                    cfg.c_low, cfg.c_high, cfg.learning_rate, progress=progress)
    else:
        noisy = gaussian_baseline(x, cfg.epsilon, cfg.seed)
        out = _result(model, x, noisy.pixels, cfg)
    return replace(out, config=cfg)
