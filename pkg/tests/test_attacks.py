import logging

import pytest
import torch

from dafar.attacks import (
    AdversarialSet,
    cw_l2,
    fgsm,
    gaussian_baseline,
    gaussian_noise,
    input_gradient,
    jsma,
    margin_loss,
    next_class_targets,
    pgd,
    run_attack,
    select_pixel_pair,
    to_internal,
)
from dafar.config import AttackConfig
from dafar.data import ImageBatch
from dafar.verify import TOY_8x8, check_jsma_pair, toy_batch


@pytest.fixture
def toy8_predicted(toy8_model):
    batch = toy_batch(TOY_8x8, 6, seed=4, low=-1.0, high=0.5)
    with torch.no_grad():
        labels = toy8_model.predict(batch.pixels)
    return ImageBatch(batch.pixels, labels)


def test_intensity_scale():
    assert to_internal(0.3) == pytest.approx(0.6)


def test_input_gradient_leaves_parameters_alone(toy_model, toy_clean):
    grad = input_gradient(toy_model, toy_clean.pixels, toy_clean.labels)
    assert grad.shape == toy_clean.pixels.shape
    assert all(p.grad is None for p in toy_model.parameters())


@pytest.mark.parametrize("epsilon", [0.05, 0.1, 0.3])
def test_fgsm_bounds(toy_model, toy_clean, epsilon):
    adv = fgsm(toy_model, toy_clean, epsilon)
    diff = (adv.adversarials.pixels - toy_clean.pixels).abs()
    assert float(diff.max()) <= 2 * epsilon + 1e-6
    assert float(adv.adversarials.pixels.abs().max()) <= 1.0
    assert adv.adversarials.provenance == "adversarial:fgsm"
    with torch.no_grad():
        expected = toy_model.predict(adv.adversarials.pixels) != toy_clean.labels
    assert torch.equal(adv.success_mask, expected)


def test_zero_intensity_is_identity(toy_model, toy_clean):
    assert torch.equal(fgsm(toy_model, toy_clean, 0.0).adversarials.pixels, toy_clean.pixels)
    assert torch.equal(pgd(toy_model, toy_clean, 0.0).adversarials.pixels, toy_clean.pixels)
    assert torch.equal(cw_l2(toy_model, toy_clean, c=0.0).adversarials.pixels, toy_clean.pixels)
    assert torch.equal(gaussian_baseline(toy_clean, 0.0).pixels, toy_clean.pixels)


def test_single_step_pgd_equals_fgsm(toy_model, toy_clean):
    one_step = pgd(toy_model, toy_clean, 0.2, step_size=0.2, steps=1)
    assert torch.equal(one_step.adversarials.pixels, fgsm(toy_model, toy_clean, 0.2).adversarials.pixels)


@pytest.mark.parametrize("random_start", [False, True])
def test_pgd_stays_in_ball(toy_model, toy_clean, random_start):
    adv = pgd(toy_model, toy_clean, 0.1, steps=15, random_start=random_start, seed=1)
    assert float((adv.adversarials.pixels - toy_clean.pixels).abs().max()) <= 0.2 + 1e-6
    assert float(adv.adversarials.pixels.abs().max()) <= 1.0


def test_pgd_random_start_is_seeded(toy_model, toy_clean):
    a = pgd(toy_model, toy_clean, 0.1, steps=2, random_start=True, seed=9)
    b = pgd(toy_model, toy_clean, 0.1, steps=2, random_start=True, seed=9)
    assert torch.equal(a.adversarials.pixels, b.adversarials.pixels)


def test_pgd_warns_when_budget_unreachable(toy_model, toy_clean, caplog):
    with caplog.at_level(logging.WARNING, logger="dafar.attacks"):
        pgd(toy_model, toy_clean, 0.3, step_size=0.01, steps=2)
    assert "cannot reach epsilon" in caplog.text


def test_select_pixel_pair_by_hand():
    alpha = torch.tensor([1.0, 0.5, -3.0, 0.2])
    beta = torch.tensor([-1.0, -0.5, 2.0, -0.1])
    domain = torch.ones(4, dtype=torch.bool)
    assert select_pixel_pair(alpha, beta, domain) == (0, 1)
    domain[1] = False
    assert select_pixel_pair(alpha, beta, domain) == (0, 3)
    assert select_pixel_pair(-alpha.abs(), beta, torch.ones(4, dtype=torch.bool)) is None


def test_jsma_pair_matches_brute_force():
    check_jsma_pair(seed=2)


def test_jsma_respects_pixel_budget(toy8_model, toy8_predicted):
    targets = next_class_targets(toy8_predicted.labels)
    adv = jsma(toy8_model, toy8_predicted, targets, theta=1.0, gamma=0.14)
    changed = (adv.adversarials.pixels != toy8_predicted.pixels).flatten(1).sum(dim=1)
    assert int(changed.max()) <= 8  # floor(0.14 * 64) rounded down to whole pairs
    assert float(adv.adversarials.pixels.max()) <= 1.0
    assert torch.equal(adv.targets, targets)
    with torch.no_grad():
        hit = toy8_model.predict(adv.adversarials.pixels) == targets
    assert torch.equal(adv.success_mask, hit)


def test_jsma_zero_budget(toy8_model, toy8_predicted):
    adv = jsma(toy8_model, toy8_predicted, next_class_targets(toy8_predicted.labels), gamma=0.0)
    assert torch.equal(adv.adversarials.pixels, toy8_predicted.pixels)
    assert not bool(adv.success_mask.any())


def test_jsma_rejects_true_label_target(toy8_model, toy8_predicted):
    with pytest.raises(ValueError):
        jsma(toy8_model, toy8_predicted, toy8_predicted.labels)


def test_margin_loss():
    logits = torch.tensor([[2.0, 1.0, 0.0]])
    assert margin_loss(logits, torch.tensor([0]), targeted=False, kappa=0.0).item() == pytest.approx(1.0)
    assert margin_loss(logits, torch.tensor([1]), targeted=True, kappa=0.0).item() == pytest.approx(1.0)
    assert margin_loss(logits, torch.tensor([2]), targeted=False, kappa=1.0).item() == pytest.approx(-1.0)


def test_cw_stays_in_range(toy_model, toy_clean):
    adv = cw_l2(toy_model, toy_clean, c=1.0, steps=10)
    assert float(adv.adversarials.pixels.abs().max()) <= 1.0
    assert adv.success_mask.shape == (len(toy_clean),)
    # failed samples keep their original pixels
    failed = ~adv.success_mask
    assert torch.equal(adv.adversarials.pixels[failed], toy_clean.pixels[failed])


def test_cw_search_and_targeted(toy_model, toy_clean):
    x = toy_clean.take(4)
    targets = next_class_targets(x.labels)
    adv = cw_l2(toy_model, x, target_labels=targets, steps=5, search_steps=2)
    assert adv.config.c is None
    assert torch.equal(adv.targets, targets)


def test_gaussian_noise():
    a = gaussian_noise((20000,), 0.1, seed=3)
    assert torch.equal(a, gaussian_noise((20000,), 0.1, seed=3))
    assert float(a.std()) == pytest.approx(0.2, abs=0.01)


def test_gaussian_baseline_provenance(toy_clean):
    noisy = gaussian_baseline(toy_clean, 0.1, seed=1)
    assert noisy.provenance == "noise"
    assert float(noisy.pixels.abs().max()) <= 1.0
    with pytest.raises(ValueError):
        gaussian_baseline(toy_clean, -0.1)


def test_run_attack_dispatch(toy_model, toy_clean):
    cfg = AttackConfig("pgd", epsilon=0.1, steps=2, seed=4)
    adv = run_attack(toy_model, toy_clean, cfg, batch_size=10)
    assert isinstance(adv, AdversarialSet)
    assert len(adv) == len(toy_clean)
    assert adv.config == cfg
    assert torch.equal(adv.originals.pixels, toy_clean.pixels)
    assert adv.adversarials.provenance == "adversarial:pgd"


def test_run_attack_jsma_defaults_to_next_class(toy8_model, toy8_predicted):
    adv = run_attack(toy8_model, toy8_predicted, AttackConfig("jsma", gamma=0.05), batch_size=4)
    assert torch.equal(adv.targets, next_class_targets(toy8_predicted.labels))


def test_run_attack_empty(toy_model):
    empty = ImageBatch(torch.zeros(0, 1, 4, 4), torch.zeros(0, dtype=torch.long))
    with pytest.raises(ValueError):
        run_attack(toy_model, empty, AttackConfig("fgsm"))
