import math

import pytest
import torch
import torch.nn.functional as F

from dafar.config import TrainConfig
from dafar.data import ImageBatch
from dafar.errors import NumericalDivergenceError
from dafar.models import ForwardResult, parameter_hash
from dafar.training import (
    ErrorDataset,
    collect_errors,
    cross_entropy_from_probabilities,
    joint_loss,
    load_training_state,
    reconstruction_norms,
    train_detector,
    train_joint,
)
from dafar.verify import check_joint_loss_gradient


def test_cross_entropy_matches_torch():
    logits = torch.tensor([[2.0, 0.5, -1.0], [0.1, 0.2, 0.3]])
    labels = torch.tensor([0, 2])
    ours = cross_entropy_from_probabilities(F.softmax(logits, dim=1), labels)
    assert torch.allclose(ours, F.cross_entropy(logits, labels, reduction="none"), atol=1e-6)


def test_cross_entropy_floor():
    probs = torch.tensor([[1.0, 0.0]])
    assert cross_entropy_from_probabilities(probs, torch.tensor([1])).item() == pytest.approx(-math.log(1e-12))


def test_joint_loss_terms(toy_model, toy_clean):
    loss = joint_loss(toy_model, toy_clean, loss_weight=0.5)
    assert loss.total.item() == pytest.approx(0.5 * loss.reconstruction.item() + loss.cross_entropy.item(), rel=1e-5)
    with torch.no_grad():
        recon = reconstruction_norms(toy_clean.pixels, toy_model.reconstruct(toy_clean.pixels)).mean()
    assert loss.reconstruction.item() == pytest.approx(recon.item(), rel=1e-5)
    assert joint_loss(toy_model, toy_clean, 0.0).total.item() == pytest.approx(loss.cross_entropy.item(), rel=1e-5)


class FixedForward:
    """Stands in for a DefendedModel with a known forward pass."""

    def __init__(self, probabilities, reconstruction):
        self.probabilities = torch.tensor(probabilities)
        self.reconstruction = torch.tensor(reconstruction)

    def __call__(self, x):
        return ForwardResult(features=x, logits=self.probabilities.log(),
                             probabilities=self.probabilities, reconstruction=self.reconstruction)


def test_joint_loss_hand_computed():
    # two 1x1x2 images, two classes
    batch = ImageBatch(torch.tensor([[[[0.5, 0.0]]], [[[0.0, 0.0]]]]), torch.tensor([0, 1]))
    model = FixedForward(probabilities=[[0.7, 0.3], [0.2, 0.8]],
                         reconstruction=[[[[0.3, 0.1]]], [[[0.3, 0.4]]]])
    loss = joint_loss(model, batch, loss_weight=0.5)
    # per-sample L2 norms: ‖(0.2, -0.1)‖ = sqrt(0.05), ‖(-0.3, -0.4)‖ = 0.5
    expected_recon = (math.sqrt(0.05) + 0.5) / 2
    expected_ce = (-math.log(0.7) - math.log(0.8)) / 2
    assert loss.reconstruction.item() == pytest.approx(expected_recon, rel=1e-5)
    assert loss.cross_entropy.item() == pytest.approx(expected_ce, rel=1e-5)
    assert loss.total.item() == pytest.approx(0.5 * expected_recon + expected_ce, rel=1e-5)
    assert loss.total.item() == pytest.approx(0.470811, abs=2e-6)


def test_joint_loss_parameter_gradient():
    assert "relative error" in check_joint_loss_gradient(seed=0)
    assert "relative error" in check_joint_loss_gradient(seed=3)


def test_non_finite_loss_raises(toy_model, toy_clean):
    with torch.no_grad():
        toy_model.head.layers[-1].bias.fill_(float("nan"))
    with pytest.raises(NumericalDivergenceError):
        joint_loss(toy_model, toy_clean)


def test_train_joint_leaves_detector_alone(toy_model, toy_clean):
    detector_before = parameter_hash(toy_model.detector)
    victim_before = parameter_hash(toy_model.encoder)
    result = train_joint(toy_model, toy_clean, TrainConfig(epochs=2, batch_size=8), progress=False)
    assert [e.epoch for e in result.log] == [1, 2]
    assert all(e.steps == 4 for e in result.log)
    assert all(math.isfinite(e.joint_loss) for e in result.log)
    assert parameter_hash(toy_model.detector) == detector_before
    assert parameter_hash(toy_model.encoder) != victim_before
    assert result.optimizer_state is not None


def test_empty_stream_changes_nothing(toy_model):
    before = parameter_hash(toy_model)
    empty = ImageBatch(torch.zeros(0, 1, 4, 4), torch.zeros(0, dtype=torch.long))
    result = train_joint(toy_model, empty, TrainConfig(epochs=1), progress=False)
    assert parameter_hash(toy_model) == before
    assert result.log[0].steps == 0
    assert math.isnan(result.log[0].joint_loss)


def test_resume_continues_from_checkpoint(tmp_path, toy_model, toy_clean):
    path = tmp_path / "toy.pt"
    train_joint(toy_model, toy_clean, TrainConfig(epochs=1, batch_size=16), checkpoint_path=path, progress=False)

    model, epoch, optimizer_state, log = load_training_state(path)
    assert epoch == 1
    assert optimizer_state is not None
    assert len(log) == 1
    assert parameter_hash(model) == parameter_hash(toy_model)

    result = train_joint(model, toy_clean, TrainConfig(epochs=2, batch_size=16), start_epoch=epoch,
                         optimizer_state=optimizer_state, log=log, checkpoint_path=path, progress=False)
    assert [e.epoch for e in result.log] == [1, 2]
    assert load_training_state(path)[1] == 2


def test_collect_errors(toy_model, toy_clean):
    errors = collect_errors(toy_model, toy_clean, batch_size=7)
    assert errors.records.shape == (32, 16)
    assert errors.model_hash == parameter_hash(toy_model)
    with torch.no_grad():
        expected = (toy_clean.pixels - toy_model.reconstruct(toy_clean.pixels)).flatten(1)
    assert torch.allclose(errors.records, expected, atol=1e-6)


def test_collect_errors_refuses_adversarial_input(toy_model, toy_clean):
    with pytest.raises(ValueError, match="clean"):
        collect_errors(toy_model, toy_clean.with_pixels(toy_clean.pixels, "adversarial:fgsm"))
    with pytest.raises(ValueError):
        ErrorDataset(torch.zeros(2, 16), "noise", "")


def test_error_dataset_only_from_collect_errors(toy_model, toy_clean):
    with pytest.raises(ValueError, match="collect_errors"):
        ErrorDataset(torch.zeros(2, 16), "clean", "h")
    adversarial = toy_clean.with_pixels(toy_clean.pixels, "adversarial:fgsm")
    with pytest.raises(ValueError):
        ErrorDataset(adversarial.pixels.flatten(1), "clean", parameter_hash(toy_model))


def test_error_dataset_split(toy_model, toy_clean):
    data = collect_errors(toy_model, toy_clean)
    first, held = data.split(3)
    assert len(first) == 29 and len(held) == 3
    assert torch.equal(held.records, data.records[29:])
    assert held.provenance == "clean" and held.model_hash == data.model_hash
    assert first.split(0)[1].records.shape == (0, 16)


def test_train_detector(toy_model, toy_clean):
    errors = collect_errors(toy_model, toy_clean)
    result = train_detector(toy_model.detector, errors, TrainConfig(epochs=3, batch_size=8), progress=False)
    assert [e.epoch for e in result.log] == [1, 2, 3]
    assert all(e.detector_loss >= 0.0 for e in result.log)


def test_train_detector_record_length(toy8_model, toy_model, toy_clean):
    errors = collect_errors(toy_model, toy_clean)
    with pytest.raises(ValueError, match="detector expects"):
        train_detector(toy8_model.detector, errors, TrainConfig(epochs=1), progress=False)
