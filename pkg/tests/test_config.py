from pathlib import Path

import pytest
import yaml

from dafar.config import AttackConfig, TrainConfig, load_config, resolve_config_path
from dafar.errors import ConfigError


REPO_ROOT = Path(__file__).resolve().parent.parent

MINIMAL = {
    "dataset": "mnist",
    "seed": 7,
    "data_root": "data/mnist",
    "train": {"epochs": 2},
    "detector_train": {"epochs": 1},
    "threshold": {"z": 3, "mode": "population"},
    "attacks": {"fgsm": {"epsilon": 0.3}, "jsma": {"gamma": 0.1}},
    "experiments": {"grids": {"fgsm": [0, 0.1, 0.3], "jsma": [0, 0.05]}},
}


def write(tmp_path, raw):
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(raw), encoding="utf-8")
    return path


@pytest.fixture(autouse=True)
def no_env_overrides(monkeypatch):
    monkeypatch.delenv("DAFAR_DATA_ROOT", raising=False)
    monkeypatch.delenv("DAFAR_CONFIG", raising=False)


def test_minimal_config_loads_with_defaults(tmp_path):
    cfg = load_config(write(tmp_path, MINIMAL))
    assert cfg.dataset == "mnist"
    assert cfg.seed == 7
    assert cfg.out_dir == Path("runs")
    assert cfg.checkpoint_dir == Path("checkpoints")
    assert cfg.scorer == "detector"
    assert cfg.train.epochs == 2
    assert cfg.train.seed == 7
    assert cfg.threshold.samples == 10000
    assert cfg.grid("fgsm") == [0.0, 0.1, 0.3]
    assert cfg.attack("jsma").gamma == 0.1
    assert cfg.baselines.classifier_attack == "fgsm"


def test_shipped_configs_load():
    mnist = load_config(REPO_ROOT / "config" / "mnist.yaml")
    cifar = load_config(REPO_ROOT / "config" / "cifar10.yaml")
    assert mnist.threshold.z == 3.0
    assert cifar.threshold.z == 2.0
    assert mnist.train.epochs == 20
    assert cifar.train.epochs == 60
    assert mnist.attack("cw_l2").steps == 200
    assert mnist.attack("cw_l2").c is None


def test_data_root_env_override(tmp_path, monkeypatch):
    monkeypatch.setenv("DAFAR_DATA_ROOT", "/elsewhere")
    assert load_config(write(tmp_path, MINIMAL)).data_root == Path("/elsewhere")


def test_missing_required_key(tmp_path):
    raw = {k: v for k, v in MINIMAL.items() if k != "threshold"}
    with pytest.raises(ConfigError, match="threshold"):
        load_config(write(tmp_path, raw))


def test_missing_file_is_config_error(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "nope.yaml")


@pytest.mark.parametrize("grid", [[0.3, 0.1], [0, -0.1], []])
def test_bad_grid(tmp_path, grid):
    raw = dict(MINIMAL, experiments={"grids": {"fgsm": grid}})
    with pytest.raises(ConfigError):
        load_config(write(tmp_path, raw))


def test_grid_needs_attack_section(tmp_path):
    raw = dict(MINIMAL, experiments={"grids": {"pgd": [0, 0.1]}})
    with pytest.raises(ConfigError, match="attacks.pgd"):
        load_config(write(tmp_path, raw))


def test_unknown_attack_parameter(tmp_path):
    raw = dict(MINIMAL, attacks={"fgsm": {"epsilon": 0.3, "radius": 2}})
    with pytest.raises(ConfigError, match="attacks.fgsm"):
        load_config(write(tmp_path, raw))


def test_classifier_attack_must_be_configured(tmp_path):
    raw = dict(MINIMAL, baselines={"classifier_attack": "pgd"})
    with pytest.raises(ConfigError, match="classifier_attack"):
        load_config(write(tmp_path, raw))


@pytest.mark.parametrize("threshold", [{"z": 0, "mode": "population"}, {"z": 3, "mode": "median"}])
def test_bad_threshold(tmp_path, threshold):
    with pytest.raises(ConfigError):
        load_config(write(tmp_path, dict(MINIMAL, threshold=threshold)))


def test_config_error_is_value_error():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)


def test_resolve_config_path(monkeypatch):
    assert resolve_config_path("mnist") == Path("config/mnist.yaml")
    monkeypatch.setenv("DAFAR_CONFIG", "custom.yaml")
    assert resolve_config_path("mnist") == Path("custom.yaml")
    assert resolve_config_path("mnist", Path("x.yaml")) == Path("x.yaml")


def test_intensity_knobs():
    assert AttackConfig("fgsm", epsilon=0.2).intensity == 0.2
    assert AttackConfig("jsma").with_intensity(0.05).gamma == 0.05
    assert AttackConfig("cw_l2").intensity == 0.0
    assert AttackConfig("cw_l2").with_intensity(1.0).c == 1.0


def test_attack_config_round_trips_through_dict():
    cfg = AttackConfig("pgd", epsilon=0.1, steps=7, random_start=True, seed=3)
    assert AttackConfig.from_dict(cfg.to_dict()) == cfg


def test_attack_config_validation():
    with pytest.raises(ConfigError):
        AttackConfig("deepfool")
    with pytest.raises(ConfigError):
        AttackConfig("fgsm", epsilon=-0.1)
    with pytest.raises(ConfigError):
        AttackConfig("jsma", gamma=1.5)


def test_snapshot_is_plain_data(tmp_path):
    snap = load_config(write(tmp_path, MINIMAL)).snapshot()
    assert snap["data_root"] == "data/mnist"
    assert snap["experiments"]["grids"]["fgsm"] == [0.0, 0.1, 0.3]
    assert snap["attacks"]["fgsm"]["epsilon"] == 0.3
