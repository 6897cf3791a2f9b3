# dafar/config.py
# Typed config loading + validation for the DAFAR experiments.
# This module should be pure: load YAML -> validate -> return dataclasses.
# No dataset reads, no model construction, no filesystem writes.

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence

import yaml

from dafar.errors import ConfigError


DATASETS: tuple[str, ...] = ("mnist", "cifar10")
ATTACK_METHODS: tuple[str, ...] = ("fgsm", "pgd", "jsma", "cw_l2", "gaussian")
OPTIMIZERS: tuple[str, ...] = ("adam", "sgd")
THRESHOLD_MODES: tuple[str, ...] = ("population", "paper_literal")
SCORERS: tuple[str, ...] = ("detector", "plain_l2")

# Which AttackConfig field an experiment's intensity axis moves, per method.
INTENSITY_KNOBS: Mapping[str, str] = {
    "fgsm": "epsilon",
    "pgd": "epsilon",
    "gaussian": "epsilon",
    "jsma": "gamma",
    "cw_l2": "c",
}


# ----------------------------
# Dataclasses
# ----------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 128
    learning_rate: float = 1e-3
    loss_weight: float = 1.0  # λ, weights the reconstruction term
    optimizer: str = "adam"
    momentum: float = 0.9  # sgd only
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1 (got {self.epochs})")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1 (got {self.batch_size})")
        if not self.learning_rate > 0.0:
            raise ConfigError(f"learning_rate must be > 0 (got {self.learning_rate})")
        if self.loss_weight < 0.0:
            raise ConfigError(f"loss_weight must be >= 0 (got {self.loss_weight})")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {list(OPTIMIZERS)} (got {self.optimizer!r})")
        if self.weight_decay < 0.0:
            raise ConfigError("weight_decay must be >= 0")


@dataclass(frozen=True)
class AttackConfig:
    """
    Parameters of one attack run.

    All intensities are on the [0,1] pixel scale (the scale attack strengths
    are usually reported on); attacks convert to the internal [-1,1] range.
    """
    method: str
    epsilon: float = 0.3
    steps: int = 40
    step_size: Optional[float] = None  # pgd; None means epsilon / 10
    random_start: bool = False
    confidence: float = 0.0  # κ
    c: Optional[float] = None  # cw tradeoff; None means bisection search
    c_low: float = 1e-3
    c_high: float = 10.0
    search_steps: int = 5
    learning_rate: float = 1e-2  # cw inner optimizer
    theta: float = 1.0
    gamma: float = 0.14
    seed: int = 0

    def __post_init__(self) -> None:
        if self.method not in ATTACK_METHODS:
            raise ConfigError(f"attack method must be one of {list(ATTACK_METHODS)} (got {self.method!r})")
        if self.epsilon < 0.0:
            raise ConfigError(f"epsilon must be >= 0 (got {self.epsilon})")
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1 (got {self.steps})")
        if self.step_size is not None and not self.step_size > 0.0:
            raise ConfigError(f"step_size must be > 0 (got {self.step_size})")
        if self.c is not None and self.c < 0.0:
            raise ConfigError(f"c must be >= 0 (got {self.c})")
        if not 0.0 < self.c_low <= self.c_high:
            raise ConfigError("c_low must be > 0 and <= c_high")
        if self.search_steps < 1:
            raise ConfigError("search_steps must be >= 1")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f"gamma must be in [0, 1] (got {self.gamma})")
        if self.theta == 0.0:
            raise ConfigError("theta must be non-zero")

    @property
    def intensity(self) -> float:
        value = getattr(self, INTENSITY_KNOBS[self.method])
        return 0.0 if value is None else float(value)

    def with_intensity(self, value: float) -> "AttackConfig":
        return replace(self, **{INTENSITY_KNOBS[self.method]: float(value)})

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "AttackConfig":
        return cls(**dict(raw))


@dataclass(frozen=True)
class ThresholdConfig:
    z: float = 3.0
    mode: str = "population"
    samples: int = 10000  # clean training samples scored for calibration


@dataclass(frozen=True)
class ExperimentConfig:
    samples: int = 1000
    batch_size: int = 256
    interference_pairs: int = 1000
    bins: int = 50
    grids: Mapping[str, Sequence[float]] = field(default_factory=dict)
    methods: Sequence[str] = ("fgsm", "jsma", "cw_l2", "pgd")


@dataclass(frozen=True)
class BaselineConfig:
    filter_threshold: float = 0.0
    denoising_sigma: float = 0.1
    classifier_attack: str = "fgsm"
    classifier_samples: int = 10000
    train: TrainConfig = field(default_factory=TrainConfig)


@dataclass(frozen=True)
class DafarConfig:
    dataset: str
    seed: int
    data_root: Path
    out_dir: Path
    checkpoint_dir: Path
    scorer: str
    train: TrainConfig
    detector_train: TrainConfig
    threshold: ThresholdConfig
    attacks: Mapping[str, AttackConfig]
    experiments: ExperimentConfig
    baselines: BaselineConfig

    def attack(self, method: str) -> AttackConfig:
        if method not in self.attacks:
            raise ConfigError(f"No attack defaults configured for {method!r}. "
                              f"Available: {sorted(self.attacks)}")
        return replace(self.attacks[method], seed=self.seed)

    def grid(self, method: str) -> List[float]:
        if method not in self.experiments.grids:
            raise ConfigError(f"No intensity grid configured for {method!r}")
        return [float(v) for v in self.experiments.grids[method]]

    def snapshot(self) -> Dict[str, Any]:
        """JSON-serializable copy, for run manifests."""
        raw = asdict(self)
        for key in ("data_root", "out_dir", "checkpoint_dir"):
            raw[key] = str(raw[key])
        raw["experiments"]["grids"] = {k: list(v) for k, v in self.experiments.grids.items()}
        raw["experiments"]["methods"] = list(self.experiments.methods)
        return raw


# ----------------------------
# Public API
# ----------------------------

def resolve_config_path(dataset: str, explicit: Optional[Path] = None) -> Path:
    """--config flag, else DAFAR_CONFIG, else config/<dataset>.yaml."""
    if explicit is not None:
        return explicit
    env_path = os.getenv("DAFAR_CONFIG")
    if env_path:
        return Path(env_path)
    return Path("config") / f"{dataset}.yaml"


def load_config(path: Path) -> DafarConfig:
    raw = _load_yaml(path)
    _require_keys(raw, ["dataset", "seed", "data_root", "train", "detector_train", "threshold",
                        "attacks", "experiments"], ctx=path.name)

    dataset = _as_str(raw["dataset"], "dataset")
    if dataset not in DATASETS:
        raise ConfigError(f"dataset must be one of {list(DATASETS)} (got {dataset!r})")
    seed = _as_int(raw["seed"], "seed")

    data_root = Path(os.getenv("DAFAR_DATA_ROOT") or _as_str(raw["data_root"], "data_root"))
    out_dir = Path(_as_str(raw.get("out_dir", "runs"), "out_dir"))
    checkpoint_dir = Path(_as_str(raw.get("checkpoint_dir", "checkpoints"), "checkpoint_dir"))

    scorer = _as_str(raw.get("scorer", "detector"), "scorer")
    if scorer not in SCORERS:
        raise ConfigError(f"scorer must be one of {list(SCORERS)} (got {scorer!r})")

    train = _parse_train(raw["train"], "train", seed)
    detector_train = _parse_train(raw["detector_train"], "detector_train", seed)

    th_raw = _as_dict(raw["threshold"], "threshold")
    _require_keys(th_raw, ["z", "mode"], ctx="threshold")
    threshold = ThresholdConfig(
        z=_as_float(th_raw["z"], "threshold.z"),
        mode=_as_str(th_raw["mode"], "threshold.mode"),
        samples=_as_int(th_raw.get("samples", 10000), "threshold.samples"),
    )
    if not threshold.z > 0.0:
        raise ConfigError("threshold.z must be > 0")
    if threshold.mode not in THRESHOLD_MODES:
        raise ConfigError(f"threshold.mode must be one of {list(THRESHOLD_MODES)}")
    if threshold.samples < 2:
        raise ConfigError("threshold.samples must be >= 2")

    attacks_raw = _as_dict(raw["attacks"], "attacks")
    attacks: Dict[str, AttackConfig] = {}
    for method, params in attacks_raw.items():
        params = _as_dict(params or {}, f"attacks.{method}")
        try:
            attacks[method] = AttackConfig(method=method, seed=seed, **params)
        except TypeError as e:
            raise ConfigError(f"attacks.{method}: {e}") from e

    experiments = _parse_experiments(raw["experiments"])
    for method in experiments.grids:
        if method not in attacks:
            raise ConfigError(f"experiments.grids.{method} has no matching attacks.{method} section")

    bl_raw = _as_dict(raw.get("baselines", {}) or {}, "baselines")
    baselines = BaselineConfig(
        filter_threshold=_as_float(bl_raw.get("filter_threshold", 0.0), "baselines.filter_threshold"),
        denoising_sigma=_as_float(bl_raw.get("denoising_sigma", 0.1), "baselines.denoising_sigma"),
        classifier_attack=_as_str(bl_raw.get("classifier_attack", "fgsm"), "baselines.classifier_attack"),
        classifier_samples=_as_int(bl_raw.get("classifier_samples", 10000), "baselines.classifier_samples"),
        train=_parse_train(bl_raw.get("train", {}) or {}, "baselines.train", seed),
    )
    if not -1.0 <= baselines.filter_threshold <= 1.0:
        raise ConfigError("baselines.filter_threshold must be in [-1, 1]")
    if baselines.denoising_sigma < 0.0:
        raise ConfigError("baselines.denoising_sigma must be >= 0")
    if baselines.classifier_attack not in attacks:
        raise ConfigError(f"baselines.classifier_attack {baselines.classifier_attack!r} has no attacks section")

    return DafarConfig(
        dataset=dataset,
        seed=seed,
        data_root=data_root,
        out_dir=out_dir,
        checkpoint_dir=checkpoint_dir,
        scorer=scorer,
        train=train,
        detector_train=detector_train,
        threshold=threshold,
        attacks=attacks,
        experiments=experiments,
        baselines=baselines,
    )


def _parse_train(v: Any, field_name: str, seed: int) -> TrainConfig:
    raw = _as_dict(v, field_name)
    defaults = TrainConfig()
    return TrainConfig(
        epochs=_as_int(raw.get("epochs", defaults.epochs), f"{field_name}.epochs"),
        batch_size=_as_int(raw.get("batch_size", defaults.batch_size), f"{field_name}.batch_size"),
        learning_rate=_as_float(raw.get("learning_rate", defaults.learning_rate), f"{field_name}.learning_rate"),
        loss_weight=_as_float(raw.get("loss_weight", defaults.loss_weight), f"{field_name}.loss_weight"),
        optimizer=_as_str(raw.get("optimizer", defaults.optimizer), f"{field_name}.optimizer"),
        momentum=_as_float(raw.get("momentum", defaults.momentum), f"{field_name}.momentum"),
        weight_decay=_as_float(raw.get("weight_decay", defaults.weight_decay), f"{field_name}.weight_decay"),
        seed=seed,
    )


def _parse_experiments(v: Any) -> ExperimentConfig:
    raw = _as_dict(v, "experiments")
    grids_raw = _as_dict(raw.get("grids", {}) or {}, "experiments.grids")
    grids: Dict[str, List[float]] = {}
    for method, values in grids_raw.items():
        grid = _as_float_list(values, f"experiments.grids.{method}")
        if not grid:
            raise ConfigError(f"experiments.grids.{method} must be non-empty")
        if any(x < 0.0 for x in grid):
            raise ConfigError(f"experiments.grids.{method} values must be >= 0")
        if grid != sorted(grid):
            raise ConfigError(f"experiments.grids.{method} must be sorted ascending")
        grids[method] = grid

    methods = _as_str_list(raw.get("methods", ["fgsm", "jsma", "cw_l2", "pgd"]), "experiments.methods")
    exp = ExperimentConfig(
        samples=_as_int(raw.get("samples", 1000), "experiments.samples"),
        batch_size=_as_int(raw.get("batch_size", 256), "experiments.batch_size"),
        interference_pairs=_as_int(raw.get("interference_pairs", 1000), "experiments.interference_pairs"),
        bins=_as_int(raw.get("bins", 50), "experiments.bins"),
        grids=grids,
        methods=methods,
    )
    if exp.samples <= 0 or exp.batch_size <= 0 or exp.interference_pairs <= 0:
        raise ConfigError("experiments.samples/batch_size/interference_pairs must be > 0")
    if exp.bins < 2:
        raise ConfigError("experiments.bins must be >= 2")
    return exp


# ----------------------------
# YAML + validation helpers
# ----------------------------

def _load_yaml(path: Path) -> Dict[str, Any]:
    if not path.exists():
        raise ConfigError(f"Config not found: {path}")
    if not path.is_file():
        raise ConfigError(f"Config path is not a file: {path}")

    data = yaml.safe_load(path.read_text(encoding="utf-8"))
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"Top-level YAML must be a mapping/object: {path}")
    return data


def _require_keys(d: Mapping[str, Any], keys: Sequence[str], *, ctx: str) -> None:
    missing = [k for k in keys if k not in d]
    if missing:
        raise ConfigError(f"Missing required key(s) in {ctx}: {missing}")


def _as_dict(v: Any, field_name: str) -> Dict[str, Any]:
    if not isinstance(v, dict):
        raise ConfigError(f"{field_name} must be a mapping/object")
    return v


def _as_int(v: Any, field_name: str) -> int:
    if isinstance(v, bool):
        raise ConfigError(f"{field_name} must be an int (got bool)")
    if isinstance(v, int):
        return v
    if isinstance(v, str) and v.strip().lstrip("-").isdigit():
        return int(v.strip())
    raise ConfigError(f"{field_name} must be an int")


def _as_float(v: Any, field_name: str) -> float:
    if isinstance(v, bool):
        raise ConfigError(f"{field_name} must be a float (got bool)")
    if isinstance(v, (int, float)):
        return float(v)
    if isinstance(v, str):
        try:
            return float(v.strip())
        except ValueError:
            pass
    raise ConfigError(f"{field_name} must be a float")


def _as_str(v: Any, field_name: str) -> str:
    if not isinstance(v, str):
        raise ConfigError(f"{field_name} must be a string")
    s = v.strip()
    if not s:
        raise ConfigError(f"{field_name} must be a non-empty string")
    return s


def _as_str_list(v: Any, field_name: str) -> List[str]:
    if not isinstance(v, list):
        raise ConfigError(f"{field_name} must be a list")
    return [_as_str(item, f"{field_name}[{i}]") for i, item in enumerate(v)]


def _as_float_list(v: Any, field_name: str) -> List[float]:
    if not isinstance(v, list):
        raise ConfigError(f"{field_name} must be a list")
    return [_as_float(item, f"{field_name}[{i}]") for i, item in enumerate(v)]
