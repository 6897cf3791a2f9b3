# dafar/baselines.py
# Comparison methods: 1-bit binary filter, denoising autoencoder, and a
# supervised binary-classifier detector.
#
# CONTRACT:
# - Baselines are separate modules with their own parameters; they never
#   share tensors with the defended model.
# - The binary classifier remembers the AttackConfig its adversarial training
#   data came from.

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F
from tqdm import tqdm

from dafar.attacks import AdversarialSet, to_internal
from dafar.config import AttackConfig, TrainConfig
from dafar.data import ImageBatch
from dafar.errors import NumericalDivergenceError
from dafar.models import (
    Decoder,
    Encoder,
    Head,
    NetworkSpec,
    atomic_torch_save,
    init_parameters,
    linear,
    parameter_hash,
)
from dafar.training import TrainResult, make_optimizer, reconstruction_norms


logger = logging.getLogger(__name__)

BASELINE_KINDS: tuple[str, ...] = ("binary_filter", "denoising_ae", "binary_classifier")
BASELINE_FORMAT_VERSION = 1


@dataclass(frozen=True)
class BaselineKind:
    kind: str
    params: Mapping[str, Any] = field(default_factory=dict)
    attack: Optional[AttackConfig] = None  # binary_classifier only

    def __post_init__(self) -> None:
        if self.kind not in BASELINE_KINDS:
            raise ValueError(f"Unknown baseline {self.kind!r}. Available: {list(BASELINE_KINDS)}")
        if self.kind == "binary_classifier" and self.attack is None:
            raise ValueError("binary_classifier must record the AttackConfig of its training data")


# ----------------------------
# Binary filter
# ----------------------------

def binary_filter(x: ImageBatch, t: float = 0.0) -> ImageBatch:
    """pixel -> +1 if pixel > t else -1."""
    if not -1.0 <= t <= 1.0:
        raise ValueError(f"threshold must be in [-1, 1] (got {t})")
    pixels = torch.where(x.pixels > t, torch.ones_like(x.pixels), -torch.ones_like(x.pixels))
    return x.with_pixels(pixels, provenance=x.provenance)


# ----------------------------
# Denoising autoencoder
# ----------------------------

class DenoisingAutoencoder(nn.Module):
    """Same encoder / mirrored decoder shape as the feedback autoencoder, trained separately."""

    def __init__(self, spec: NetworkSpec) -> None:
        super().__init__()
        self.spec = spec
        self.encoder = Encoder(spec.input_shape, spec.encoder_layers)
        self.decoder = Decoder(self.encoder.output_shape, spec.decoder_layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        features, records = self.encoder(x)
        return self.decoder(features, records)


def train_denoising_ae(
    spec: NetworkSpec,
    clean: ImageBatch,
    sigma: float,
    cfg: TrainConfig,
    *,
    progress: bool = True,
) -> TrainResult:
    """Fit AE(x + N(0, σ)) ≈ x; σ on the [0,1] pixel scale, σ=0 gives a plain autoencoder."""
    if sigma < 0.0:
        raise ValueError(f"sigma must be >= 0 (got {sigma})")
    ae = DenoisingAutoencoder(spec)
    init_parameters(ae, cfg.seed + 1)
    optimizer = make_optimizer(ae.parameters(), cfg)
    noise_gen = torch.Generator().manual_seed(cfg.seed)
    history: List[float] = []

    for epoch in range(cfg.epochs):
        ae.train()
        total = 0.0
        seen = 0
        batches = clean.batches(cfg.batch_size, shuffle_seed=cfg.seed * 100003 + epoch)
        for batch in tqdm(batches, total=math.ceil(len(clean) / cfg.batch_size),
                          desc=f"denoiser {epoch + 1}/{cfg.epochs}", leave=False, disable=not progress):
            noise = torch.randn(batch.pixels.shape, generator=noise_gen).to(batch.pixels.device)
            noisy = (batch.pixels + to_internal(sigma) * noise).clamp(-1.0, 1.0)
            loss = reconstruction_norms(batch.pixels, ae(noisy)).mean()
            if not torch.isfinite(loss):
                raise NumericalDivergenceError(f"denoiser loss is not finite at epoch {epoch + 1}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += loss.item() * len(batch)
            seen += len(batch)
        history.append(total / seen if seen else float("nan"))
        logger.info("denoiser epoch %d: loss=%.4f", epoch + 1, history[-1])

    ae.eval()
    return TrainResult(model=ae, log=history)


def purify(ae: DenoisingAutoencoder, x: ImageBatch, batch_size: int = 512) -> ImageBatch:
    out = []
    with torch.no_grad():
        for sub in x.batches(batch_size):
            out.append(ae(sub.pixels).clamp(-1.0, 1.0))
    pixels = torch.cat(out) if out else x.pixels.clone()
    return x.with_pixels(pixels, provenance=x.provenance)


# ----------------------------
# Binary classifier detector
# ----------------------------

def binary_spec(spec: NetworkSpec) -> NetworkSpec:
    """The victim architecture with a 2-way output (0 = clean, 1 = adversarial)."""
    layers = spec.layers[:-1] + (linear(2, "softmax"),)
    return NetworkSpec(f"{spec.name}_binary", spec.input_shape, layers, spec.feedback_position, (), num_classes=2)


class BinaryClassifierDetector(nn.Module):
    def __init__(self, spec: NetworkSpec, attack: AttackConfig) -> None:
        super().__init__()
        self.spec = binary_spec(spec)
        self.attack = attack
        self.encoder = Encoder(self.spec.input_shape, self.spec.encoder_layers)
        self.head = Head(self.encoder.output_shape, self.spec.head_layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        features, _ = self.encoder(x)
        return self.head(features)

    def flag(self, x: torch.Tensor, batch_size: int = 512) -> torch.Tensor:
        """True where the input is judged adversarial."""
        out = []
        with torch.no_grad():
            for start in range(0, x.shape[0], batch_size):
                out.append(self(x[start:start + batch_size]).argmax(dim=1) == 1)
        return torch.cat(out) if out else torch.zeros(0, dtype=torch.bool)


def train_binary_classifier(
    spec: NetworkSpec,
    clean: ImageBatch,
    adversarial: AdversarialSet,
    cfg: TrainConfig,
    *,
    progress: bool = True,
) -> TrainResult:
    if len(adversarial) == 0:
        raise ValueError("binary classifier needs a non-empty adversarial training set")
    if len(clean) == 0:
        raise ValueError("binary classifier needs a non-empty clean training set")

    clf = BinaryClassifierDetector(spec, adversarial.config)
    init_parameters(clf, cfg.seed + 2)
    optimizer = make_optimizer(clf.parameters(), cfg)
    data = ImageBatch(
        pixels=torch.cat([clean.pixels, adversarial.adversarials.pixels]),
        labels=torch.cat([
            torch.zeros(len(clean), dtype=torch.long, device=clean.pixels.device),
            torch.ones(len(adversarial), dtype=torch.long, device=clean.pixels.device),
        ]),
        provenance="mixed",
    )
    history: List[float] = []

    for epoch in range(cfg.epochs):
        clf.train()
        total = 0.0
        batches = data.batches(cfg.batch_size, shuffle_seed=cfg.seed * 100003 + epoch)
        for batch in tqdm(batches, total=math.ceil(len(data) / cfg.batch_size),
                          desc=f"binary classifier {epoch + 1}/{cfg.epochs}", leave=False, disable=not progress):
            loss = F.cross_entropy(clf(batch.pixels), batch.labels)
            if not torch.isfinite(loss):
                raise NumericalDivergenceError(f"binary classifier loss is not finite at epoch {epoch + 1}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += loss.item() * len(batch)
        history.append(total / len(data))
        logger.info("binary classifier epoch %d: loss=%.4f", epoch + 1, history[-1])

    clf.eval()
    return TrainResult(model=clf, log=history)


def binary_accuracy(clf: BinaryClassifierDetector, clean: torch.Tensor, adversarial: torch.Tensor) -> float:
    n = clean.shape[0] + adversarial.shape[0]
    if n == 0:
        return float("nan")
    correct = int((~clf.flag(clean)).sum().item()) + int(clf.flag(adversarial).sum().item())
    return correct / n


# ----------------------------
# Independence + persistence
# ----------------------------

def parameters_disjoint(a: nn.Module, b: nn.Module) -> bool:
    """No shared parameter storage and different parameter hashes."""
    ptrs = {p.data_ptr() for p in a.parameters()}
    if any(p.data_ptr() in ptrs for p in b.parameters()):
        return False
    return parameter_hash(a) != parameter_hash(b)


def save_baseline(module: nn.Module, kind: BaselineKind, path: Path) -> str:
    if not isinstance(module, (DenoisingAutoencoder, BinaryClassifierDetector)):
        raise TypeError(f"not a baseline module: {type(module).__name__}")
    payload: Dict[str, Any] = {
        "format_version": BASELINE_FORMAT_VERSION,
        "kind": kind.kind,
        "params": dict(kind.params),
        "attack": kind.attack.to_dict() if kind.attack else None,
        "spec": module.spec.to_dict(),
        "state_dict": {k: v.detach().cpu() for k, v in module.state_dict().items()},
        "parameter_hash": parameter_hash(module),
    }
    atomic_torch_save(payload, path)
    return payload["parameter_hash"]


def load_baseline(path: Path, victim_spec: NetworkSpec) -> tuple[nn.Module, BaselineKind]:
    if not path.is_file():
        raise FileNotFoundError(f"Baseline checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("format_version") != BASELINE_FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported baseline format_version {payload.get('format_version')!r}")
    attack = AttackConfig.from_dict(payload["attack"]) if payload.get("attack") else None
    kind = BaselineKind(payload["kind"], payload.get("params", {}), attack)
    module: nn.Module
    if kind.kind == "denoising_ae":
        module = DenoisingAutoencoder(NetworkSpec.from_dict(payload["spec"]))
    elif kind.kind == "binary_classifier":
        assert attack is not None
        module = BinaryClassifierDetector(victim_spec, attack)
    else:
        raise ValueError(f"{path}: {kind.kind} has no parameters to load")
    module.load_state_dict(payload["state_dict"])
    module.eval()
    return module, kind
