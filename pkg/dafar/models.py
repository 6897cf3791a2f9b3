# dafar/models.py
# Network specs and their torch modules: victim encoder E + head F, the
# mirrored feedback decoder D, and the fully-connected detector C.
#
# CONTRACT:
# - A NetworkSpec is plain data; build_model() turns it into a DefendedModel.
# - The decoder is always derived by mirroring the encoder prefix of the
#   victim (conv <-> conv-transpose, max-pool <-> max-unpool, final tanh).
# - Pooling indices captured by each encoder max-pool feed its mirrored unpool.
# - Same spec + same seed => bit-identical parameters.
# - Checkpoints are written atomically and round-trip bit-exactly.

from __future__ import annotations

import hashlib
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, NamedTuple, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from dafar.data import DATASET_SHAPES, ImageBatch
from dafar.errors import ShapeMismatchError


CHECKPOINT_FORMAT_VERSION = 1

LAYER_KINDS = ("conv", "conv_transpose", "max_pool", "max_unpool", "linear")
ACTIVATIONS = (None, "relu", "tanh", "softmax")


# ----------------------------
# Specs
# ----------------------------

@dataclass(frozen=True)
class LayerSpec:
    kind: str
    width: int = 0  # output channels (conv) or features (linear); unused for pooling
    kernel: int = 0
    activation: Optional[str] = None

    def __post_init__(self) -> None:
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"Unknown layer kind {self.kind!r}. Available: {list(LAYER_KINDS)}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"Unknown activation {self.activation!r}")
        if self.kind in ("conv", "conv_transpose", "max_pool", "max_unpool") and self.kernel < 1:
            raise ValueError(f"{self.kind} layer needs kernel >= 1")
        if self.kind in ("conv", "conv_transpose", "linear") and self.width < 1:
            raise ValueError(f"{self.kind} layer needs width >= 1")


def conv(width: int, kernel: int = 3, activation: Optional[str] = "relu") -> LayerSpec:
    return LayerSpec("conv", width, kernel, activation)


def pool(kernel: int = 2) -> LayerSpec:
    return LayerSpec("max_pool", kernel=kernel)


def linear(width: int, activation: Optional[str] = "relu") -> LayerSpec:
    return LayerSpec("linear", width, activation=activation)


@dataclass(frozen=True)
class NetworkSpec:
    """
    The victim network f = F(E(.)) as one ordered layer list, split at
    feedback_position: layers[:feedback_position] are the encoder E, the
    rest are the head F. The head must end with a `linear` softmax layer.
    """
    name: str
    input_shape: Tuple[int, int, int]
    layers: Tuple[LayerSpec, ...]
    feedback_position: int
    detector_widths: Tuple[int, ...] = ()
    num_classes: int = 10

    @property
    def encoder_layers(self) -> Tuple[LayerSpec, ...]:
        return self.layers[:self.feedback_position]

    @property
    def head_layers(self) -> Tuple[LayerSpec, ...]:
        return self.layers[self.feedback_position:]

    @property
    def decoder_layers(self) -> Tuple[LayerSpec, ...]:
        return mirror_decoder(self.input_shape, self.encoder_layers)

    @property
    def detector_layers(self) -> Tuple[LayerSpec, ...]:
        dim = self.input_dim
        hidden = tuple(linear(w, "relu") for w in self.detector_widths)
        return hidden + (linear(dim, "tanh"),)

    @property
    def input_dim(self) -> int:
        c, h, w = self.input_shape
        return c * h * w

    def with_feedback_position(self, position: int) -> "NetworkSpec":
        return NetworkSpec(self.name, self.input_shape, self.layers, position,
                           self.detector_widths, self.num_classes)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "layers": [
                {"kind": l.kind, "width": l.width, "kernel": l.kernel, "activation": l.activation}
                for l in self.layers
            ],
            "feedback_position": self.feedback_position,
            "detector_widths": list(self.detector_widths),
            "num_classes": self.num_classes,
        }

    @classmethod
    def from_dict(cls, raw: Dict[str, Any]) -> "NetworkSpec":
        return cls(
            name=raw["name"],
            input_shape=tuple(raw["input_shape"]),  # type: ignore[arg-type]
            layers=tuple(LayerSpec(**l) for l in raw["layers"]),
            feedback_position=int(raw["feedback_position"]),
            detector_widths=tuple(raw.get("detector_widths", ())),
            num_classes=int(raw.get("num_classes", 10)),
        )


# Victim networks: 3x3 convolutions without padding, 2x2 max-pools.
MNIST_SPEC = NetworkSpec(
    name="mnist",
    input_shape=(1, 28, 28),
    layers=(
        conv(32), conv(32), pool(),
        conv(64), conv(64), pool(),
        linear(200), linear(200), linear(10, "softmax"),
    ),
    feedback_position=6,
    detector_widths=(256, 32, 256),
)

CIFAR10_SPEC = NetworkSpec(
    name="cifar10",
    input_shape=(3, 32, 32),
    layers=(
        conv(96), conv(96), conv(96), pool(),
        conv(192), conv(192), conv(192), pool(),
        conv(192, 3), conv(192, 1), conv(10, 1),
        linear(200), linear(200), linear(10, "softmax"),
    ),
    feedback_position=8,
    detector_widths=(512, 64, 512),
)

PRESETS: Dict[str, NetworkSpec] = {"mnist": MNIST_SPEC, "cifar10": CIFAR10_SPEC}


def preset(dataset: str) -> NetworkSpec:
    if dataset not in PRESETS:
        raise KeyError(f"No preset network for {dataset!r}. Available: {sorted(PRESETS)}")
    return PRESETS[dataset]


# ----------------------------
# Shape chain
# ----------------------------

def trace_shapes(input_shape: Sequence[int], layers: Sequence[LayerSpec]) -> List[Tuple[int, ...]]:
    """
    Return the shape before each layer plus the final output shape.

    Raises ShapeMismatchError when a layer cannot accept its input. Unpool
    layers are not traced here; decoders are checked by build_model.
    """
    shapes: List[Tuple[int, ...]] = [tuple(input_shape)]
    shape: Tuple[int, ...] = tuple(input_shape)
    for i, layer in enumerate(layers):
        if layer.kind == "conv":
            if len(shape) != 3:
                raise ShapeMismatchError(f"layer {i}: conv after a flattened ({shape}) input")
            c, h, w = shape
            if h < layer.kernel or w < layer.kernel:
                raise ShapeMismatchError(f"layer {i}: {layer.kernel}x{layer.kernel} conv on {h}x{w} input")
            shape = (layer.width, h - layer.kernel + 1, w - layer.kernel + 1)
        elif layer.kind == "max_pool":
            if len(shape) != 3:
                raise ShapeMismatchError(f"layer {i}: max-pool after a flattened ({shape}) input")
            c, h, w = shape
            if h < layer.kernel or w < layer.kernel:
                raise ShapeMismatchError(f"layer {i}: {layer.kernel}x{layer.kernel} pool on {h}x{w} input")
            shape = (c, h // layer.kernel, w // layer.kernel)
        elif layer.kind == "linear":
            shape = (layer.width,)
        elif layer.kind == "conv_transpose":
            if len(shape) != 3:
                raise ShapeMismatchError(f"layer {i}: conv-transpose after a flattened ({shape}) input")
            c, h, w = shape
            shape = (layer.width, h + layer.kernel - 1, w + layer.kernel - 1)
        else:
            raise ShapeMismatchError(f"layer {i}: {layer.kind} cannot be traced without pooling records")
        shapes.append(shape)
    return shapes


def mirror_decoder(input_shape: Sequence[int], encoder: Sequence[LayerSpec]) -> Tuple[LayerSpec, ...]:
    """
    Reverse the encoder: each conv (c_in -> c_out, k) becomes a conv-transpose
    (c_out -> c_in, k), each max-pool a max-unpool. The layer that restores the
    input channels ends in tanh, every other conv-transpose in ReLU.
    """
    if not encoder:
        raise ShapeMismatchError("encoder is empty")
    if encoder[0].kind != "conv":
        raise ShapeMismatchError("encoder must begin with a conv layer so the decoder can end in tanh")
    for i, layer in enumerate(encoder):
        if layer.kind not in ("conv", "max_pool"):
            raise ShapeMismatchError(f"encoder layer {i} is {layer.kind}; only conv and max_pool can be mirrored")

    shapes = trace_shapes(input_shape, encoder)
    decoder: List[LayerSpec] = []
    for i in reversed(range(len(encoder))):
        layer = encoder[i]
        if layer.kind == "max_pool":
            decoder.append(LayerSpec("max_unpool", kernel=layer.kernel))
        else:
            in_channels = shapes[i][0]
            activation = "tanh" if i == 0 else "relu"
            decoder.append(LayerSpec("conv_transpose", in_channels, layer.kernel, activation))
    return tuple(decoder)


def check_spec(spec: NetworkSpec) -> None:
    if not 1 <= spec.feedback_position < len(spec.layers):
        raise ShapeMismatchError(f"feedback_position {spec.feedback_position} must split the "
                                 f"{len(spec.layers)} layers into a non-empty encoder and head")
    shapes = trace_shapes(spec.input_shape, spec.layers)
    last = spec.layers[-1]
    if last.kind != "linear" or last.activation != "softmax" or last.width != spec.num_classes:
        raise ShapeMismatchError(f"head must end with linear({spec.num_classes}, softmax)")
    if any(l.activation == "softmax" for l in spec.layers[:-1]):
        raise ShapeMismatchError("softmax is only allowed on the final layer")
    if shapes[-1] != (spec.num_classes,):
        raise ShapeMismatchError(f"victim output shape {shapes[-1]} != ({spec.num_classes},)")
    # Mirroring also validates the encoder kinds.
    mirror_decoder(spec.input_shape, spec.encoder_layers)


# ----------------------------
# Modules
# ----------------------------

class PoolRecord(NamedTuple):
    indices: torch.Tensor
    size: torch.Size  # input size of the pool, restored by the paired unpool


def _activate(x: torch.Tensor, activation: Optional[str]) -> torch.Tensor:
    if activation == "relu":
        return F.relu(x)
    if activation == "tanh":
        return torch.tanh(x)
    return x


class Encoder(nn.Module):
    def __init__(self, input_shape: Sequence[int], layers: Sequence[LayerSpec]) -> None:
        super().__init__()
        self.specs = tuple(layers)
        shapes = trace_shapes(input_shape, layers)
        modules: List[nn.Module] = []
        for layer, shape in zip(layers, shapes):
            if layer.kind == "conv":
                modules.append(nn.Conv2d(shape[0], layer.width, layer.kernel))
            else:
                modules.append(nn.MaxPool2d(layer.kernel, stride=layer.kernel, return_indices=True))
        self.layers = nn.ModuleList(modules)
        self.output_shape = shapes[-1]

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, List[PoolRecord]]:
        records: List[PoolRecord] = []
        for spec, module in zip(self.specs, self.layers):
            if spec.kind == "max_pool":
                size = x.size()
                x, indices = module(x)
                records.append(PoolRecord(indices, size))
            else:
                x = _activate(module(x), spec.activation)
        return x, records


class Head(nn.Module):
    """Returns logits; the softmax of the final layer is applied by callers."""

    def __init__(self, input_shape: Sequence[int], layers: Sequence[LayerSpec]) -> None:
        super().__init__()
        self.specs = tuple(layers)
        shapes = trace_shapes(input_shape, layers)
        modules: List[nn.Module] = []
        for layer, shape in zip(layers, shapes):
            if layer.kind == "conv":
                modules.append(nn.Conv2d(shape[0], layer.width, layer.kernel))
            elif layer.kind == "max_pool":
                modules.append(nn.MaxPool2d(layer.kernel, stride=layer.kernel))
            else:
                in_features = 1
                for d in shape:
                    in_features *= d
                modules.append(nn.Linear(in_features, layer.width))
        self.layers = nn.ModuleList(modules)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        x = features
        for spec, module in zip(self.specs, self.layers):
            if spec.kind == "linear" and x.dim() > 2:
                x = x.flatten(1)
            x = module(x)
            if spec.activation != "softmax":
                x = _activate(x, spec.activation)
        return x


class Decoder(nn.Module):
    def __init__(self, feature_shape: Sequence[int], layers: Sequence[LayerSpec]) -> None:
        super().__init__()
        self.specs = tuple(layers)
        modules: List[nn.Module] = []
        channels = feature_shape[0]
        for layer in layers:
            if layer.kind == "conv_transpose":
                modules.append(nn.ConvTranspose2d(channels, layer.width, layer.kernel))
                channels = layer.width
            else:
                modules.append(nn.MaxUnpool2d(layer.kernel, stride=layer.kernel))
        self.layers = nn.ModuleList(modules)

    def forward(self, features: torch.Tensor, records: Sequence[PoolRecord]) -> torch.Tensor:
        pending = list(records)
        x = features
        for spec, module in zip(self.specs, self.layers):
            if spec.kind == "max_unpool":
                record = pending.pop()
                x = module(x, record.indices, output_size=record.size)
            else:
                x = _activate(module(x), spec.activation)
        return x


class Detector(nn.Module):
    """Fully-connected autoencoder over flattened reconstruction errors."""

    def __init__(self, input_dim: int, layers: Sequence[LayerSpec]) -> None:
        super().__init__()
        self.specs = tuple(layers)
        self.input_dim = input_dim
        modules: List[nn.Module] = []
        width = input_dim
        for layer in layers:
            modules.append(nn.Linear(width, layer.width))
            width = layer.width
        self.layers = nn.ModuleList(modules)

    def forward(self, delta: torch.Tensor) -> torch.Tensor:
        x = delta
        for spec, module in zip(self.specs, self.layers):
            x = _activate(module(x), spec.activation)
        return x


class ForwardResult(NamedTuple):
    features: torch.Tensor
    logits: torch.Tensor
    probabilities: torch.Tensor
    reconstruction: torch.Tensor


class DefendedModel(nn.Module):
    """Victim F(E(.)), feedback decoder D, and optional detector C."""

    def __init__(self, spec: NetworkSpec, with_detector: bool = True) -> None:
        super().__init__()
        check_spec(spec)
        self.spec = spec
        self.encoder = Encoder(spec.input_shape, spec.encoder_layers)
        self.head = Head(self.encoder.output_shape, spec.head_layers)
        self.decoder = Decoder(self.encoder.output_shape, spec.decoder_layers)
        self.detector: Optional[Detector] = (
            Detector(spec.input_dim, spec.detector_layers) if with_detector else None
        )

    @property
    def has_detector(self) -> bool:
        return self.detector is not None

    def check_input(self, x: torch.Tensor) -> None:
        if x.dim() != 4 or tuple(x.shape[1:]) != tuple(self.spec.input_shape):
            raise ShapeMismatchError(f"input shape {tuple(x.shape)} does not match model input "
                                     f"(batch, {', '.join(map(str, self.spec.input_shape))})")

    def encode(self, x: torch.Tensor) -> Tuple[torch.Tensor, List[PoolRecord]]:
        self.check_input(x)
        return self.encoder(x)

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        features, _ = self.encode(x)
        return self.head(features)

    def probabilities(self, x: torch.Tensor) -> torch.Tensor:
        return F.softmax(self.logits(x), dim=1)

    def predict(self, x: torch.Tensor) -> torch.Tensor:
        return self.logits(x).argmax(dim=1)

    def reconstruct(self, x: torch.Tensor) -> torch.Tensor:
        features, records = self.encode(x)
        return self.decoder(features, records)

    def forward(self, x: torch.Tensor) -> ForwardResult:
        features, records = self.encode(x)
        logits = self.head(features)
        return ForwardResult(
            features=features,
            logits=logits,
            probabilities=F.softmax(logits, dim=1),
            reconstruction=self.decoder(features, records),
        )


# ----------------------------
# Public API
# ----------------------------

def build_model(spec: NetworkSpec, dataset: Optional[str] = None, with_detector: bool = True,
                seed: int = 0) -> DefendedModel:
    """Construct a DefendedModel with fan-in scaled uniform parameters drawn from `seed`."""
    if dataset is not None and tuple(spec.input_shape) != DATASET_SHAPES[dataset]:
        raise ShapeMismatchError(f"spec {spec.name!r} expects input {spec.input_shape}, "
                                 f"dataset {dataset!r} provides {DATASET_SHAPES[dataset]}")
    model = DefendedModel(spec, with_detector=with_detector)
    init_parameters(model, seed)
    return model


def init_parameters(module: nn.Module, seed: int) -> None:
    """U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every weight and bias, in module order."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for sub in module.modules():
            if isinstance(sub, nn.Linear):
                fan_in = sub.weight.shape[1]
            elif isinstance(sub, nn.Conv2d):
                fan_in = sub.weight.shape[1] * sub.weight.shape[2] * sub.weight.shape[3]
            elif isinstance(sub, nn.ConvTranspose2d):
                # weight is (in, out, k, k); each output sums over in * k * k inputs
                fan_in = sub.weight.shape[0] * sub.weight.shape[2] * sub.weight.shape[3]
            else:
                continue
            bound = 1.0 / float(fan_in) ** 0.5
            for param in (sub.weight, sub.bias):
                if param is None:
                    continue
                values = torch.empty(param.shape, dtype=torch.float32).uniform_(-bound, bound, generator=gen)
                param.copy_(values.to(device=param.device, dtype=param.dtype))


def forward_full(model: DefendedModel, x: ImageBatch | torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """(E(x), F(E(x)), D(E(x))) without tracking gradients."""
    pixels = x.pixels if isinstance(x, ImageBatch) else x
    with torch.no_grad():
        out = model(pixels)
    return out.features, out.probabilities, out.reconstruction


def parameter_hash(module: nn.Module) -> str:
    """SHA-256 over parameter names and bytes, in state-dict order."""
    h = hashlib.sha256()
    for name, tensor in module.state_dict().items():
        h.update(name.encode("utf-8"))
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# ----------------------------
# Checkpoints
# ----------------------------

def save_checkpoint(model: DefendedModel, path: Path, extra: Optional[Dict[str, Any]] = None) -> str:
    """Write spec + parameters atomically; returns the parameter hash."""
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "spec": model.spec.to_dict(),
        "with_detector": model.has_detector,
        "state_dict": {k: v.detach().cpu() for k, v in model.state_dict().items()},
        "parameter_hash": parameter_hash(model),
        "extra": extra or {},
    }
    atomic_torch_save(payload, path)
    return payload["parameter_hash"]


def load_checkpoint(path: Path, map_location: str | torch.device = "cpu") -> Tuple[DefendedModel, Dict[str, Any]]:
    if not path.is_file():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    payload = torch.load(path, map_location=map_location, weights_only=True)
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint format_version {version!r}")
    spec = NetworkSpec.from_dict(payload["spec"])
    model = DefendedModel(spec, with_detector=bool(payload["with_detector"]))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, dict(payload.get("extra", {}))


def atomic_torch_save(obj: Any, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    os.close(fd)
    try:
        torch.save(obj, tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
