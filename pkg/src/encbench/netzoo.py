"""Network construction: adaptation front-end and residual backbone."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from .errors import ConfigError, DimensionError, FormatError
from .gradcore import checkpoint, ops
from .gradcore.ops import BatchNormState
from .gradcore.optim import ParamSet
from .gradcore.tensor import Tensor


@dataclass(frozen=True)
class AdaptationConfig:
    block_size: int = 4
    width: int = 64
    nin_layers: int = 2
    out_channels: int = 3

    def __post_init__(self):
        if self.block_size < 1 or self.width < 1 or self.nin_layers < 0 or self.out_channels < 1:
            raise ConfigError(f"invalid adaptation config {self}")


@dataclass(frozen=True)
class BackboneConfig:
    widths: Tuple[int, ...] = (16, 32, 64)
    blocks_per_stage: int = 1
    num_classes: int = 10
    in_channels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if not self.widths or any(w < 1 for w in self.widths):
            raise ConfigError("backbone widths must be positive")
        if self.blocks_per_stage < 1:
            raise ConfigError("blocks_per_stage must be >= 1")
        if self.num_classes < 2:
            raise ConfigError("need at least two classes")

    @classmethod
    def resnet18(cls, num_classes: int = 10) -> "BackboneConfig":
        return cls(widths=(64, 128, 256, 512), blocks_per_stage=2, num_classes=num_classes)


# -- layers -----------------------------------------------------------------

class Module:
    """Container that registers its parameters in a shared ParamSet."""

    def forward(self, x: Tensor, training: bool) -> Tensor:
        raise NotImplementedError

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        return self.forward(x, training)

    def buffers(self) -> Dict[str, BatchNormState]:
        return {}


class Conv2d(Module):
    def __init__(self, params: ParamSet, name: str, cin: int, cout: int, k: int,
                 stride: int = 1, padding: int = 0, bias: bool = True):
        self.stride, self.padding, self.k = stride, padding, k
        self.weight = params.add(f"{name}.weight", Tensor(np.zeros((cout, cin, k, k))))
        self.bias = params.add(f"{name}.bias", Tensor(np.zeros(cout))) if bias else None

    def forward(self, x, training):
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm2d(Module):
    def __init__(self, params: ParamSet, name: str, channels: int):
        self.name = name
        self.gamma = params.add(f"{name}.gamma", Tensor(np.ones(channels)))
        self.beta = params.add(f"{name}.beta", Tensor(np.zeros(channels)))
        self.state = BatchNormState(channels)

    def forward(self, x, training):
        return ops.batchnorm2d(x, self.gamma, self.beta, self.state, training)

    def buffers(self):
        return {self.name: self.state}


class Linear(Module):
    def __init__(self, params: ParamSet, name: str, din: int, dout: int):
        self.weight = params.add(f"{name}.weight", Tensor(np.zeros((dout, din))))
        self.bias = params.add(f"{name}.bias", Tensor(np.zeros(dout)))

    def forward(self, x, training):
        return ops.linear(x, self.weight, self.bias)


class ReLU(Module):
    def forward(self, x, training):
        return ops.relu(x)


class PixelShuffle(Module):
    def __init__(self, r: int):
        self.r = r

    def forward(self, x, training):
        return ops.pixel_shuffle(x, self.r)


class Sequential(Module):
    def __init__(self, *layers: Module):
        self.layers = list(layers)

    def forward(self, x, training):
        for layer in self.layers:
            x = layer(x, training)
        return x

    def buffers(self):
        out = {}
        for layer in self.layers:
            out.update(layer.buffers())
        return out


class ResidualBlock(Module):
    """Two 3x3 conv+BN layers with an identity or 1x1-projection skip."""

    def __init__(self, params: ParamSet, name: str, cin: int, cout: int, stride: int):
        self.conv1 = Conv2d(params, f"{name}.conv1", cin, cout, 3, stride, 1, bias=False)
        self.bn1 = BatchNorm2d(params, f"{name}.bn1", cout)
        self.conv2 = Conv2d(params, f"{name}.conv2", cout, cout, 3, 1, 1, bias=False)
        self.bn2 = BatchNorm2d(params, f"{name}.bn2", cout)
        self.shortcut: Optional[Sequential] = None
        if stride != 1 or cin != cout:
            self.shortcut = Sequential(
                Conv2d(params, f"{name}.proj", cin, cout, 1, stride, 0, bias=False),
                BatchNorm2d(params, f"{name}.proj_bn", cout),
            )

    def forward(self, x, training):
        out = ops.relu(self.bn1(self.conv1(x, training), training))
        out = self.bn2(self.conv2(out, training), training)
        skip = x if self.shortcut is None else self.shortcut(x, training)
        return ops.relu(ops.add(out, skip))

    def buffers(self):
        out = {**self.bn1.buffers(), **self.bn2.buffers()}
        if self.shortcut is not None:
            out.update(self.shortcut.buffers())
        return out


class Adaptation(Module):
    def __init__(self, params: ParamSet, cfg: AdaptationConfig, prefix: str = "adapt"):
        self.cfg = cfg
        m, ca = cfg.block_size, cfg.width
        layers: List[Module] = [Conv2d(params, f"{prefix}.block_conv", 3, ca, m, m, 0), ReLU()]
        for i in range(cfg.nin_layers):
            layers += [Conv2d(params, f"{prefix}.nin{i}", ca, ca, 1), ReLU()]
        layers += [Conv2d(params, f"{prefix}.head", ca, cfg.out_channels * m * m, 1), PixelShuffle(m)]
        self.body = Sequential(*layers)

    def forward(self, x, training):
        m = self.cfg.block_size
        h, w = x.shape[2:]
        if h % m or w % m:
            raise DimensionError(f"input {h}x{w} not divisible by block size {m}")
        return self.body(x, training)


class Backbone(Module):
    def __init__(self, params: ParamSet, cfg: BackboneConfig, prefix: str = "backbone"):
        self.cfg = cfg
        w0 = cfg.widths[0]
        self.stem = Sequential(
            Conv2d(params, f"{prefix}.stem", cfg.in_channels, w0, 3, 1, 1, bias=False),
            BatchNorm2d(params, f"{prefix}.stem_bn", w0),
            ReLU(),
        )
        blocks: List[Module] = []
        cin = w0
        for s, width in enumerate(cfg.widths):
            for b in range(cfg.blocks_per_stage):
                stride = 2 if s > 0 and b == 0 else 1
                blocks.append(ResidualBlock(params, f"{prefix}.s{s}b{b}", cin, width, stride))
                cin = width
        self.blocks = Sequential(*blocks)
        self.head = Linear(params, f"{prefix}.fc", cin, cfg.num_classes)

    def forward(self, x, training):
        x = self.blocks(self.stem(x, training), training)
        return self.head(ops.global_avg_pool(x), training)

    def buffers(self):
        return {**self.stem.buffers(), **self.blocks.buffers()}


def build_adaptation(cfg: AdaptationConfig, params: Optional[ParamSet] = None) -> Adaptation:
    return Adaptation(params if params is not None else ParamSet(), cfg)


def build_backbone(cfg: BackboneConfig, params: Optional[ParamSet] = None) -> Backbone:
    return Backbone(params if params is not None else ParamSet(), cfg)


# -- classifier -------------------------------------------------------------

@dataclass(frozen=True)
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    adaptation: Optional[AdaptationConfig] = None

    def to_dict(self) -> dict:
        return {
            "backbone": {**asdict(self.backbone), "widths": list(self.backbone.widths)},
            "adaptation": asdict(self.adaptation) if self.adaptation else None,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelConfig":
        try:
            bb = BackboneConfig(**{**doc["backbone"], "widths": tuple(doc["backbone"]["widths"])})
            ad = AdaptationConfig(**doc["adaptation"]) if doc.get("adaptation") else None
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"bad model config: {exc}") from exc
        return cls(bb, ad)


class Classifier:
    """Optional adaptation network followed by a residual backbone."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.params = ParamSet()
        self.adaptation = Adaptation(self.params, cfg.adaptation) if cfg.adaptation else None
        self.backbone = Backbone(self.params, cfg.backbone)

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        if x.data.ndim != 4 or x.shape[1] != 3:
            raise DimensionError(f"classifier expects N x 3 x H x W input, got {x.shape}")
        if self.adaptation is not None:
            x = self.adaptation(x, training)
        return self.backbone(x, training)

    __call__ = forward

    def predict(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Eval-mode argmax labels for a float N x 3 x H x W array."""
        preds = [self.forward(Tensor(x[i:i + batch_size]), training=False).data.argmax(axis=1)
                 for i in range(0, len(x), batch_size)]
        return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)

    def buffers(self) -> Dict[str, BatchNormState]:
        out = dict(self.backbone.buffers())
        if self.adaptation is not None:
            out.update(self.adaptation.buffers())
        return out

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {k: t.data for k, t in self.params.items()}
        for name, bn in self.buffers().items():
            state[f"{name}.running_mean"] = bn.running_mean
            state[f"{name}.running_var"] = bn.running_var
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        expected = self.state_dict()
        if set(state) != set(expected):
            diff = sorted(set(state) ^ set(expected))[:5]
            raise FormatError(f"checkpoint entries do not match the architecture: {diff}")
        for name, arr in state.items():
            if tuple(arr.shape) != tuple(expected[name].shape):
                raise FormatError(f"shape mismatch for {name}: {arr.shape} vs {expected[name].shape}")
        for k, t in self.params.items():
            t.data = np.array(state[k], dtype=np.float32)
        for name, bn in self.buffers().items():
            bn.running_mean = np.array(state[f"{name}.running_mean"], dtype=np.float32)
            bn.running_var = np.array(state[f"{name}.running_var"], dtype=np.float32)


def init_params(model: Classifier, seed: int) -> ParamSet:
    """He-normal weights, zero biases/beta, unit gamma; reset BN statistics."""
    rng = np.random.default_rng(seed)
    for name, t in model.params.items():
        if name.endswith(".weight"):
            fan_in = int(np.prod(t.shape[1:]))
            t.data = (rng.standard_normal(t.shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)
        elif name.endswith(".gamma"):
            t.data = np.ones(t.shape, dtype=np.float32)
        else:
            t.data = np.zeros(t.shape, dtype=np.float32)
        t.grad = None
    model.params.velocity.clear()
    model.params.step = 0
    for bn in model.buffers().values():
        bn.running_mean = np.zeros_like(bn.running_mean)
        bn.running_var = np.ones_like(bn.running_var)
    return model.params


def build_classifier(cfg: ModelConfig, seed: int = 0) -> Classifier:
    model = Classifier(cfg)
    init_params(model, seed)
    return model


# -- persistence --------------------------------------------------------------

def _digest(buf: bytes) -> str:
    return hashlib.sha256(buf).hexdigest()


def save_model(model: Classifier, path: Union[str, Path], hyper: Optional[dict] = None) -> Path:
    """Write ``path`` (NNP1) and ``path.json`` sidecar; returns the sidecar path."""
    path = Path(path)
    buf = checkpoint.encode(model.state_dict())
    path.write_bytes(buf)
    sidecar = path.with_name(path.name + ".json")
    doc = {
        "format": "NNP1",
        "model": model.cfg.to_dict(),
        "hyperparameters": hyper or {},
        "checkpoint_sha256": _digest(buf),
        "entries": {k: list(v.shape) for k, v in model.state_dict().items()},
    }
    sidecar.write_text(json.dumps(doc, indent=2, sort_keys=True))
    return sidecar


def load_model(path: Union[str, Path]) -> Tuple[Classifier, dict]:
    path = Path(path)
    sidecar = path.with_name(path.name + ".json")
    buf = path.read_bytes()
    try:
        doc = json.loads(sidecar.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read sidecar {sidecar}: {exc}") from exc
    if doc.get("checkpoint_sha256") != _digest(buf):
        raise FormatError(f"sidecar {sidecar.name} does not describe checkpoint {path.name}")
    model = Classifier(ModelConfig.from_dict(doc["model"]))
    model.load_state_dict(checkpoint.decode(buf))
    return model, doc.get("hyperparameters", {})
