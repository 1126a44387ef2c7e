"""Model configuration and the layer stack for the patch classifier.

The architecture contract: exactly eight 3x3 same-padding convolutions
over 32x32x3 patches, a 2x2 max-pool after convs 2, 4, and 6 (spatial
trace 32 -> 16 -> 8 -> 4, the last two convs keep 4x4), each conv
followed by batch-norm then ReLU, one dropout before the two-way dense
head. Channel widths are free; ``default_config`` ships
32,32 | 64,64 | 128,128 | 128,128 with dropout 0.5.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import layers as L
from .errors import ConfigError, LayerError, ShapeError
from .tensor import DEFAULT_DTYPE, Rng

REQUIRED_CONV_COUNT = 8
POOL_AFTER_CONVS = (2, 4, 6)


@dataclass(frozen=True)
class LayerSpec:
    """Declarative description of one layer; only kind-relevant fields are set."""

    kind: str
    in_channels: int | None = None
    out_channels: int | None = None
    channels: int | None = None
    kernel_size: int | None = None
    p: float | None = None
    in_features: int | None = None
    out_features: int | None = None

    @classmethod
    def conv2d(cls, in_channels, out_channels, kernel_size=3):
        return cls("conv2d", in_channels=in_channels, out_channels=out_channels,
                   kernel_size=kernel_size)

    @classmethod
    def batchnorm2d(cls, channels):
        return cls("batchnorm2d", channels=channels)

    @classmethod
    def relu(cls):
        return cls("relu")

    @classmethod
    def maxpool2d(cls):
        return cls("maxpool2d")

    @classmethod
    def dropout(cls, p):
        return cls("dropout", p=p)

    @classmethod
    def flatten(cls):
        return cls("flatten")

    @classmethod
    def dense(cls, in_features, out_features):
        return cls("dense", in_features=in_features, out_features=out_features)

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        for field in ("in_channels", "out_channels", "channels", "kernel_size",
                      "p", "in_features", "out_features"):
            value = getattr(self, field)
            if value is not None:
                d[field] = value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        known = {"kind", "in_channels", "out_channels", "channels", "kernel_size",
                 "p", "in_features", "out_features"}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown layer spec fields: {sorted(extra)}")
        return cls(**d)


def build_layer(spec: LayerSpec) -> L.Layer:
    try:
        if spec.kind == "conv2d":
            return L.Conv2d(spec.in_channels, spec.out_channels,
                            spec.kernel_size if spec.kernel_size else 3)
        if spec.kind == "batchnorm2d":
            return L.BatchNorm2d(spec.channels)
        if spec.kind == "relu":
            return L.ReLU()
        if spec.kind == "maxpool2d":
            return L.MaxPool2d()
        if spec.kind == "dropout":
            return L.Dropout(spec.p)
        if spec.kind == "flatten":
            return L.Flatten()
        if spec.kind == "dense":
            return L.Dense(spec.in_features, spec.out_features)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad {spec.kind} spec: {e}") from None
    raise ConfigError(f"unknown layer kind {spec.kind!r}")


@dataclass(frozen=True)
class ModelConfig:
    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, int, int] = (32, 32, 3)
    num_classes: int = 2

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(self.input_shape))

    def validate(self) -> list[tuple]:
        """Verify structural invariants; returns the per-layer shape trace."""
        convs_seen = 0
        pools_at = []
        trace = [self.input_shape]
        shape = self.input_shape
        for i, spec in enumerate(self.layers):
            layer = build_layer(spec)
            if spec.kind == "conv2d":
                convs_seen += 1
            elif spec.kind == "maxpool2d":
                pools_at.append(convs_seen)
            try:
                shape = layer.out_shape(shape)
            except ShapeError as e:
                raise ConfigError(f"layer {i} ({spec.kind}): {e}") from None
            trace.append(shape)
        if convs_seen != REQUIRED_CONV_COUNT:
            raise ConfigError(
                f"architecture requires exactly {REQUIRED_CONV_COUNT} "
                f"convolutional layers, found {convs_seen}"
            )
        if tuple(pools_at) != POOL_AFTER_CONVS:
            raise ConfigError(
                f"max-pools must follow conv layers {POOL_AFTER_CONVS} "
                f"(and only those), found pools after convs {tuple(pools_at)}"
            )
        if shape != (self.num_classes,):
            raise ConfigError(
                f"final output shape per example is {shape}, "
                f"expected ({self.num_classes},)"
            )
        return trace

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "layers": [spec.to_dict() for spec in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            layers=tuple(LayerSpec.from_dict(s) for s in d["layers"]),
            input_shape=tuple(d.get("input_shape", (32, 32, 3))),
            num_classes=int(d.get("num_classes", 2)),
        )


DEFAULT_CONV_CHANNELS = (32, 32, 64, 64, 128, 128, 128, 128)


def default_config(conv_channels=DEFAULT_CONV_CHANNELS, dropout_p=0.5,
                   input_shape=(32, 32, 3), num_classes=2) -> ModelConfig:
    """The stock architecture; ``conv_channels`` lets tests shrink widths."""
    specs = []
    in_c = input_shape[2]
    for i, out_c in enumerate(conv_channels):
        specs.append(LayerSpec.conv2d(in_c, out_c))
        specs.append(LayerSpec.batchnorm2d(out_c))
        specs.append(LayerSpec.relu())
        if (i + 1) in POOL_AFTER_CONVS:
            specs.append(LayerSpec.maxpool2d())
        in_c = out_c
    pools = len(POOL_AFTER_CONVS)
    final_h = input_shape[0] >> pools
    final_w = input_shape[1] >> pools
    flat = final_h * final_w * in_c
    specs.append(LayerSpec.flatten())
    specs.append(LayerSpec.dropout(dropout_p))
    specs.append(LayerSpec.dense(flat, num_classes))
    return ModelConfig(layers=tuple(specs), input_shape=input_shape,
                       num_classes=num_classes)


class Model:
    """An initialized layer stack with hand-written forward/backward."""

    def __init__(self, config: ModelConfig, rng: Rng | None = None,
                 dtype=DEFAULT_DTYPE):
        config.validate()
        self.config = config
        self.dtype = np.dtype(dtype)
        self.layers = [build_layer(spec) for spec in config.layers]
        if rng is not None:
            self.init_params(rng)

    def init_params(self, rng: Rng) -> None:
        """He-normal weights, zero biases, unit batch-norm; deterministic in seed."""
        for i, layer in enumerate(self.layers):
            layer.init_params(rng.split(f"layer{i:02d}"), self.dtype)

    def forward(self, x, training: bool = False, rng: Rng | None = None):
        """Run the stack on a [N, 32, 32, 3] batch; returns [N, 2] logits."""
        expected = self.config.input_shape
        if x.ndim != 4 or x.shape[1:] != expected:
            raise ShapeError(f"batch must be [N,{expected}], got {x.shape}")
        x = np.ascontiguousarray(x, dtype=self.dtype)
        for i, layer in enumerate(self.layers):
            try:
                x = layer.forward(x, training, rng)
            except Exception as e:
                raise LayerError(i, layer.kind, e) from e
        return x

    def backward(self, grad_logits):
        """Backpropagate loss gradients; per-layer grads land in layer.grads."""
        g = np.asarray(grad_logits, dtype=self.dtype)
        for i in reversed(range(len(self.layers))):
            layer = self.layers[i]
            try:
                g = layer.backward(g)
            except Exception as e:
                raise LayerError(i, layer.kind, e) from e
        return g

    def _named(self, items_of):
        out = []
        for i, layer in enumerate(self.layers):
            for name, arr in items_of(layer):
                out.append((f"layer{i:02d}.{layer.kind}.{name}", arr))
        return out

    def param_items(self):
        return self._named(lambda l: l.param_items())

    def grad_items(self):
        out = []
        for i, layer in enumerate(self.layers):
            for name, _ in layer.param_items():
                out.append((f"layer{i:02d}.{layer.kind}.{name}", layer.grads[name]))
        return out

    def state_items(self):
        """Parameters plus batch-norm running statistics, checkpoint order."""
        return self._named(lambda l: l.state_items())

    def load_state(self, items: dict) -> None:
        for i, layer in enumerate(self.layers):
            prefix = f"layer{i:02d}.{layer.kind}."
            local = {}
            for name, _ in layer.state_items():
                key = prefix + name
                if key not in items:
                    raise KeyError(f"checkpoint is missing tensor {key!r}")
                local[name] = np.asarray(items[key], dtype=self.dtype)
            layer.load_state(local)

    def num_params(self) -> int:
        return sum(arr.size for _, arr in self.param_items())
