"""Network A / Network B builders, parameter counting and initialization."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .layers import (
    MFM,
    Conv,
    ConvPair,
    Dropout,
    FullyConnected,
    Layer,
    MaxPool,
    Param,
    ReLU,
    softmax_cross_entropy,
)
from .tensor import ShapeError, as_tensor

CASIA_IDENTITIES = 10575
EMBEDDING_DIM = 256
INPUT_SHAPE = (1, 128, 128)
ARCHITECTURES = ("A", "B")


@dataclass(frozen=True)
class LayerDesc:
    kind: str  # conv_pair | conv | mfm | relu | pool | fc | dropout
    name: str
    out: int = 0
    kernel: int = 0
    stride: int = 1
    pad: int = 0
    lr_mult: float = 1.0
    decay_mult: float = 1.0


@dataclass(frozen=True)
class ArchSpec:
    name: str
    layers: tuple
    input_shape: tuple = INPUT_SHAPE
    overrides: dict = field(default_factory=dict)


def _conv_block(idx, out, kernel, pad, activation):
    """conv pair + MFM, or (ReLU comparison mode) a single conv + ReLU."""
    if activation == "mfm":
        return [LayerDesc("conv_pair", f"conv{idx}", out, kernel, 1, pad),
                LayerDesc("mfm", f"mfm{idx}")]
    if activation == "relu":
        return [LayerDesc("conv", f"conv{idx}", out, kernel, 1, pad),
                LayerDesc("relu", f"relu{idx}")]
    raise ValueError(f"unknown activation {activation!r}; expected 'mfm' or 'relu'")


def _nin(idx, out, nin_mfm):
    if nin_mfm:
        return [LayerDesc("conv_pair", f"conv{idx}_a", out, 1, 1, 0),
                LayerDesc("mfm", f"mfm{idx}_a")]
    return [LayerDesc("conv", f"conv{idx}_a", out, 1, 1, 0)]


def _head(num_classes):
    return [LayerDesc("fc", "fc1", EMBEDDING_DIM),
            LayerDesc("dropout", "dropout"),
            LayerDesc("fc", "fc2", num_classes)]


def _width(c, width):
    return max(1, int(round(c * width)))


def arch_spec(name: str, num_classes: int = CASIA_IDENTITIES, width: float = 1.0,
              activation: str = "mfm", nin_mfm: bool = False) -> ArchSpec:
    """Layer plan for network ``"A"`` or ``"B"``.

    ``width`` scales every convolution channel count (desk-scale tests);
    the 256-d fc1 embedding is never scaled.
    """
    name = str(name).upper()
    if width <= 0:
        raise ValueError(f"width multiplier must be positive, got {width}")
    layers: list[LayerDesc] = []
    if name == "A":
        plan = [(48, 9, 0), (96, 5, 0), (128, 5, 0), (192, 4, 0)]
        for i, (out, k, pad) in enumerate(plan, start=1):
            layers += _conv_block(i, _width(out, width), k, pad, activation)
            layers.append(LayerDesc("pool", f"pool{i}", kernel=2, stride=2))
    elif name == "B":
        layers += _conv_block(1, _width(48, width), 5, 2, activation)
        layers.append(LayerDesc("pool", "pool1", kernel=2, stride=2))
        # (NIN width = incoming channels, conv width)
        plan = [(48, 96), (96, 192), (192, 128), (128, 128)]
        for i, (nin_out, out) in enumerate(plan, start=2):
            layers += _nin(i, _width(nin_out, width), nin_mfm)
            layers += _conv_block(i, _width(out, width), 3, 1, activation)
            layers.append(LayerDesc("pool", f"pool{i}", kernel=2, stride=2))
    else:
        raise ValueError(f"unknown architecture {name!r}; expected one of {ARCHITECTURES}")
    layers += _head(num_classes)
    overrides = {"num_classes": int(num_classes), "width": float(width),
                 "activation": activation, "nin_mfm": bool(nin_mfm)}
    return ArchSpec(name, tuple(layers), INPUT_SHAPE, overrides)


class NetworkModel:
    """Ordered layer stack materialized from an :class:`ArchSpec`."""

    def __init__(self, spec: ArchSpec, dropout_ratio: float = 0.7):
        self.spec = spec
        self.mode = "test"
        self.layers: list[Layer] = []
        shape = (1,) + tuple(spec.input_shape)
        for d in spec.layers:
            layer = self._make(d, shape, dropout_ratio)
            shape = layer.output_shape(shape)
            self.layers.append(layer)
        self.num_classes = shape[1]
        self.layers[0].input_grad = False
        fc1 = self.layer("fc1")
        if fc1.out_dim != EMBEDDING_DIM:
            raise ShapeError(f"fc1 must output {EMBEDDING_DIM} values, got {fc1.out_dim}")

    @staticmethod
    def _make(d: LayerDesc, shape, dropout_ratio):
        kw = dict(lr_mult=d.lr_mult, decay_mult=d.decay_mult)
        if d.kind == "conv_pair":
            return ConvPair(d.name, shape[1], d.out, d.kernel, d.stride, d.pad, **kw)
        if d.kind == "conv":
            return Conv(d.name, shape[1], d.out, d.kernel, d.stride, d.pad, **kw)
        if d.kind == "mfm":
            return MFM(d.name)
        if d.kind == "relu":
            return ReLU(d.name)
        if d.kind == "pool":
            return MaxPool(d.name, d.kernel, d.stride)
        if d.kind == "fc":
            return FullyConnected(d.name, int(np.prod(shape[1:])), d.out, **kw)
        if d.kind == "dropout":
            return Dropout(d.name, dropout_ratio)
        raise ValueError(f"unknown layer kind {d.kind!r}")

    @property
    def name(self):
        return self.spec.name

    def layer(self, name: str) -> Layer:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)

    def params(self) -> list[Param]:
        return [p for layer in self.layers for p in layer.params()]

    def param_dict(self) -> dict[str, Param]:
        return {p.name: p for p in self.params()}

    def set_dropout_rng(self, rng):
        for layer in self.layers:
            if isinstance(layer, Dropout):
                layer.rng = rng

    def train(self):
        self.mode = "train"
        return self

    def eval(self):
        self.mode = "test"
        return self

    def astype(self, dtype):
        for p in self.params():
            p.astype(dtype)
        return self

    @property
    def dtype(self):
        return self.params()[0].value.dtype

    def _check_input(self, x):
        x = as_tensor(x)
        if x.shape[1:] != tuple(self.spec.input_shape):
            raise ShapeError(f"network {self.name} expects (N, {', '.join(map(str, self.spec.input_shape))})"
                             f" input, got {x.shape}")
        return x.astype(self.dtype, copy=False)

    def forward(self, x, until: str | None = None, hook=None):
        """Run the stack; stops after layer ``until`` when given.

        ``hook(layer, out)`` is called after every layer.
        """
        x = self._check_input(x)
        train = self.mode == "train"
        for layer in self.layers:
            x = layer.forward(x, train)
            if hook is not None:
                hook(layer, x)
            if layer.name == until:
                break
        return x

    def backward(self, dout, hook=None):
        """Backpropagate from the logits; ``hook(layer, dinput)`` sees each input gradient."""
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
            if hook is not None:
                hook(layer, dout)
        return dout

    def loss(self, x, labels):
        """Forward + softmax cross-entropy + backward; returns (loss, logits)."""
        logits = self.forward(x)
        loss, dlogits = softmax_cross_entropy(logits, labels)
        self.backward(dlogits)
        return loss, logits

    def embed(self, x):
        """256-d fc1 activations (test-mode forward, no dropout)."""
        mode, self.mode = self.mode, "test"
        try:
            return self.forward(x, until="fc1")
        finally:
            self.mode = mode

    def trace(self, x=None):
        """Ordered (row name, output size) pairs from a real forward pass.

        Sizes are (H, W, C) for feature maps and (D,) for vectors, matching
        how layer tables list them.
        """
        if x is None:
            x = np.zeros((1,) + tuple(self.spec.input_shape), dtype=self.dtype)
        rows = []

        def record(layer, out):
            if layer.kind == "dropout":
                return
            for name, act in layer.trace_rows(out):
                if act.ndim == 4:
                    rows.append((name, (act.shape[2], act.shape[3], act.shape[1])))
                else:
                    rows.append((name, (act.shape[1],)))

        mode, self.mode = self.mode, "test"
        try:
            self.forward(x, hook=record)
        finally:
            self.mode = mode
        return rows


def build_network(arch: str = "A", num_classes: int = CASIA_IDENTITIES, width: float = 1.0,
                  activation: str = "mfm", nin_mfm: bool = False,
                  dropout_ratio: float = 0.7) -> NetworkModel:
    return NetworkModel(arch_spec(arch, num_classes, width, activation, nin_mfm), dropout_ratio)


def build_network_a(**kw) -> NetworkModel:
    return build_network("A", **kw)


def build_network_b(**kw) -> NetworkModel:
    return build_network("B", **kw)


def build_from_spec(spec: ArchSpec, dropout_ratio: float = 0.7) -> NetworkModel:
    o = spec.overrides
    return build_network(spec.name, o.get("num_classes", CASIA_IDENTITIES), o.get("width", 1.0),
                         o.get("activation", "mfm"), o.get("nin_mfm", False), dropout_ratio)


@dataclass
class ParamCounts:
    per_layer: dict
    total: int


def count_parameters(model: NetworkModel, convention: str = "paper") -> ParamCounts:
    """Per-row and total parameter counts.

    ``paper``: kH*kW*outC per convolution (input channels and bias ignored,
    each half of a pair counted on its own row) and inD*outD per dense layer.
    ``true``: every stored weight and bias.
    """
    if convention not in ("paper", "true"):
        raise ValueError(f"convention must be 'paper' or 'true', got {convention!r}")
    rows = {}
    for layer in model.layers:
        if isinstance(layer, (Conv, ConvPair)):
            k2 = layer.kernel * layer.kernel
            n = k2 * layer.out_c if convention == "paper" else k2 * layer.in_c * layer.out_c + layer.out_c
            names = ([f"{layer.name}_1", f"{layer.name}_2"] if isinstance(layer, ConvPair)
                     else [layer.name])
            for row in names:
                rows[row] = n
        elif isinstance(layer, FullyConnected):
            n = layer.in_dim * layer.out_dim
            rows[layer.name] = n if convention == "paper" else n + layer.out_dim
    return ParamCounts(rows, sum(rows.values()))


def format_thousands(count: int, decimals: int = 0) -> str:
    """Truncate ``count`` to thousands at ``decimals`` places, e.g. 3888 -> '3.8K'."""
    scaled = math.floor(count * 10 ** decimals / 1000) / 10 ** decimals
    return f"{scaled:,.{decimals}f}K"


def init_weights(model: NetworkModel, rng: np.random.Generator, fc_std: float = 0.01):
    """Xavier-uniform (fan-in) convolutions, Gaussian dense layers, zero biases."""
    for layer in model.layers:
        if isinstance(layer, (Conv, ConvPair)):
            fan_in = layer.in_c * layer.kernel * layer.kernel
            bound = math.sqrt(3.0 / fan_in)
            halves = layer.halves if isinstance(layer, ConvPair) else [(layer.weight, layer.bias)]
            for w, b in halves:
                w.value = rng.uniform(-bound, bound, w.value.shape).astype(w.value.dtype)
                b.value = np.zeros_like(b.value)
        elif isinstance(layer, FullyConnected):
            w, b = layer.weight, layer.bias
            w.value = (rng.standard_normal(w.value.shape) * fc_std).astype(w.value.dtype)
            b.value = np.zeros_like(b.value)
    for p in model.params():
        p.grad = np.zeros_like(p.value)
        p.momentum = np.zeros_like(p.value)
    return model


__all__ = [
    "ArchSpec", "LayerDesc", "NetworkModel", "ParamCounts", "arch_spec", "build_network",
    "build_network_a", "build_network_b", "build_from_spec", "count_parameters",
    "format_thousands", "init_weights",
]
