"""Builders for the multi-dilation classifier family.

A network is a declarative layer list plus a named parameter registry.  Each
backbone variant is fixed by its input resolution: the stem halves the input
once, then stride-2 multi-dilation blocks halve it until the feature map
reaches 4x4, which is pooled globally and classified by a two-layer head.

Variant/resolution map: A=32, B=64, C=128, D=256 (2, 3, 4, 5 blocks).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import Iterator, Sequence, Union

import numpy as np

from .ops import (
    BatchNormState,
    ConvSpec,
    add_n,
    batch_norm,
    conv2d,
    dense,
    global_avg_pool,
    relu,
    sigmoid,
)
from .tensor import Tensor

STEM_CHANNELS = 32
BLOCK_CHANNELS = (64, 96, 128, 160, 192)
HEAD_HIDDEN = 64
PREPOOL_SPATIAL = 4

VARIANT_BY_RESOLUTION = {32: "A", 64: "B", 128: "C", 256: "D"}
RESOLUTION_BY_VARIANT = {v: r for r, v in VARIANT_BY_RESOLUTION.items()}
VARIANTS = tuple(RESOLUTION_BY_VARIANT)


def max_dilation_for(spatial: int) -> int:
    """Dilation budget by feature-map size; the widest branch must still fit."""
    if spatial >= 32:
        return 4
    if spatial >= 16:
        return 3
    return 2


@dataclass(frozen=True)
class ConvUnit:
    """One convolution, optionally followed by Relu then batch norm."""

    name: str
    spec: ConvSpec
    relu: bool = True
    batch_norm: bool = True


@dataclass(frozen=True)
class MultiDilationBlockSpec:
    """Chained dilation branches, summed, then a stride-2 and an expansion conv.

    Branch k applies a dilation-k convolution to the previous branch's output;
    all branch outputs are summed.  Branch convs preserve the channel count;
    the downsample conv halves the spatial size at constant width and the
    expansion conv widens to out_channels.
    """

    name: str
    in_channels: int
    out_channels: int
    max_dilation: int
    kernel_size: int = 3

    def __post_init__(self):
        if self.max_dilation < 1:
            raise ValueError(f"max_dilation must be >= 1, got {self.max_dilation}")

    @property
    def min_input_spatial(self) -> int:
        """Widest branch extent: dilation m on a k-kernel spans m*(k-1)+1 pixels."""
        return self.max_dilation * (self.kernel_size - 1) + 1

    def branch_unit(self, dilation: int) -> ConvUnit:
        spec = ConvSpec.same(self.kernel_size, self.in_channels, self.in_channels,
                             dilation=dilation)
        return ConvUnit(f"{self.name}.branch{dilation}", spec)

    def downsample_unit(self) -> ConvUnit:
        spec = ConvSpec(self.kernel_size, self.in_channels, self.in_channels,
                        stride=2, padding=(self.kernel_size - 1) // 2)
        return ConvUnit(f"{self.name}.downsample", spec)

    def expand_unit(self) -> ConvUnit:
        spec = ConvSpec.same(self.kernel_size, self.in_channels, self.out_channels)
        return ConvUnit(f"{self.name}.expand", spec)

    def units(self) -> tuple[ConvUnit, ...]:
        branches = tuple(self.branch_unit(k) for k in range(1, self.max_dilation + 1))
        return branches + (self.downsample_unit(), self.expand_unit())


@dataclass(frozen=True)
class GlobalPoolUnit:
    name: str = "pool"


@dataclass(frozen=True)
class DenseUnit:
    name: str
    in_features: int
    out_features: int
    activation: str | None = None  # "relu" | "sigmoid" | None

    def __post_init__(self):
        if self.activation not in (None, "relu", "sigmoid"):
            raise ValueError(f"unknown activation {self.activation!r}")


Layer = Union[ConvUnit, MultiDilationBlockSpec, GlobalPoolUnit, DenseUnit]


class NetStructure:
    """Ordered layer list with a named parameter registry and BN state.

    The layer list is immutable after construction; parameter arrays are
    rewritten only by the optimizer or a checkpoint load.
    """

    def __init__(self, layers: Sequence[Layer], input_shape: Sequence[int],
                 tag: str, seed: int = 0):
        self.layers: tuple[Layer, ...] = tuple(layers)
        self.input_shape = tuple(input_shape)
        self.tag = tag
        self.params: dict[str, Tensor] = {}
        self.bn_states: dict[str, BatchNormState] = {}
        self._init_params(seed)

    # -- construction -----------------------------------------------------

    def conv_units(self) -> Iterator[ConvUnit]:
        """All convolutions in execution order, blocks flattened."""
        for layer in self.layers:
            if isinstance(layer, ConvUnit):
                yield layer
            elif isinstance(layer, MultiDilationBlockSpec):
                yield from layer.units()

    def dense_units(self) -> Iterator[DenseUnit]:
        for layer in self.layers:
            if isinstance(layer, DenseUnit):
                yield layer

    def _init_params(self, seed: int) -> None:
        """Fan-in-scaled uniform weights, zero biases, identity BN affine."""
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        for unit in self.conv_units():
            spec = unit.spec
            fan_in = spec.kernel_size * spec.kernel_size * spec.in_channels
            bound = np.sqrt(6.0 / fan_in)
            self.params[f"{unit.name}.weight"] = Tensor(
                rng.uniform(-bound, bound, spec.weight_shape))
            self.params[f"{unit.name}.bias"] = Tensor(np.zeros(spec.out_channels))
            if unit.batch_norm:
                self.params[f"{unit.name}.gamma"] = Tensor(np.ones(spec.out_channels))
                self.params[f"{unit.name}.beta"] = Tensor(np.zeros(spec.out_channels))
                self.bn_states[unit.name] = BatchNormState(spec.out_channels)
        for unit in self.dense_units():
            bound = np.sqrt(6.0 / unit.in_features)
            self.params[f"{unit.name}.weight"] = Tensor(
                rng.uniform(-bound, bound, (unit.in_features, unit.out_features)))
            self.params[f"{unit.name}.bias"] = Tensor(np.zeros(unit.out_features))

    def weight_tensors(self) -> list[Tensor]:
        """Connection weights only: the L2 penalty excludes biases and BN affine."""
        return [t for name, t in self.params.items() if name.endswith(".weight")]

    # -- execution ---------------------------------------------------------

    def _conv_unit_forward(self, unit: ConvUnit, t: Tensor, training: bool) -> Tensor:
        t = conv2d(t, self.params[f"{unit.name}.weight"],
                   self.params[f"{unit.name}.bias"], unit.spec)
        if unit.relu:
            t = relu(t)
        if unit.batch_norm:
            t = batch_norm(t, self.params[f"{unit.name}.gamma"],
                           self.params[f"{unit.name}.beta"],
                           self.bn_states[unit.name], training)
        return t

    def _apply(self, layer: Layer, t: Tensor, training: bool) -> Tensor:
        if isinstance(layer, ConvUnit):
            return self._conv_unit_forward(layer, t, training)
        if isinstance(layer, MultiDilationBlockSpec):
            return multi_dilation_block_forward(t, layer, self, training)
        if isinstance(layer, GlobalPoolUnit):
            return global_avg_pool(t)
        if isinstance(layer, DenseUnit):
            t = dense(t, self.params[f"{layer.name}.weight"],
                      self.params[f"{layer.name}.bias"])
            if layer.activation == "relu":
                t = relu(t)
            elif layer.activation == "sigmoid":
                t = sigmoid(t)
            return t
        raise TypeError(f"unknown layer type {type(layer).__name__}")

    def forward(self, x, training: bool = False) -> Tensor:
        t = x if isinstance(x, Tensor) else Tensor(x)
        for layer in self.layers:
            t = self._apply(layer, t, training)
        return t

    def forward_until(self, x, stop: type, training: bool = False) -> Tensor:
        """Run layers up to (exclusive) the first layer of the given type."""
        t = x if isinstance(x, Tensor) else Tensor(x)
        for layer in self.layers:
            if isinstance(layer, stop):
                return t
            t = self._apply(layer, t, training)
        return t

    def forward_prepool(self, x, training: bool = False) -> Tensor:
        """Feature map entering global average pooling."""
        return self.forward_until(x, GlobalPoolUnit, training)

    def forward_features(self, x, training: bool = False) -> Tensor:
        """Pooled feature vector: everything up to the dense head."""
        t = self.forward_until(x, DenseUnit, training)
        if t.ndim != 2:
            raise RuntimeError("structure has no global pool before its head")
        return t

    # -- descriptions --------------------------------------------------------

    def output_shapes(self) -> list[tuple[int, ...]]:
        """Inferred per-layer output shapes (without the batch dimension)."""
        shape = self.input_shape
        shapes = []
        for layer in self.layers:
            if isinstance(layer, ConvUnit):
                h, w = layer.spec.out_size(shape[0]), layer.spec.out_size(shape[1])
                shape = (h, w, layer.spec.out_channels)
            elif isinstance(layer, MultiDilationBlockSpec):
                if shape[0] < layer.min_input_spatial:
                    raise ValueError(f"{layer.name}: widest branch extent "
                                     f"{layer.min_input_spatial} exceeds input "
                                     f"spatial size {shape[0]}")
                down = layer.downsample_unit().spec
                shape = (down.out_size(shape[0]), down.out_size(shape[1]),
                         layer.out_channels)
            elif isinstance(layer, GlobalPoolUnit):
                shape = (shape[-1],)
            elif isinstance(layer, DenseUnit):
                shape = (layer.out_features,)
            shapes.append(shape)
        return shapes

    def prepool_shape(self) -> tuple[int, int, int]:
        shape = self.input_shape
        for layer, out in zip(self.layers, self.output_shapes()):
            if isinstance(layer, GlobalPoolUnit):
                return shape
            shape = out
        raise RuntimeError("structure has no global pool layer")

    def feature_width(self) -> int:
        return self.prepool_shape()[-1]

    def block_specs(self) -> list[MultiDilationBlockSpec]:
        return [l for l in self.layers if isinstance(l, MultiDilationBlockSpec)]

    def param_count(self) -> int:
        return sum(t.size for t in self.params.values())


def multi_dilation_block_forward(x: Tensor, block: MultiDilationBlockSpec,
                                 net: NetStructure, training: bool = False) -> Tensor:
    """Chained dilation branches, summed, then downsample and expansion convs."""
    branches = []
    t = x
    for k in range(1, block.max_dilation + 1):
        t = net._conv_unit_forward(block.branch_unit(k), t, training)
        branches.append(t)
    summed = add_n(branches)
    t = net._conv_unit_forward(block.downsample_unit(), summed, training)
    return net._conv_unit_forward(block.expand_unit(), t, training)


def classifier_head_forward(features: Tensor, net: NetStructure,
                            training: bool = False) -> Tensor:
    """Dense head on pooled features: hidden Relu layer, then sigmoid output."""
    t = features
    for unit in net.dense_units():
        t = net._apply(unit, t, training)
    return t


def build_dilation_net(resolution: int, seed: int = 0) -> NetStructure:
    """Backbone + head for one input resolution (32, 64, 128 or 256)."""
    if resolution not in VARIANT_BY_RESOLUTION:
        raise ValueError(f"resolution must be one of {sorted(VARIANT_BY_RESOLUTION)}, "
                         f"got {resolution}")
    layers: list[Layer] = [
        ConvUnit("stem1", ConvSpec.same(5, 3, STEM_CHANNELS)),
        ConvUnit("stem2", ConvSpec(3, STEM_CHANNELS, STEM_CHANNELS, stride=2, padding=1)),
    ]
    spatial = resolution // 2
    channels = STEM_CHANNELS
    index = 0
    while spatial > PREPOOL_SPATIAL:
        out_channels = BLOCK_CHANNELS[index]
        layers.append(MultiDilationBlockSpec(f"block{index + 1}", channels,
                                             out_channels, max_dilation_for(spatial)))
        channels = out_channels
        spatial //= 2
        index += 1
    layers.append(GlobalPoolUnit())
    layers.append(DenseUnit("head1", channels, HEAD_HIDDEN, activation="relu"))
    layers.append(DenseUnit("head2", HEAD_HIDDEN, 1, activation="sigmoid"))
    return NetStructure(layers, (resolution, resolution, 3),
                        VARIANT_BY_RESOLUTION[resolution], seed=seed)


def build_for_variant(variant: str, seed: int = 0) -> NetStructure:
    if variant not in RESOLUTION_BY_VARIANT:
        raise ValueError(f"variant must be one of {VARIANTS}, got {variant!r}")
    return build_dilation_net(RESOLUTION_BY_VARIANT[variant], seed=seed)


def receptive_field(net: NetStructure, layer_index: int) -> int:
    """Input pixels seen by one output position after layers[0..layer_index].

    Standard accumulation: each conv adds d*(k-1) taps spaced by the product
    of the strides of the layers before it.  Inside a block the deepest path
    runs through every branch in the chain, then the two shifter convs.
    """
    if not 0 <= layer_index < len(net.layers):
        raise IndexError(f"layer index {layer_index} out of range "
                         f"[0, {len(net.layers) - 1}]")
    rf, jump = 1, 1

    def accumulate(spec: ConvSpec):
        nonlocal rf, jump
        rf += spec.dilation * (spec.kernel_size - 1) * jump
        jump *= spec.stride

    for layer in net.layers[:layer_index + 1]:
        if isinstance(layer, ConvUnit):
            accumulate(layer.spec)
        elif isinstance(layer, MultiDilationBlockSpec):
            for unit in layer.units():
                accumulate(unit.spec)
    return rf


def structure_summary(net: NetStructure) -> str:
    """Human-readable layer table: shapes, receptive fields, parameter counts."""
    rows = [("layer", "output shape", "rf", "params")]
    per_unit_params = {}
    for name, t in net.params.items():
        unit = name.rsplit(".", 1)[0]
        per_unit_params[unit] = per_unit_params.get(unit, 0) + t.size

    def layer_params(layer) -> int:
        if isinstance(layer, MultiDilationBlockSpec):
            return sum(per_unit_params.get(u.name, 0) for u in layer.units())
        return per_unit_params.get(getattr(layer, "name", ""), 0)

    for idx, (layer, shape) in enumerate(zip(net.layers, net.output_shapes())):
        label = getattr(layer, "name", type(layer).__name__)
        if isinstance(layer, MultiDilationBlockSpec):
            label += f" [m={layer.max_dilation}]"
        rf = receptive_field(net, idx) if not isinstance(layer, (DenseUnit,)) else "-"
        if isinstance(layer, GlobalPoolUnit):
            rf = "global"
        rows.append((label, "x".join(str(s) for s in shape), str(rf),
                     str(layer_params(layer))))
    widths = [max(len(r[i]) for r in rows) for i in range(4)]
    lines = ["  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip()
             for row in rows]
    head = (f"{net.tag}: input {'x'.join(str(s) for s in net.input_shape)}, "
            f"{net.param_count()} parameters")
    return "\n".join([head] + lines)


# -- serializable structure descriptions (checkpoint headers) ----------------

def structure_description(net: NetStructure) -> dict:
    layers = []
    for layer in net.layers:
        if isinstance(layer, ConvUnit):
            s = layer.spec
            layers.append({"type": "conv", "name": layer.name,
                           "kernel": s.kernel_size, "stride": s.stride,
                           "dilation": s.dilation, "padding": s.padding,
                           "in": s.in_channels, "out": s.out_channels,
                           "relu": layer.relu, "bn": layer.batch_norm})
        elif isinstance(layer, MultiDilationBlockSpec):
            layers.append({"type": "block", "name": layer.name,
                           "in": layer.in_channels, "out": layer.out_channels,
                           "max_dilation": layer.max_dilation,
                           "kernel": layer.kernel_size})
        elif isinstance(layer, GlobalPoolUnit):
            layers.append({"type": "pool", "name": layer.name})
        elif isinstance(layer, DenseUnit):
            layers.append({"type": "dense", "name": layer.name,
                           "in": layer.in_features, "out": layer.out_features,
                           "activation": layer.activation})
    return {"tag": net.tag, "input_shape": list(net.input_shape), "layers": layers}


def net_from_description(desc: dict, seed: int = 0) -> NetStructure:
    layers: list[Layer] = []
    for item in desc["layers"]:
        kind = item["type"]
        if kind == "conv":
            spec = ConvSpec(item["kernel"], item["in"], item["out"],
                            stride=item["stride"], dilation=item["dilation"],
                            padding=item["padding"])
            layers.append(ConvUnit(item["name"], spec, relu=item["relu"],
                                   batch_norm=item["bn"]))
        elif kind == "block":
            layers.append(MultiDilationBlockSpec(item["name"], item["in"],
                                                 item["out"], item["max_dilation"],
                                                 kernel_size=item["kernel"]))
        elif kind == "pool":
            layers.append(GlobalPoolUnit(item["name"]))
        elif kind == "dense":
            layers.append(DenseUnit(item["name"], item["in"], item["out"],
                                    activation=item["activation"]))
        else:
            raise ValueError(f"unknown layer type {kind!r} in description")
    return NetStructure(layers, tuple(desc["input_shape"]), desc["tag"], seed=seed)


def structure_hash(desc: dict) -> str:
    return hashlib.sha256(json.dumps(desc, sort_keys=True,
                                     separators=(",", ":")).encode()).hexdigest()
