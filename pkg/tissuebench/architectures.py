"""Declarative layer graphs for the four FCNN families.

Every network is expressed in 3D terms: the 2D variants use kernels, pools
and patches whose third extent is 1, so they consume axial slices.
"""

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

from tissuebench.volumes import NUM_CLASSES, Triple

logger = logging.getLogger(__name__)

FAMILIES: Tuple[str, ...] = ("DM", "KK", "UNet", "UResNet")
DIMENSIONALITIES: Tuple[str, ...] = ("2D", "3D")
U_SHAPED: Tuple[str, ...] = ("UNet", "UResNet")
LAYER_KINDS: Tuple[str, ...] = (
    "conv",
    "deconv",
    "maxpool",
    "activation",
    "batchnorm",
    "concat",
    "add",
    "downsample",
    "upsample",
    "crop",
    "softmax_head",
)
WEIGHTED_KINDS = ("conv", "deconv", "softmax_head")
ACTIVATIONS = ("relu", "prelu")
INPUT = "input"

PATCH_CONFIG_KEYS = frozenset({"input_size", "width_scale"})

# Pooled axes of the u-shaped families must divide by this.
POOLING_DIVISOR = 2**4

DEFAULT_INPUT_SIZES: Dict[Tuple[str, str], Triple] = {
    ("DM", "3D"): (27, 27, 27),
    ("DM", "2D"): (27, 27, 1),
    ("KK", "3D"): (25, 25, 25),
    ("KK", "2D"): (25, 25, 1),
    ("UNet", "3D"): (32, 32, 32),
    ("UNet", "2D"): (32, 32, 1),
    ("UResNet", "3D"): (32, 32, 32),
    ("UResNet", "2D"): (32, 32, 1),
}

# Hidden widths per family and dimensionality.
DM_WIDTHS = {"2D": (34, 34, 34, 68, 68, 68, 102, 102, 102), "3D": (84, 84, 84, 168, 168, 168, 252, 252, 252)}
DM_TAPS = (3, 6, 9)
DM_DENSE_WIDTHS = (400, 200, 150)
KK_WIDTHS = {"2D": (45, 45, 60, 60, 60, 60, 75, 75), "3D": (69, 69, 92, 92, 92, 92, 115, 115)}
KK_DENSE_WIDTHS = (150, 150)
KK_LOW_RESOLUTION_FACTOR = 3
U_WIDTHS = (32, 64, 128, 256)


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    inputs: Tuple[str, ...]
    kernel: Triple = (1, 1, 1)
    channels_out: int = 0
    padding: str = "valid"
    stride: Triple = (1, 1, 1)
    activation: Optional[str] = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise SpecError(f"Layer {self.name}: unknown kind {self.kind!r}")
        if self.padding not in ("valid", "same"):
            raise SpecError(f"Layer {self.name}: padding must be 'valid' or 'same'")
        if self.kind == "activation" and self.activation not in ACTIVATIONS:
            raise SpecError(f"Layer {self.name}: activation must be one of {ACTIVATIONS}")
        object.__setattr__(self, "inputs", tuple(self.inputs))
        object.__setattr__(self, "kernel", tuple(int(k) for k in self.kernel))
        object.__setattr__(self, "stride", tuple(int(s) for s in self.stride))

    def to_dict(self) -> dict:
        payload = asdict(self)
        payload["inputs"] = list(self.inputs)
        payload["kernel"] = list(self.kernel)
        payload["stride"] = list(self.stride)
        return payload

    @classmethod
    def from_dict(cls, payload: Mapping) -> "LayerSpec":
        return cls(
            name=payload["name"],
            kind=payload["kind"],
            inputs=tuple(payload["inputs"]),
            kernel=tuple(payload.get("kernel", (1, 1, 1))),
            channels_out=int(payload.get("channels_out", 0)),
            padding=payload.get("padding", "valid"),
            stride=tuple(payload.get("stride", (1, 1, 1))),
            activation=payload.get("activation"),
        )


@dataclass(frozen=True)
class ArchitectureSpec:
    family: str
    dimensionality: str
    in_channels: int
    num_classes: int
    layers: Tuple[LayerSpec, ...]
    input_size: Triple
    output_size: Triple
    width_scale: float = field(default=1.0)

    @property
    def is_u_shaped(self) -> bool:
        return self.family in U_SHAPED

    def layer(self, name: str) -> LayerSpec:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "dimensionality": self.dimensionality,
            "in_channels": self.in_channels,
            "num_classes": self.num_classes,
            "input_size": list(self.input_size),
            "output_size": list(self.output_size),
            "width_scale": self.width_scale,
            "layers": [layer.to_dict() for layer in self.layers],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, payload: Mapping) -> "ArchitectureSpec":
        spec = cls(
            family=payload["family"],
            dimensionality=payload["dimensionality"],
            in_channels=int(payload["in_channels"]),
            num_classes=int(payload["num_classes"]),
            layers=tuple(LayerSpec.from_dict(layer) for layer in payload["layers"]),
            input_size=tuple(payload["input_size"]),
            output_size=tuple(payload["output_size"]),
            width_scale=float(payload.get("width_scale", 1.0)),
        )
        infer_layer_shapes(spec)
        return spec

    @classmethod
    def from_json(cls, text: str) -> "ArchitectureSpec":
        return cls.from_dict(json.loads(text))


class _GraphBuilder:
    def __init__(self, dimensionality: str, width_scale: float):
        self.layers: List[LayerSpec] = []
        self._three_d = dimensionality == "3D"
        self._width_scale = width_scale

    def cube(self, extent: int) -> Triple:
        return (extent, extent, extent) if self._three_d else (extent, extent, 1)

    def width(self, channels: int) -> int:
        return max(1, int(round(channels * self._width_scale)))

    def _add(self, name: str, kind: str, inputs: Sequence[str], **kwargs) -> str:
        self.layers.append(LayerSpec(name=name, kind=kind, inputs=tuple(inputs), **kwargs))
        return name

    def conv(self, name, source, channels, extent=3, padding="valid"):
        return self._add(name, "conv", [source], kernel=self.cube(extent), channels_out=self.width(channels), padding=padding)

    def deconv(self, name, source, channels, extent, factor):
        return self._add(
            name, "deconv", [source], kernel=self.cube(extent), channels_out=self.width(channels), stride=self.cube(factor)
        )

    def activation(self, name, source, activation):
        return self._add(name, "activation", [source], activation=activation)

    def batchnorm(self, name, source):
        return self._add(name, "batchnorm", [source])

    def maxpool(self, name, source, factor=2):
        return self._add(name, "maxpool", [source], kernel=self.cube(factor), stride=self.cube(factor))

    def downsample(self, name, source, factor):
        return self._add(name, "downsample", [source], stride=self.cube(factor))

    def upsample(self, name, source, factor):
        return self._add(name, "upsample", [source], stride=self.cube(factor))

    def crop(self, name, source, reference):
        return self._add(name, "crop", [source, reference])

    def concat(self, name, sources):
        return self._add(name, "concat", sources)

    def add(self, name, sources):
        return self._add(name, "add", sources)

    def head(self, source, num_classes):
        return self._add("head", "softmax_head", [source], kernel=(1, 1, 1), channels_out=num_classes)


def _build_dm(builder: _GraphBuilder, dimensionality: str, num_classes: int) -> None:
    source = INPUT
    taps = []
    for index, width in enumerate(DM_WIDTHS[dimensionality], 1):
        conv = builder.conv(f"conv{index}", source, width)
        source = builder.activation(f"prelu{index}", conv, "prelu")
        if index in DM_TAPS:
            taps.append(source)
    deepest = taps[-1]
    merged = [builder.crop(f"crop{index}", tap, deepest) for index, tap in zip(DM_TAPS, taps[:-1])]
    source = builder.concat("multiscale", merged + [deepest])
    for index, width in enumerate(DM_DENSE_WIDTHS, len(DM_WIDTHS[dimensionality]) + 1):
        conv = builder.conv(f"conv{index}", source, width, extent=1)
        source = builder.activation(f"prelu{index}", conv, "prelu")
    builder.head(source, num_classes)


def _build_kk(builder: _GraphBuilder, dimensionality: str, num_classes: int) -> None:
    normal = INPUT
    for index, width in enumerate(KK_WIDTHS[dimensionality], 1):
        conv = builder.conv(f"normal_conv{index}", normal, width)
        normal = builder.activation(f"normal_prelu{index}", conv, "prelu")
    low = builder.downsample("low_down", INPUT, KK_LOW_RESOLUTION_FACTOR)
    for index, width in enumerate(KK_WIDTHS[dimensionality], 1):
        conv = builder.conv(f"low_conv{index}", low, width, padding="same")
        low = builder.activation(f"low_prelu{index}", conv, "prelu")
    low = builder.upsample("low_up", low, KK_LOW_RESOLUTION_FACTOR)
    low = builder.crop("low_crop", low, normal)
    source = builder.concat("fusion", [normal, low])
    for index, width in enumerate(KK_DENSE_WIDTHS, 1):
        conv = builder.conv(f"fc{index}", source, width, extent=1)
        source = builder.activation(f"fc_prelu{index}", conv, "prelu")
    builder.head(source, num_classes)


def _build_unet(builder: _GraphBuilder, num_classes: int) -> None:
    source = INPUT
    skips = []
    for level, width in enumerate(U_WIDTHS, 1):
        for step in (1, 2):
            conv = builder.conv(f"enc{level}_conv{step}", source, width, padding="same")
            source = builder.activation(f"enc{level}_relu{step}", conv, "relu")
        if level < len(U_WIDTHS):
            skips.append(source)
            source = builder.maxpool(f"pool{level}", source)
    for level in range(len(U_WIDTHS) - 1, 0, -1):
        width = U_WIDTHS[level - 1]
        up = builder.deconv(f"dec{level}_up", source, width, extent=2, factor=2)
        source = builder.concat(f"dec{level}_concat", [up, skips[level - 1]])
        for step in (1, 2):
            conv = builder.conv(f"dec{level}_conv{step}", source, width, padding="same")
            source = builder.activation(f"dec{level}_relu{step}", conv, "relu")
    builder.head(source, num_classes)


def _residual_module(builder: _GraphBuilder, prefix: str, source: str, width: int) -> str:
    wide = builder.conv(f"{prefix}_conv3", source, width, extent=3, padding="same")
    narrow = builder.conv(f"{prefix}_conv1", source, width, extent=1, padding="same")
    merged = builder.add(f"{prefix}_add", [wide, narrow])
    normalized = builder.batchnorm(f"{prefix}_bn", merged)
    return builder.activation(f"{prefix}_relu", normalized, "relu")


def _build_uresnet(builder: _GraphBuilder, num_classes: int) -> None:
    source = INPUT
    skips = []
    for level, width in enumerate(U_WIDTHS[:-1], 1):
        source = _residual_module(builder, f"enc{level}", source, width)
        skips.append(source)
        source = builder.maxpool(f"pool{level}", source)
    source = _residual_module(builder, "bottleneck", source, U_WIDTHS[-1])
    for level in range(len(U_WIDTHS) - 1, 0, -1):
        width = U_WIDTHS[level - 1]
        up = builder.deconv(f"dec{level}_up", source, width, extent=3, factor=2)
        merged = builder.add(f"dec{level}_merge", [up, skips[level - 1]])
        source = _residual_module(builder, f"dec{level}", merged, width)
    builder.head(source, num_classes)


def _parse_patch_config(family: str, dimensionality: str, patch_config: Optional[Mapping]) -> Tuple[Triple, float]:
    patch_config = dict(patch_config or {})
    unknown = sorted(set(patch_config) - PATCH_CONFIG_KEYS)
    if unknown:
        raise SpecError(f"Unknown patch_config keys {unknown}")
    input_size = patch_config.get("input_size") or DEFAULT_INPUT_SIZES[(family, dimensionality)]
    input_size = tuple(int(s) for s in input_size)
    if len(input_size) != 3 or any(s < 1 for s in input_size):
        raise SpecError(f"input_size must be three positive integers, got {input_size}")
    if dimensionality == "2D" and input_size[2] != 1:
        raise SpecError(f"2D networks take patches with third extent 1, got {input_size}")
    width_scale = float(patch_config.get("width_scale", 1.0))
    if not width_scale > 0:
        raise SpecError(f"width_scale must be positive, got {width_scale}")
    return input_size, width_scale


def build_spec(
    family: str,
    dimensionality: str,
    in_channels: int,
    patch_config: Optional[Mapping] = None,
    num_classes: int = NUM_CLASSES,
) -> ArchitectureSpec:
    """Builds the layer graph of one architecture.

    Args:
        family: One of DM, KK, UNet, UResNet.
        dimensionality: "2D" or "3D".
        in_channels: Number of stacked modalities (early fusion).
        patch_config: Optional ``input_size`` triple and ``width_scale`` factor.
        num_classes: Softmax head width.

    Raises:
        SpecError: Unknown family or dimensionality, bad channel count, or a
            u-shaped input size whose pooled axes are not divisible by 16.
    """
    if family not in FAMILIES:
        raise SpecError(f"Unknown architecture family {family!r}; expected one of {FAMILIES}")
    if dimensionality not in DIMENSIONALITIES:
        raise SpecError(f"Dimensionality must be one of {DIMENSIONALITIES}, got {dimensionality!r}")
    if int(in_channels) < 1:
        raise SpecError(f"in_channels must be >= 1, got {in_channels}")
    input_size, width_scale = _parse_patch_config(family, dimensionality, patch_config)

    if family in U_SHAPED:
        pooled_axes = 3 if dimensionality == "3D" else 2
        if any(size % POOLING_DIVISOR for size in input_size[:pooled_axes]):
            raise SpecError(
                f"{family} input size {input_size} must be divisible by {POOLING_DIVISOR} on pooled axes"
            )

    builder = _GraphBuilder(dimensionality, width_scale)
    if family == "DM":
        _build_dm(builder, dimensionality, num_classes)
    elif family == "KK":
        _build_kk(builder, dimensionality, num_classes)
    elif family == "UNet":
        _build_unet(builder, num_classes)
    else:
        _build_uresnet(builder, num_classes)

    spec = ArchitectureSpec(
        family=family,
        dimensionality=dimensionality,
        in_channels=int(in_channels),
        num_classes=num_classes,
        layers=tuple(builder.layers),
        input_size=input_size,
        output_size=input_size,
        width_scale=width_scale,
    )
    output_size = output_shape(spec, input_size)
    if family not in U_SHAPED:
        flat_axes = 3 if dimensionality == "3D" else 2
        if any(o >= i for o, i in zip(output_size[:flat_axes], input_size[:flat_axes])):
            raise SpecError(f"{family} output {output_size} must be smaller than input {input_size}")
    spec = ArchitectureSpec(
        family=family,
        dimensionality=dimensionality,
        in_channels=int(in_channels),
        num_classes=num_classes,
        layers=tuple(builder.layers),
        input_size=input_size,
        output_size=output_size,
        width_scale=width_scale,
    )
    logger.debug(f"Built {family} {dimensionality}: input {input_size} -> output {output_size}")
    return spec


def _shape_after(layer: LayerSpec, inputs: List[Tuple[int, Triple]]) -> Tuple[int, Triple]:
    channels, spatial = inputs[0]
    kind = layer.kind
    if kind in ("conv", "softmax_head"):
        if layer.padding == "valid":
            spatial = tuple(n - k + 1 for n, k in zip(spatial, layer.kernel))
        return layer.channels_out, spatial
    if kind == "deconv":
        return layer.channels_out, tuple(n * s for n, s in zip(spatial, layer.stride))
    if kind == "maxpool":
        if any(n % s for n, s in zip(spatial, layer.stride)):
            raise SpecError(f"Layer {layer.name}: size {spatial} not divisible by pool {layer.stride}")
        return channels, tuple(n // s for n, s in zip(spatial, layer.stride))
    if kind == "downsample":
        return channels, tuple(-(-n // s) for n, s in zip(spatial, layer.stride))
    if kind == "upsample":
        return channels, tuple(n * s for n, s in zip(spatial, layer.stride))
    if kind == "crop":
        reference = inputs[1][1]
        if any(r > n for r, n in zip(reference, spatial)):
            raise SpecError(f"Layer {layer.name}: cannot crop {spatial} to larger {reference}")
        return channels, reference
    if kind == "concat":
        if len({s for _, s in inputs}) != 1:
            raise SpecError(f"Layer {layer.name}: concatenated sizes differ: {[s for _, s in inputs]}")
        return sum(c for c, _ in inputs), spatial
    if kind == "add":
        if len(set(inputs)) != 1:
            raise SpecError(f"Layer {layer.name}: summed shapes differ: {inputs}")
        return channels, spatial
    return channels, spatial


def infer_layer_shapes(spec: ArchitectureSpec, input_size: Optional[Sequence[int]] = None) -> Dict[str, Tuple[int, Triple]]:
    """Propagates (channels, spatial size) through the graph.

    Raises:
        SpecError: An input id is unknown or precedes its definition, shapes
            are incompatible, a size becomes non-positive, or the graph does
            not end in its single softmax head.
    """
    size = tuple(int(s) for s in (input_size or spec.input_size))
    shapes: Dict[str, Tuple[int, Triple]] = {INPUT: (spec.in_channels, size)}
    heads = [layer for layer in spec.layers if layer.kind == "softmax_head"]
    if len(heads) != 1 or spec.layers[-1].kind != "softmax_head":
        raise SpecError("A network needs exactly one softmax head as its last layer")
    for layer in spec.layers:
        if layer.name in shapes:
            raise SpecError(f"Duplicate layer id {layer.name!r}")
        try:
            inputs = [shapes[name] for name in layer.inputs]
        except KeyError as e:
            raise SpecError(f"Layer {layer.name} reads undefined layer {e.args[0]!r}") from e
        if not inputs:
            raise SpecError(f"Layer {layer.name} has no inputs")
        channels, spatial = _shape_after(layer, inputs)
        if any(n < 1 for n in spatial):
            raise SpecError(f"Layer {layer.name} has non-positive output size {spatial} for input {size}")
        shapes[layer.name] = (channels, spatial)
    return shapes


def output_shape(spec: ArchitectureSpec, input_size: Sequence[int]) -> Triple:
    return infer_layer_shapes(spec, input_size)[spec.layers[-1].name][1]


def count_parameters(spec: ArchitectureSpec) -> int:
    """Trainable parameters: weights plus biases, PReLU slopes and batch-norm scale/shift."""
    shapes = infer_layer_shapes(spec)
    total = 0
    for layer in spec.layers:
        channels_in = shapes[layer.inputs[0]][0]
        if layer.kind in WEIGHTED_KINDS:
            total += math.prod(layer.kernel) * channels_in * layer.channels_out + layer.channels_out
        elif layer.kind == "batchnorm":
            total += 2 * channels_in
        elif layer.kind == "activation" and layer.activation == "prelu":
            total += channels_in
    return total


def convolution_layers(spec: ArchitectureSpec) -> List[LayerSpec]:
    return [layer for layer in spec.layers if layer.kind in ("conv", "softmax_head")]
