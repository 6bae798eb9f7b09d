import logging
import math
from typing import Dict, List, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from tissuebench.architectures import INPUT, ArchitectureSpec, LayerSpec, infer_layer_shapes

logger = logging.getLogger(__name__)

PRELU_INIT = 0.25


def _transpose_padding(kernel, stride):
    padding = tuple((k - s + 1) // 2 for k, s in zip(kernel, stride))
    output_padding = tuple(s - k + 2 * p for k, s, p in zip(kernel, stride, padding))
    return padding, output_padding


def _make_module(layer: LayerSpec, channels_in: int) -> Optional[nn.Module]:
    if layer.kind in ("conv", "softmax_head"):
        padding = tuple(k // 2 for k in layer.kernel) if layer.padding == "same" else 0
        return nn.Conv3d(channels_in, layer.channels_out, kernel_size=layer.kernel, padding=padding)
    if layer.kind == "deconv":
        padding, output_padding = _transpose_padding(layer.kernel, layer.stride)
        return nn.ConvTranspose3d(
            channels_in,
            layer.channels_out,
            kernel_size=layer.kernel,
            stride=layer.stride,
            padding=padding,
            output_padding=output_padding,
        )
    if layer.kind == "maxpool":
        return nn.MaxPool3d(kernel_size=layer.stride, stride=layer.stride)
    if layer.kind == "batchnorm":
        return nn.BatchNorm3d(channels_in)
    if layer.kind == "activation":
        if layer.activation == "prelu":
            return nn.PReLU(num_parameters=channels_in, init=PRELU_INIT)
        return nn.ReLU()
    return None


def _center_crop(tensor: torch.Tensor, size) -> torch.Tensor:
    slices = [slice(None), slice(None)]
    for n, r in zip(tensor.shape[2:], size):
        start = (n - r) // 2
        slices.append(slice(start, start + r))
    return tensor[tuple(slices)]


def _upsample(tensor: torch.Tensor, factor) -> torch.Tensor:
    for axis, f in enumerate(factor):
        if f > 1:
            tensor = tensor.repeat_interleave(f, dim=2 + axis)
    return tensor


class SegmentationNetwork(nn.Module):
    """Runs an ArchitectureSpec layer graph.

    Inputs are (batch, channels, X, Y, Z) tensors sized like ``spec.input_size``.
    ``forward`` returns per-class probabilities of the output size.
    """

    def __init__(self, spec: ArchitectureSpec):
        super().__init__()
        self.spec = spec
        shapes = infer_layer_shapes(spec)
        self.blocks = nn.ModuleDict()
        for layer in spec.layers:
            module = _make_module(layer, shapes[layer.inputs[0]][0])
            if module is not None:
                self.blocks[layer.name] = module
        last_use: Dict[str, int] = {}
        for index, layer in enumerate(spec.layers):
            for name in layer.inputs:
                last_use[name] = index
        # release_after[i]: outputs no longer read once layer i has run.
        self.release_after: Tuple[Tuple[str, ...], ...] = tuple(
            tuple(name for name, last in last_use.items() if last == index) for index in range(len(spec.layers))
        )

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        outputs: Dict[str, torch.Tensor] = {INPUT: x}
        result = x
        for index, layer in enumerate(self.spec.layers):
            inputs: List[torch.Tensor] = [outputs[name] for name in layer.inputs]
            if layer.name in self.blocks:
                result = self.blocks[layer.name](inputs[0])
            elif layer.kind == "downsample":
                sx, sy, sz = layer.stride
                result = inputs[0][:, :, ::sx, ::sy, ::sz]
            elif layer.kind == "upsample":
                result = _upsample(inputs[0], layer.stride)
            elif layer.kind == "crop":
                result = _center_crop(inputs[0], inputs[1].shape[2:])
            elif layer.kind == "concat":
                result = torch.cat(inputs, dim=1)
            elif layer.kind == "add":
                result = torch.stack(inputs, dim=0).sum(dim=0)
            outputs[layer.name] = result
            del inputs
            for name in self.release_after[index]:
                del outputs[name]
        return result

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.logits(x), dim=1)

    def log_probabilities(self, x: torch.Tensor) -> torch.Tensor:
        return F.log_softmax(self.logits(x), dim=1)


def instantiate(spec: ArchitectureSpec, seed: int = 0) -> SegmentationNetwork:
    """Creates a network with seeded He-normal weights and zero biases."""
    network = SegmentationNetwork(spec)
    generator = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for module in network.modules():
            if isinstance(module, (nn.Conv3d, nn.ConvTranspose3d)):
                fan_in = module.in_channels * math.prod(module.kernel_size)
                module.weight.normal_(0.0, math.sqrt(2.0 / fan_in), generator=generator)
                module.bias.zero_()
            elif isinstance(module, nn.BatchNorm3d):
                module.weight.fill_(1.0)
                module.bias.zero_()
            elif isinstance(module, nn.PReLU):
                module.weight.fill_(PRELU_INIT)
    logger.debug(f"Instantiated {spec.family} {spec.dimensionality} with seed {seed}")
    return network


def parameter_count(network: nn.Module) -> int:
    return sum(p.numel() for p in network.parameters() if p.requires_grad)
