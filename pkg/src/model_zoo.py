"""
Symbolic backbone descriptions for parameter and MAC accounting.

Nothing here executes a network.  Each builder returns an ``ArchSpec``: an
ordered list of layers with shapes, the stage/block they belong to, and the
index of the layer feeding them (so spatial sizes can be re-derived for any
input resolution).

PSConv replacement rule: the psconv variant tags the 3×3 convolution in the
middle of every bottleneck block.  Tags change nothing about parameter or
MAC counts; that parity is the point.

Counting convention
-------------------
* params: conv Cout·(Cin/g)·K² (bias-free), batch norm 2·C, linear in·out + out.
* MACs: conv Cout·(Cin/g)·K²·Hout·Wout plus linear in·out.  Batch norm,
  ReLU, pooling and residual additions are not counted.  This is the
  convention under which ResNet-50 at 224×224 comes to 4.089 GMACs.
* Spatial sizes follow ceil(H/s) for every strided layer, which matches
  the usual padded 7×7/s2 stem, 3×3/s2 max pool and strided 3×3 or 1×1
  convolutions.
* The CIFAR ResNeXt-29 networks use a single 3×3/s1 stem, no max pool,
  three stages and a 100-way classifier, and default to 32×32 inputs.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Tuple, Union

from .conv_engine import ConvSpec

logger = logging.getLogger(__name__)

VARIANTS = ("standard", "psconv")


class UnknownArchError(KeyError):
    """Raised for architecture or variant names the zoo does not know."""


@dataclass(frozen=True)
class ConvLayer:
    name: str
    spec: ConvSpec
    dilation: str = "none"   # "none", "psconv", or "rate:<d>"
    source: int = -1         # index of the layer feeding this one; -1 = network input
    stage: int = 0
    block: int = -1
    in_hw: Tuple[int, int] = (0, 0)
    out_hw: Tuple[int, int] = (0, 0)

    kind = "conv"

    def next_hw(self, hw: Tuple[int, int]) -> Tuple[int, int]:
        return self.spec.output_hw(*hw)


@dataclass(frozen=True)
class BatchNormLayer:
    name: str
    channels: int
    source: int = -1
    stage: int = 0
    block: int = -1
    in_hw: Tuple[int, int] = (0, 0)
    out_hw: Tuple[int, int] = (0, 0)

    kind = "batchnorm"

    def next_hw(self, hw: Tuple[int, int]) -> Tuple[int, int]:
        return hw


@dataclass(frozen=True)
class PoolLayer:
    name: str
    pool: str      # "max" or "global_avg"
    k: int
    stride: int
    source: int = -1
    stage: int = 0
    block: int = -1
    in_hw: Tuple[int, int] = (0, 0)
    out_hw: Tuple[int, int] = (0, 0)

    kind = "pool"

    def next_hw(self, hw: Tuple[int, int]) -> Tuple[int, int]:
        if self.pool == "global_avg":
            return (1, 1)
        return math.ceil(hw[0] / self.stride), math.ceil(hw[1] / self.stride)


@dataclass(frozen=True)
class LinearLayer:
    name: str
    in_features: int
    out_features: int
    source: int = -1
    stage: int = 0
    block: int = -1
    in_hw: Tuple[int, int] = (1, 1)
    out_hw: Tuple[int, int] = (1, 1)

    kind = "linear"

    def next_hw(self, hw: Tuple[int, int]) -> Tuple[int, int]:
        return (1, 1)


Layer = Union[ConvLayer, BatchNormLayer, PoolLayer, LinearLayer]


@dataclass(frozen=True)
class ArchSpec:
    name: str
    variant: str
    input_hw: Tuple[int, int]
    layers: Tuple[Layer, ...]

    def at_resolution(self, hw: Tuple[int, int]) -> "ArchSpec":
        """Copy with every layer's spatial sizes re-derived from input size *hw*."""
        sizes: List[Tuple[int, int]] = []
        layers: List[Layer] = []
        for layer in self.layers:
            in_hw = tuple(hw) if layer.source < 0 else sizes[layer.source]
            out_hw = layer.next_hw(in_hw)
            sizes.append(out_hw)
            layers.append(replace(layer, in_hw=in_hw, out_hw=out_hw))
        return replace(self, input_hw=tuple(hw), layers=tuple(layers))

    def convs(self) -> List[ConvLayer]:
        return [layer for layer in self.layers if isinstance(layer, ConvLayer)]

    def psconv_layers(self) -> List[ConvLayer]:
        return [c for c in self.convs() if c.dilation == "psconv"]


@dataclass
class LayerCount:
    name: str
    kind: str
    stage: int
    block: int
    params: int
    macs: int
    out_hw: Tuple[int, int]
    dilation: str = ""

    def to_row(self) -> dict:
        return {
            "name": self.name,
            "kind": self.kind,
            "stage": self.stage,
            "block": self.block,
            "params": self.params,
            "macs": self.macs,
            "out_h": self.out_hw[0],
            "out_w": self.out_hw[1],
            "dilation": self.dilation,
        }


@dataclass
class CountReport:
    arch: str
    variant: str
    input_hw: Tuple[int, int]
    layers: List[LayerCount] = field(default_factory=list)

    @property
    def total_params(self) -> int:
        return sum(layer.params for layer in self.layers)

    @property
    def total_macs(self) -> int:
        return sum(layer.macs for layer in self.layers)

    @property
    def gflops(self) -> float:
        return self.total_macs / 1e9

    def to_dict(self) -> dict:
        return {
            "arch": self.arch,
            "variant": self.variant,
            "input": list(self.input_hw),
            "params": self.total_params,
            "macs": self.total_macs,
            "gflops": round(self.gflops, 3),
            "conv_layers": sum(1 for layer in self.layers if layer.kind == "conv"),
            "psconv_layers": sum(1 for layer in self.layers if layer.dilation == "psconv"),
            "flop_convention": "1 FLOP = 1 multiply-accumulate over conv and linear layers",
        }


# ── builders ──────────────────────────────────────────────────────────────────

class _Builder:
    """Appends layers while tracking which layer feeds the next one."""

    def __init__(self) -> None:
        self.layers: List[Layer] = []
        self.stage = 0
        self.block = -1

    def add(self, layer: Layer) -> int:
        self.layers.append(replace(layer, stage=self.stage, block=self.block))
        return len(self.layers) - 1

    def conv(self, name: str, source: int, cin: int, cout: int, k: int,
             stride: int = 1, groups: int = 1, dilation: str = "none") -> int:
        idx = self.add(ConvLayer(name, ConvSpec(cin, cout, k, stride, groups), dilation, source))
        return self.add(BatchNormLayer(f"{name}.bn", cout, idx))


IMAGENET_PLANES = (64, 128, 256, 512)
CIFAR_PLANES = (64, 128, 256)


def _bottleneck_stack(
    *,
    name: str,
    variant: str,
    blocks: Tuple[int, ...],
    groups: int = 1,
    width_per_group: int = 64,
    planes: Tuple[int, ...] = IMAGENET_PLANES,
    stage_rates: Optional[Tuple[int, ...]] = None,
    stage_strides: Tuple[int, ...] = (1, 2, 2, 2),
    stem: str = "imagenet",
    num_classes: int = 1000,
    input_hw: Tuple[int, int] = (224, 224),
) -> ArchSpec:
    """Bottleneck network; the "imagenet" stem is 7×7/s2 + max pool, "cifar" a single 3×3/s1."""
    if variant not in VARIANTS:
        raise UnknownArchError(f"unknown variant {variant!r}; expected one of {', '.join(VARIANTS)}")
    stage_rates = stage_rates or (1,) * len(blocks)
    b = _Builder()
    if stem == "cifar":
        cur = b.conv("conv1", -1, 3, 64, 3)
    else:
        cur = b.conv("conv1", -1, 3, 64, 7, stride=2)
        cur = b.add(PoolLayer("maxpool", "max", 3, 2, cur))
    inplanes = 64

    for stage_idx, (n_blocks, stage_planes) in enumerate(zip(blocks, planes), start=1):
        b.stage = stage_idx
        width = int(stage_planes * (width_per_group / 64.0)) * groups
        rate = stage_rates[stage_idx - 1]
        for block_idx in range(n_blocks):
            b.block = block_idx
            stride = stage_strides[stage_idx - 1] if block_idx == 0 else 1
            prefix = f"layer{stage_idx}.{block_idx}"
            if variant == "psconv":
                tag = "psconv"
            else:
                tag = f"rate:{rate}" if rate > 1 else "none"
            block_in = cur
            cur = b.conv(f"{prefix}.conv1", block_in, inplanes, width, 1)
            cur = b.conv(f"{prefix}.conv2", cur, width, width, 3, stride, groups, tag)
            cur = b.conv(f"{prefix}.conv3", cur, width, stage_planes * 4, 1)
            if block_idx == 0 and (stride != 1 or inplanes != stage_planes * 4):
                b.conv(f"{prefix}.downsample", block_in, inplanes, stage_planes * 4, 1, stride)
            inplanes = stage_planes * 4

    b.stage, b.block = len(blocks) + 1, -1
    cur = b.add(PoolLayer("avgpool", "global_avg", 0, 1, cur))
    b.add(LinearLayer("fc", inplanes, num_classes, cur))
    arch = ArchSpec(name=name, variant=variant, input_hw=input_hw, layers=tuple(b.layers))
    return arch.at_resolution(input_hw)


def resnet50(variant: str = "standard", input_hw: Tuple[int, int] = (224, 224)) -> ArchSpec:
    return _bottleneck_stack(name="resnet50", variant=variant, blocks=(3, 4, 6, 3), input_hw=input_hw)


def resnet101(variant: str = "standard", input_hw: Tuple[int, int] = (224, 224)) -> ArchSpec:
    return _bottleneck_stack(name="resnet101", variant=variant, blocks=(3, 4, 23, 3), input_hw=input_hw)


def resnext50_32x4d(variant: str = "standard", input_hw: Tuple[int, int] = (224, 224)) -> ArchSpec:
    return _bottleneck_stack(
        name="resnext50_32x4d", variant=variant, blocks=(3, 4, 6, 3),
        groups=32, width_per_group=4, input_hw=input_hw,
    )


def resnext101_32x4d(variant: str = "standard", input_hw: Tuple[int, int] = (224, 224)) -> ArchSpec:
    return _bottleneck_stack(
        name="resnext101_32x4d", variant=variant, blocks=(3, 4, 23, 3),
        groups=32, width_per_group=4, input_hw=input_hw,
    )


def drn_a_50(variant: str = "standard", input_hw: Tuple[int, int] = (224, 224)) -> ArchSpec:
    """ResNet-50 with stages 3 and 4 kept at stride 1 and dilated by 2 and 4."""
    return _bottleneck_stack(
        name="drn_a_50", variant=variant, blocks=(3, 4, 6, 3),
        stage_rates=(1, 1, 2, 4), stage_strides=(1, 2, 1, 1), input_hw=input_hw,
    )


def resnext29_8x64d(variant: str = "standard", input_hw: Tuple[int, int] = (32, 32)) -> ArchSpec:
    """CIFAR-100 ResNeXt-29: 3×3 stem, three stages of three blocks, 100-way classifier."""
    return _bottleneck_stack(
        name="resnext29_8x64d", variant=variant, blocks=(3, 3, 3), groups=8, width_per_group=64,
        planes=CIFAR_PLANES, stage_strides=(1, 2, 2), stem="cifar", num_classes=100, input_hw=input_hw,
    )


def resnext29_16x64d(variant: str = "standard", input_hw: Tuple[int, int] = (32, 32)) -> ArchSpec:
    return _bottleneck_stack(
        name="resnext29_16x64d", variant=variant, blocks=(3, 3, 3), groups=16, width_per_group=64,
        planes=CIFAR_PLANES, stage_strides=(1, 2, 2), stem="cifar", num_classes=100, input_hw=input_hw,
    )


ARCHITECTURES: Dict[str, Callable[..., ArchSpec]] = {
    "resnet50": resnet50,
    "resnet101": resnet101,
    "resnext50_32x4d": resnext50_32x4d,
    "resnext101_32x4d": resnext101_32x4d,
    "drn_a_50": drn_a_50,
    "resnext29_8x64d": resnext29_8x64d,
    "resnext29_16x64d": resnext29_16x64d,
}


def get_arch(name: str, variant: str = "standard", input_hw: Optional[Tuple[int, int]] = None) -> ArchSpec:
    """Build *name*; *input_hw* defaults to the resolution the network was designed for."""
    try:
        builder = ARCHITECTURES[name]
    except KeyError:
        raise UnknownArchError(
            f"unknown architecture {name!r}; expected one of {', '.join(ARCHITECTURES)}"
        ) from None
    if input_hw is None:
        return builder(variant)
    return builder(variant, tuple(input_hw))


# ── counting ──────────────────────────────────────────────────────────────────

def _layer_params(layer: Layer) -> int:
    if isinstance(layer, ConvLayer):
        s = layer.spec
        return s.cout * s.cin_per_group * s.k * s.k
    if isinstance(layer, BatchNormLayer):
        return 2 * layer.channels
    if isinstance(layer, LinearLayer):
        return layer.in_features * layer.out_features + layer.out_features
    return 0


def _layer_macs(layer: Layer) -> int:
    if isinstance(layer, ConvLayer):
        s = layer.spec
        return s.cout * s.cin_per_group * s.k * s.k * layer.out_hw[0] * layer.out_hw[1]
    if isinstance(layer, LinearLayer):
        return layer.in_features * layer.out_features
    return 0


def _count(arch: ArchSpec) -> CountReport:
    report = CountReport(arch=arch.name, variant=arch.variant, input_hw=arch.input_hw)
    for layer in arch.layers:
        report.layers.append(LayerCount(
            name=layer.name,
            kind=layer.kind,
            stage=layer.stage,
            block=layer.block,
            params=_layer_params(layer),
            macs=_layer_macs(layer),
            out_hw=layer.out_hw,
            dilation=getattr(layer, "dilation", ""),
        ))
    logger.debug("%s/%s: %d params, %d MACs", arch.name, arch.variant,
                 report.total_params, report.total_macs)
    return report


def count_params(arch: ArchSpec) -> CountReport:
    return _count(arch)


def count_flops(arch: ArchSpec, input_hw: Optional[Tuple[int, int]] = None) -> CountReport:
    """MAC count at *input_hw* (defaults to the resolution *arch* was built for)."""
    if input_hw is not None and tuple(input_hw) != arch.input_hw:
        arch = arch.at_resolution(tuple(input_hw))
    return _count(arch)
