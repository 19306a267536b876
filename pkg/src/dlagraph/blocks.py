"""Residual convolutional blocks: basic, bottleneck, and split (grouped).

Every block is a subgraph ending in Add(main, skip) -> ReLU. The skip path
is the identity when channels and resolution are preserved, otherwise a
1x1 convolution with batch norm. Convolutions never carry a bias here
because each one is followed by batch norm. All nodes of a block share a
fresh block id tag.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

from . import ir
from .ir import ChannelMismatch, GraphBuilder, NodeId


class IndivisibleWidth(ir.GraphError):
    """out_channels is not divisible by the requested mid ratio."""


class IndivisibleGroups(ir.GraphError):
    """The intermediate width is not divisible by the cardinality."""


class BlockKind(enum.Enum):
    BASIC = "Basic"
    BOTTLENECK = "Bottleneck"
    SPLIT = "Split"


@dataclass(frozen=True)
class BlockSpec:
    """Channel plan for one residual block.

    ``mid_ratio`` divides out_channels to give the intermediate width of
    bottleneck and split blocks; ``cardinality`` is the group count of the
    split block's 3x3 convolution.
    """

    kind: BlockKind
    in_channels: int
    out_channels: int
    stride: int = 1
    cardinality: int = 32
    mid_ratio: int = 2

    def __post_init__(self) -> None:
        if self.stride not in (1, 2):
            raise ValueError("block stride must be 1 or 2, got %d" % self.stride)

    @property
    def mid_channels(self) -> int:
        if self.out_channels % self.mid_ratio:
            raise IndivisibleWidth("out_channels=%d not divisible by mid_ratio=%d"
                                   % (self.out_channels, self.mid_ratio))
        return self.out_channels // self.mid_ratio


def _conv_bn(b: GraphBuilder, x: NodeId, kernel: int, stride: int,
             in_ch: int, out_ch: int, groups: int = 1) -> NodeId:
    c = b.add(ir.conv(kernel, stride, kernel // 2, in_ch, out_ch, groups=groups), [x])
    return b.add(ir.batch_norm(out_ch), [c])


def _skip_path(b: GraphBuilder, x: NodeId, spec: BlockSpec) -> NodeId:
    if spec.in_channels == spec.out_channels and spec.stride == 1:
        return x
    return _conv_bn(b, x, 1, spec.stride, spec.in_channels, spec.out_channels)


def _check_input(b: GraphBuilder, x: NodeId, spec: BlockSpec, kind: BlockKind) -> None:
    if spec.kind != kind:
        raise ValueError("spec kind is %s, expected %s" % (spec.kind.value, kind.value))
    if b.channels(x) != spec.in_channels:
        raise ChannelMismatch("block expects %d input channels, got %d"
                              % (spec.in_channels, b.channels(x)))


def build_basic_block(b: GraphBuilder, x: NodeId, spec: BlockSpec) -> NodeId:
    """Two 3x3 convolutions with an identity (or projected) skip connection."""
    _check_input(b, x, spec, BlockKind.BASIC)
    with b.block():
        y = _conv_bn(b, x, 3, spec.stride, spec.in_channels, spec.out_channels)
        y = b.add(ir.relu(), [y])
        y = _conv_bn(b, y, 3, 1, spec.out_channels, spec.out_channels)
        skip = _skip_path(b, x, spec)
        joined = b.add(ir.add(), [y, skip])
        return b.add(ir.relu(), [joined])


def _build_narrowed_block(b: GraphBuilder, x: NodeId, spec: BlockSpec, groups: int) -> NodeId:
    mid = spec.mid_channels
    if mid % groups:
        raise IndivisibleGroups("mid width %d not divisible by cardinality %d" % (mid, groups))
    with b.block():
        y = _conv_bn(b, x, 1, 1, spec.in_channels, mid)
        y = b.add(ir.relu(), [y])
        y = _conv_bn(b, y, 3, spec.stride, mid, mid, groups=groups)
        y = b.add(ir.relu(), [y])
        y = _conv_bn(b, y, 1, 1, mid, spec.out_channels)
        skip = _skip_path(b, x, spec)
        joined = b.add(ir.add(), [y, skip])
        return b.add(ir.relu(), [joined])


def build_bottleneck_block(b: GraphBuilder, x: NodeId, spec: BlockSpec) -> NodeId:
    """1x1 reduce, 3x3 at the narrowed width, 1x1 expand, residual join."""
    _check_input(b, x, spec, BlockKind.BOTTLENECK)
    return _build_narrowed_block(b, x, spec, groups=1)


def build_split_block(b: GraphBuilder, x: NodeId, spec: BlockSpec) -> NodeId:
    """Bottleneck variant whose 3x3 convolution is grouped into
    ``cardinality`` separate paths."""
    _check_input(b, x, spec, BlockKind.SPLIT)
    return _build_narrowed_block(b, x, spec, groups=spec.cardinality)


_BUILDERS = {
    BlockKind.BASIC: build_basic_block,
    BlockKind.BOTTLENECK: build_bottleneck_block,
    BlockKind.SPLIT: build_split_block,
}


def build_block(b: GraphBuilder, x: NodeId, spec: BlockSpec) -> NodeId:
    return _BUILDERS[spec.kind](b, x, spec)
