"""Computation-graph intermediate representation.

A ``Graph`` is an immutable directed acyclic multigraph of primitive tensor
operations. Node ids are dense integers assigned in construction order, so
for builder-produced graphs the id order is already a topological order.
``GraphBuilder`` is the single-writer construction API; built graphs are
safe to share between any number of readers.
"""

from __future__ import annotations

import enum
import heapq
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Iterator, Sequence

NodeId = int


class GraphError(Exception):
    """Base class for graph construction and analysis errors."""


class UnknownInput(GraphError):
    """An edge refers to a node id that does not exist yet."""


class ArityMismatch(GraphError):
    """An op was given the wrong number of inputs."""


class CycleDetected(GraphError):
    """No topological order exists."""


class ShapeConflict(GraphError):
    """Operand shapes are inconsistent with the op's attributes."""


class ChannelMismatch(GraphError):
    """A builder was handed a feature with the wrong channel count."""


@dataclass(frozen=True)
class TensorShape:
    """Extents of a dense NCHW tensor; every extent is at least 1."""

    batch: int
    channels: int
    height: int
    width: int

    def __post_init__(self) -> None:
        for name in ("batch", "channels", "height", "width"):
            if getattr(self, name) < 1:
                raise ValueError("%s must be >= 1, got %d" % (name, getattr(self, name)))

    @property
    def spatial(self) -> tuple[int, int]:
        return (self.height, self.width)

    def nelems(self) -> int:
        return self.batch * self.channels * self.height * self.width

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.batch, self.channels, self.height, self.width)


class OpKind(enum.Enum):
    CONV = "Conv"
    BATCH_NORM = "BatchNorm"
    RELU = "ReLU"
    MAX_POOL = "MaxPool"
    GLOBAL_AVG_POOL = "GlobalAvgPool"
    LINEAR = "Linear"
    CONCAT = "Concat"
    ADD = "Add"
    UPSAMPLE = "Upsample"
    SOFTMAX = "Softmax"
    INPUT = "Input"
    OUTPUT = "Output"


class UpsampleMode(enum.Enum):
    FIXED_BILINEAR = "fixed_bilinear"
    LEARNED_TRANSPOSED_CONV = "learned_transposed_conv"


# (min_inputs, max_inputs); None means unbounded.
_ARITY: dict[OpKind, tuple[int, int | None]] = {
    OpKind.INPUT: (0, 0),
    OpKind.CONCAT: (2, None),
    OpKind.ADD: (2, 2),
}
_DEFAULT_ARITY = (1, 1)


def arity_bounds(kind: OpKind) -> tuple[int, int | None]:
    return _ARITY.get(kind, _DEFAULT_ARITY)


@dataclass(frozen=True)
class PrimOp:
    """A primitive operation with its kind-specific attribute map."""

    kind: OpKind
    attrs: dict[str, Any] = field(default_factory=dict)

    def attr(self, name: str) -> Any:
        return self.attrs[name]


def conv(kernel: int, stride: int, padding: int, in_channels: int,
         out_channels: int, groups: int = 1, has_bias: bool = False) -> PrimOp:
    if kernel < 1 or stride < 1 or padding < 0:
        raise ValueError("bad conv geometry k=%d s=%d p=%d" % (kernel, stride, padding))
    if in_channels % groups or out_channels % groups:
        raise ValueError("channels (%d -> %d) not divisible by groups=%d"
                         % (in_channels, out_channels, groups))
    return PrimOp(OpKind.CONV, {
        "kernel": kernel, "stride": stride, "padding": padding,
        "in_channels": in_channels, "out_channels": out_channels,
        "groups": groups, "has_bias": has_bias,
    })


def batch_norm(channels: int, epsilon: float = 1e-5) -> PrimOp:
    return PrimOp(OpKind.BATCH_NORM, {"channels": channels, "epsilon": epsilon})


def relu() -> PrimOp:
    return PrimOp(OpKind.RELU)


def max_pool(kernel: int, stride: int, ceil_mode: bool = False) -> PrimOp:
    return PrimOp(OpKind.MAX_POOL, {"kernel": kernel, "stride": stride, "ceil_mode": ceil_mode})


def global_avg_pool() -> PrimOp:
    return PrimOp(OpKind.GLOBAL_AVG_POOL)


def linear(in_features: int, out_features: int, has_bias: bool = True) -> PrimOp:
    return PrimOp(OpKind.LINEAR, {
        "in_features": in_features, "out_features": out_features, "has_bias": has_bias,
    })


def concat() -> PrimOp:
    # Concatenation is defined along the channel axis only.
    return PrimOp(OpKind.CONCAT, {"axis": 1})


def add() -> PrimOp:
    return PrimOp(OpKind.ADD)


def upsample(factor: int, mode: UpsampleMode, channels: int) -> PrimOp:
    if factor < 2 or factor % 2:
        raise ValueError("upsample factor must be an even integer >= 2, got %d" % factor)
    return PrimOp(OpKind.UPSAMPLE, {"factor": factor, "mode": mode.value, "channels": channels})


def softmax() -> PrimOp:
    return PrimOp(OpKind.SOFTMAX, {"axis": 1})


def input_op(channels: int, height: int, width: int) -> PrimOp:
    return PrimOp(OpKind.INPUT, {"channels": channels, "height": height, "width": width})


def output_op() -> PrimOp:
    return PrimOp(OpKind.OUTPUT)


def upsample_kernel_geometry(factor: int) -> tuple[int, int, int]:
    """(kernel, stride, padding) of the transposed conv realizing an exact
    x``factor`` upsampling. Output extent is exactly factor * input extent."""
    return (2 * factor, factor, factor // 2)


@dataclass(frozen=True)
class Tags:
    """Structural labels: stage (1..6, "head" or "decoder"), block id, aggregation-node id."""

    stage: int | str | None = None
    block_id: int | None = None
    agg_node_id: int | None = None

    def is_empty(self) -> bool:
        return self.stage is None and self.block_id is None and self.agg_node_id is None


@dataclass(frozen=True)
class GraphNode:
    id: NodeId
    op: PrimOp
    inputs: tuple[NodeId, ...]
    tags: Tags = Tags()


@dataclass(frozen=True)
class Graph:
    """Immutable-after-build multigraph. ``nodes[i].id == i`` always holds
    for builder-produced graphs; input argument order is preserved verbatim."""

    nodes: tuple[GraphNode, ...]
    inputs: tuple[NodeId, ...]
    outputs: tuple[NodeId, ...]

    def node(self, nid: NodeId) -> GraphNode:
        return self.nodes[nid]

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self) -> Iterator[GraphNode]:
        return iter(self.nodes)


def successors(graph: Graph) -> dict[NodeId, list[NodeId]]:
    """Consumer lists per node, with multiplicity, in ascending consumer order."""
    succ: dict[NodeId, list[NodeId]] = {n.id: [] for n in graph.nodes}
    for n in graph.nodes:
        for src in n.inputs:
            succ[src].append(n.id)
    return succ


def infer_node_shape(op: PrimOp, input_shapes: Sequence[TensorShape]) -> TensorShape:
    """Single-op shape rule shared by the builder and the shape analysis.

    Conv and MaxPool use floor((extent + 2*padding - kernel) / stride) + 1;
    MaxPool may opt into ceil division via its ``ceil_mode`` attribute.
    Raises ShapeConflict when operands are inconsistent.
    """
    kind = op.kind
    if kind == OpKind.INPUT:
        raise ShapeConflict("Input nodes take their shape from the caller")

    if kind == OpKind.CONV:
        (s,) = input_shapes
        if s.channels != op.attr("in_channels"):
            raise ShapeConflict("conv expects %d channels, got %d"
                                % (op.attr("in_channels"), s.channels))
        k, st, p = op.attr("kernel"), op.attr("stride"), op.attr("padding")
        oh = (s.height + 2 * p - k) // st + 1
        ow = (s.width + 2 * p - k) // st + 1
        if oh < 1 or ow < 1:
            raise ShapeConflict("conv output collapses to zero extent")
        return TensorShape(s.batch, op.attr("out_channels"), oh, ow)

    if kind == OpKind.MAX_POOL:
        (s,) = input_shapes
        k, st = op.attr("kernel"), op.attr("stride")
        num_h, num_w = s.height - k, s.width - k
        if op.attrs.get("ceil_mode", False):
            oh = -(-num_h // st) + 1
            ow = -(-num_w // st) + 1
        else:
            oh = num_h // st + 1
            ow = num_w // st + 1
        if oh < 1 or ow < 1:
            raise ShapeConflict("pool output collapses to zero extent")
        return TensorShape(s.batch, s.channels, oh, ow)

    if kind == OpKind.GLOBAL_AVG_POOL:
        (s,) = input_shapes
        return TensorShape(s.batch, s.channels, 1, 1)

    if kind == OpKind.LINEAR:
        (s,) = input_shapes
        if s.spatial != (1, 1):
            raise ShapeConflict("linear expects 1x1 spatial extent, got %dx%d" % s.spatial)
        if s.channels != op.attr("in_features"):
            raise ShapeConflict("linear expects %d features, got %d"
                                % (op.attr("in_features"), s.channels))
        return TensorShape(s.batch, op.attr("out_features"), 1, 1)

    if kind == OpKind.CONCAT:
        first = input_shapes[0]
        for s in input_shapes[1:]:
            if (s.batch, s.height, s.width) != (first.batch, first.height, first.width):
                raise ShapeConflict("concat operands disagree outside the channel axis")
        return TensorShape(first.batch, sum(s.channels for s in input_shapes),
                           first.height, first.width)

    if kind == OpKind.ADD:
        a, b = input_shapes
        if a != b:
            raise ShapeConflict("add operands differ: %s vs %s" % (a, b))
        return a

    if kind == OpKind.UPSAMPLE:
        (s,) = input_shapes
        if s.channels != op.attr("channels"):
            raise ShapeConflict("upsample expects %d channels, got %d"
                                % (op.attr("channels"), s.channels))
        f = op.attr("factor")
        return TensorShape(s.batch, s.channels, s.height * f, s.width * f)

    # BatchNorm, ReLU, Softmax, Output preserve their input shape.
    (s,) = input_shapes
    if kind == OpKind.BATCH_NORM and s.channels != op.attr("channels"):
        raise ShapeConflict("batchnorm expects %d channels, got %d"
                            % (op.attr("channels"), s.channels))
    return s


class GraphBuilder:
    """Single-writer graph construction with incremental shape tracking.

    Tag context managers (``stage``, ``block``, ``agg_node``) label every
    node added inside them; block and aggregation-node ids are handed out
    densely in construction order.
    """

    def __init__(self) -> None:
        self._nodes: list[GraphNode] = []
        self._shapes: list[TensorShape] = []
        self._inputs: list[NodeId] = []
        self._outputs: list[NodeId] = []
        self._stage: int | str | None = None
        self._block_id: int | None = None
        self._agg_id: int | None = None
        self._next_block_id = 0
        self._next_agg_id = 0

    def __len__(self) -> int:
        return len(self._nodes)

    def shape(self, nid: NodeId) -> TensorShape:
        return self._shapes[nid]

    def channels(self, nid: NodeId) -> int:
        return self._shapes[nid].channels

    def add(self, op: PrimOp, inputs: Sequence[NodeId] = (), tags: Tags | None = None) -> NodeId:
        inputs = tuple(inputs)
        for i in inputs:
            if not 0 <= i < len(self._nodes):
                raise UnknownInput("input id %d does not exist (graph has %d nodes)"
                                   % (i, len(self._nodes)))
        lo, hi = arity_bounds(op.kind)
        if len(inputs) < lo or (hi is not None and len(inputs) > hi):
            raise ArityMismatch("%s takes %s inputs, got %d"
                                % (op.kind.value,
                                   ("exactly %d" % lo) if lo == hi else ("at least %d" % lo),
                                   len(inputs)))
        nid = len(self._nodes)
        if op.kind == OpKind.INPUT:
            shape = TensorShape(1, op.attr("channels"), op.attr("height"), op.attr("width"))
            self._inputs.append(nid)
        else:
            shape = infer_node_shape(op, [self._shapes[i] for i in inputs])
        if tags is None:
            tags = Tags(stage=self._stage, block_id=self._block_id, agg_node_id=self._agg_id)
        self._nodes.append(GraphNode(nid, op, inputs, tags))
        self._shapes.append(shape)
        return nid

    def add_input(self, shape: TensorShape) -> NodeId:
        nid = self.add(input_op(shape.channels, shape.height, shape.width))
        # add() defaults the batch extent to 1; honor the caller's batch.
        self._shapes[nid] = shape
        return nid

    def mark_output(self, nid: NodeId) -> NodeId:
        out = self.add(output_op(), [nid])
        self._outputs.append(out)
        return out

    @contextmanager
    def stage(self, stage: int | str):
        prev, self._stage = self._stage, stage
        try:
            yield stage
        finally:
            self._stage = prev

    @contextmanager
    def block(self):
        bid = self._next_block_id
        self._next_block_id += 1
        prev, self._block_id = self._block_id, bid
        try:
            yield bid
        finally:
            self._block_id = prev

    @contextmanager
    def agg_node(self):
        aid = self._next_agg_id
        self._next_agg_id += 1
        prev, self._agg_id = self._agg_id, aid
        try:
            yield aid
        finally:
            self._agg_id = prev

    def build(self) -> Graph:
        return Graph(tuple(self._nodes), tuple(self._inputs), tuple(self._outputs))


def topo_order(graph: Graph) -> list[NodeId]:
    """Deterministic topological order; ties broken by ascending node id.

    For builder-produced graphs this is simply 0..n-1. Raises CycleDetected
    for hand-assembled graphs containing a back-edge.
    """
    indegree = {n.id: len(n.inputs) for n in graph.nodes}
    succ = successors(graph)
    ready = [nid for nid, deg in indegree.items() if deg == 0]
    heapq.heapify(ready)
    order: list[NodeId] = []
    while ready:
        nid = heapq.heappop(ready)
        order.append(nid)
        for consumer in succ[nid]:
            indegree[consumer] -= 1
            if indegree[consumer] == 0:
                heapq.heappush(ready, consumer)
    if len(order) != len(graph.nodes):
        raise CycleDetected("%d of %d nodes are stuck on a cycle"
                            % (len(graph.nodes) - len(order), len(graph.nodes)))
    return order


@dataclass(frozen=True)
class Violation:
    kind: str
    node_id: NodeId | None
    message: str

    def __str__(self) -> str:
        where = "" if self.node_id is None else " at node %d" % self.node_id
        return "%s%s: %s" % (self.kind, where, self.message)


def validate(graph: Graph) -> list[Violation]:
    """Check all structural invariants; returns a report, empty means valid.

    Pure: never raises for graph defects, never mutates.
    """
    report: list[Violation] = []
    n = len(graph.nodes)

    for i, node in enumerate(graph.nodes):
        if node.id != i:
            report.append(Violation("BadNodeId", node.id,
                                    "node at position %d carries id %d" % (i, node.id)))
    for node in graph.nodes:
        lo, hi = arity_bounds(node.op.kind)
        if len(node.inputs) < lo or (hi is not None and len(node.inputs) > hi):
            report.append(Violation("ArityViolation", node.id,
                                    "%s with %d inputs" % (node.op.kind.value, len(node.inputs))))
        for src in node.inputs:
            if not 0 <= src < n:
                report.append(Violation("UnknownInput", node.id,
                                        "refers to missing node %d" % src))
        if node.op.kind == OpKind.CONV:
            a = node.op.attrs
            if a["kernel"] < 1 or a["stride"] < 1:
                report.append(Violation("BadAttribute", node.id, "conv kernel/stride < 1"))
            if a["in_channels"] % a["groups"] or a["out_channels"] % a["groups"]:
                report.append(Violation("BadAttribute", node.id,
                                        "conv channels not divisible by groups"))

    for out in graph.outputs:
        if not 0 <= out < n:
            report.append(Violation("UnknownInput", None, "output id %d missing" % out))

    if any(v.kind == "UnknownInput" for v in report):
        return report  # edge set is broken; reachability and order are meaningless

    try:
        topo_order(graph)
    except CycleDetected as exc:
        report.append(Violation("CycleDetected", None, str(exc)))

    # Reachability from the declared graph inputs; a fixpoint sweep keeps
    # this correct even for hand-built graphs with shuffled ids or cycles.
    reachable = set(graph.inputs)
    changed = True
    while changed:
        changed = False
        for node in graph.nodes:
            if node.id not in reachable and node.inputs \
                    and all(i in reachable for i in node.inputs):
                reachable.add(node.id)
                changed = True
    for node in graph.nodes:
        if node.id not in reachable:
            report.append(Violation("OrphanNode", node.id,
                                    "not reachable from any graph input"))
    return report
