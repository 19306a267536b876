"""Static analyses over graphs: shape inference, parameter and
fused-multiply-add accounting, and structural statistics.

Cost conventions: parameters count learnable scalars only (batch-norm
running statistics are excluded); FMAs count convolution, linear, and
learned-upsampling arithmetic at batch size 1, while normalization,
activations, pooling, and concatenation contribute zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from . import ir
from .ir import (Graph, GraphNode, NodeId, OpKind, TensorShape, UpsampleMode,
                 infer_node_shape, successors, topo_order, upsample_kernel_geometry)

ShapeMap = dict[NodeId, TensorShape]


class MissingTags(ir.GraphError):
    """Structural statistics need block or aggregation tags."""


def infer_shapes(graph: Graph, input_shape: TensorShape) -> ShapeMap:
    """Shape of every node given the single graph input's shape.

    Raises ShapeConflict when an operand combination is inconsistent,
    which signals a builder bug or a hand-edited document.
    """
    if len(graph.inputs) != 1:
        raise ir.ShapeConflict("expected exactly one graph input, found %d"
                               % len(graph.inputs))
    shapes: ShapeMap = {}
    for nid in topo_order(graph):
        node = graph.node(nid)
        if node.op.kind == OpKind.INPUT:
            shapes[nid] = input_shape
        else:
            shapes[nid] = infer_node_shape(node.op, [shapes[i] for i in node.inputs])
    return shapes


def node_params(node: GraphNode) -> int:
    """Learnable scalars owned by one node."""
    op = node.op
    a = op.attrs
    if op.kind == OpKind.CONV:
        n = a["kernel"] ** 2 * (a["in_channels"] // a["groups"]) * a["out_channels"]
        return n + (a["out_channels"] if a["has_bias"] else 0)
    if op.kind == OpKind.BATCH_NORM:
        return 2 * a["channels"]
    if op.kind == OpKind.LINEAR:
        return a["in_features"] * a["out_features"] + (a["out_features"] if a["has_bias"] else 0)
    if op.kind == OpKind.UPSAMPLE and a["mode"] == UpsampleMode.LEARNED_TRANSPOSED_CONV.value:
        kernel, _, _ = upsample_kernel_geometry(a["factor"])
        return a["channels"] * kernel ** 2  # one kernel per channel, no bias
    return 0


def count_params(graph: Graph) -> int:
    return sum(node_params(node) for node in graph.nodes)


def node_fmas(node: GraphNode, out_shape: TensorShape) -> int:
    """Fused multiply-adds of one node at batch size 1."""
    op = node.op
    a = op.attrs
    if op.kind == OpKind.CONV:
        per_pixel = (a["in_channels"] // a["groups"]) * a["kernel"] ** 2
        return out_shape.height * out_shape.width * a["out_channels"] * per_pixel
    if op.kind == OpKind.LINEAR:
        return a["in_features"] * a["out_features"]
    if op.kind == OpKind.UPSAMPLE and a["mode"] == UpsampleMode.LEARNED_TRANSPOSED_CONV.value:
        kernel, _, _ = upsample_kernel_geometry(a["factor"])
        return out_shape.height * out_shape.width * a["channels"] * kernel ** 2
    return 0


def count_fmas(graph: Graph, input_shape: TensorShape) -> int:
    shapes = infer_shapes(graph, input_shape)
    return sum(node_fmas(node, shapes[node.id]) for node in graph.nodes)


@dataclass(frozen=True)
class StageCost:
    params: int
    fmas: int


@dataclass(frozen=True)
class CostReport:
    params: int
    fmas: int
    per_stage: dict[str, StageCost]


def cost_report(graph: Graph, input_shape: TensorShape) -> CostReport:
    """Totals plus a per-stage breakdown; totals equal the stage sums."""
    shapes = infer_shapes(graph, input_shape)
    per_stage: dict[str, list[int]] = {}
    for node in graph.nodes:
        key = "untagged" if node.tags.stage is None else str(node.tags.stage)
        bucket = per_stage.setdefault(key, [0, 0])
        bucket[0] += node_params(node)
        bucket[1] += node_fmas(node, shapes[node.id])
    report = CostReport(
        params=count_params(graph),
        fmas=sum(v[1] for v in per_stage.values()),
        per_stage={k: StageCost(*v) for k, v in sorted(per_stage.items())},
    )
    assert report.params == sum(v.params for v in report.per_stage.values())
    return report


@dataclass(frozen=True)
class StructureStats:
    blocks: int
    agg_nodes: int
    max_root_fanin: int
    per_stage_depth: dict[int, int | None]
    max_block_to_output_hops: int


def _block_output_nodes(graph: Graph) -> dict[int, NodeId]:
    """Last node of each tagged block; blocks end in their join ReLU, which
    is always the block's highest id."""
    out: dict[int, NodeId] = {}
    for node in graph.nodes:
        bid = node.tags.block_id
        if bid is not None:
            out[bid] = max(out.get(bid, -1), node.id)
    return out


def _agg_hops_to_output(graph: Graph) -> dict[NodeId, int]:
    """Minimum number of aggregation nodes entered on any path from each
    node to a graph output; unreachable nodes are absent."""
    succ = successors(graph)
    inf = math.inf
    dist: dict[NodeId, float] = {}
    outputs = set(graph.outputs)
    for nid in reversed(topo_order(graph)):
        node = graph.node(nid)
        if nid in outputs:
            dist[nid] = 0
            continue
        best = inf
        for consumer in succ[nid]:
            d = dist.get(consumer, inf)
            if d is inf:
                continue
            ctag = graph.node(consumer).tags.agg_node_id
            step = 1 if ctag is not None and ctag != node.tags.agg_node_id else 0
            best = min(best, d + step)
        if best is not inf:
            dist[nid] = int(best)
    return {k: int(v) for k, v in dist.items()}


def structure_stats(graph: Graph) -> StructureStats:
    """Counts of tagged blocks and aggregation nodes, the widest
    aggregation fan-in, per-stage tree depths, and the worst shortest-path
    hop count from a block output to the graph output (counted in
    aggregation nodes entered)."""
    block_ids = {n.tags.block_id for n in graph.nodes if n.tags.block_id is not None}
    agg_ids = {n.tags.agg_node_id for n in graph.nodes if n.tags.agg_node_id is not None}
    if not block_ids and not agg_ids:
        raise MissingTags("graph carries no block or aggregation tags")

    max_fanin = 0
    for node in graph.nodes:
        if node.tags.agg_node_id is not None and node.op.kind == OpKind.CONCAT:
            max_fanin = max(max_fanin, len(node.inputs))

    stage_blocks: dict[int, set[int]] = {}
    for node in graph.nodes:
        if node.tags.block_id is not None and isinstance(node.tags.stage, int):
            stage_blocks.setdefault(node.tags.stage, set()).add(node.tags.block_id)
    per_stage_depth: dict[int, int | None] = {}
    for stage, blocks in sorted(stage_blocks.items()):
        count = len(blocks)
        depth = count.bit_length() - 1
        per_stage_depth[stage] = depth if 2 ** depth == count else None

    hops = _agg_hops_to_output(graph)
    max_hops = 0
    for bid, nid in _block_output_nodes(graph).items():
        if nid in hops:
            max_hops = max(max_hops, hops[nid])

    return StructureStats(
        blocks=len(block_ids),
        agg_nodes=len(agg_ids),
        max_root_fanin=max_fanin,
        per_stage_depth=per_stage_depth,
        max_block_to_output_hops=max_hops,
    )


def structural_violations(graph: Graph) -> list[str]:
    """Claims checked by the document checker: per stage, a tree over 2^d
    blocks must carry 2^(d-1) aggregation nodes and a root fan-in between
    d+1 and d+2 (the upper value when the stage root also receives the
    cross-stage feature)."""
    problems: list[str] = []
    stage_blocks: dict[int, set[int]] = {}
    stage_aggs: dict[int, set[int]] = {}
    stage_fanin: dict[int, int] = {}
    for node in graph.nodes:
        if not isinstance(node.tags.stage, int):
            continue
        s = node.tags.stage
        if node.tags.block_id is not None:
            stage_blocks.setdefault(s, set()).add(node.tags.block_id)
        if node.tags.agg_node_id is not None:
            stage_aggs.setdefault(s, set()).add(node.tags.agg_node_id)
            if node.op.kind == OpKind.CONCAT:
                stage_fanin[s] = max(stage_fanin.get(s, 0), len(node.inputs))
    for stage, blocks in sorted(stage_blocks.items()):
        count = len(blocks)
        depth = count.bit_length() - 1
        if 2 ** depth != count:
            problems.append("StructureViolation: stage %d has %d blocks, not a power of two"
                            % (stage, count))
            continue
        aggs = len(stage_aggs.get(stage, ()))
        if aggs != count // 2:
            problems.append("StructureViolation: stage %d has %d aggregation nodes for "
                            "%d blocks, expected %d" % (stage, aggs, count, count // 2))
        fanin = stage_fanin.get(stage, 0)
        if not depth + 1 <= fanin <= depth + 2:
            problems.append("StructureViolation: stage %d root fan-in %d outside "
                            "[%d, %d]" % (stage, fanin, depth + 1, depth + 2))
    return problems
