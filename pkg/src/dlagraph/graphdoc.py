"""Graph document format and DOT rendering.

Documents are canonical JSON: keys sorted, two-space indent, nodes listed
by ascending id. Serializing a graph twice yields identical bytes, and
parse followed by serialize is byte-idempotent.
"""

from __future__ import annotations

import json
from typing import Any

from .ir import Graph, GraphNode, OpKind, PrimOp, Tags

FORMAT_VERSION = "1"


class ParseError(Exception):
    """The document is not a well-formed graph description."""


_REQUIRED_ATTRS: dict[OpKind, tuple[tuple[str, type], ...]] = {
    OpKind.CONV: (("kernel", int), ("stride", int), ("padding", int),
                  ("in_channels", int), ("out_channels", int), ("groups", int),
                  ("has_bias", bool)),
    OpKind.BATCH_NORM: (("channels", int), ("epsilon", float)),
    OpKind.MAX_POOL: (("kernel", int), ("stride", int)),
    OpKind.LINEAR: (("in_features", int), ("out_features", int), ("has_bias", bool)),
    OpKind.CONCAT: (("axis", int),),
    OpKind.UPSAMPLE: (("factor", int), ("mode", str), ("channels", int)),
    OpKind.SOFTMAX: (("axis", int),),
    OpKind.INPUT: (("channels", int), ("height", int), ("width", int)),
}

_TAG_KEYS = ("stage", "block_id", "agg_node_id")


def _tags_to_json(tags: Tags) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for key in _TAG_KEYS:
        value = getattr(tags, key)
        if value is not None:
            out[key] = value
    return out


def graph_to_document(graph: Graph, metadata: dict[str, Any] | None = None) -> dict:
    nodes = []
    for node in sorted(graph.nodes, key=lambda n: n.id):
        nodes.append({
            "id": node.id,
            "kind": node.op.kind.value,
            "attrs": dict(node.op.attrs),
            "inputs": list(node.inputs),
            "tags": _tags_to_json(node.tags),
        })
    return {
        "format_version": FORMAT_VERSION,
        "metadata": dict(metadata or {}),
        "inputs": list(graph.inputs),
        "outputs": list(graph.outputs),
        "nodes": nodes,
    }


def serialize(graph: Graph, metadata: dict[str, Any] | None = None) -> str:
    return json.dumps(graph_to_document(graph, metadata), sort_keys=True, indent=2) + "\n"


def _expect(condition: bool, message: str) -> None:
    if not condition:
        raise ParseError(message)


def _parse_node(record: Any, position: int) -> GraphNode:
    _expect(isinstance(record, dict), "node record %d is not an object" % position)
    for key in ("id", "kind", "attrs", "inputs", "tags"):
        _expect(key in record, "node record %d lacks %r" % (position, key))
    _expect(record["id"] == position,
            "node ids must be dense and ascending; position %d holds id %r"
            % (position, record["id"]))
    try:
        kind = OpKind(record["kind"])
    except ValueError:
        raise ParseError("unknown op kind %r" % record["kind"]) from None
    attrs = record["attrs"]
    _expect(isinstance(attrs, dict), "attrs of node %d is not an object" % position)
    for key, want in _REQUIRED_ATTRS.get(kind, ()):
        _expect(key in attrs, "node %d (%s) lacks attr %r" % (position, kind.value, key))
        value = attrs[key]
        if want is float:
            ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        elif want is int:
            ok = isinstance(value, int) and not isinstance(value, bool)
        else:
            ok = isinstance(value, want)
        _expect(ok, "attr %r of node %d is not a %s" % (key, position, want.__name__))
    inputs = record["inputs"]
    _expect(isinstance(inputs, list) and all(isinstance(i, int) for i in inputs),
            "inputs of node %d must be a list of ids" % position)
    for i in inputs:
        _expect(0 <= i < position,
                "node %d consumes id %d, which does not precede it" % (position, i))
    tags_json = record["tags"]
    _expect(isinstance(tags_json, dict) and set(tags_json) <= set(_TAG_KEYS),
            "tags of node %d carry unknown keys" % position)
    tags = Tags(stage=tags_json.get("stage"), block_id=tags_json.get("block_id"),
                agg_node_id=tags_json.get("agg_node_id"))
    return GraphNode(position, PrimOp(kind, dict(attrs)), tuple(inputs), tags)


def parse(text: str) -> tuple[Graph, dict[str, Any]]:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError("not valid JSON: %s" % exc) from None
    _expect(isinstance(doc, dict), "document root is not an object")
    for key in ("format_version", "metadata", "inputs", "outputs", "nodes"):
        _expect(key in doc, "document lacks %r" % key)
    _expect(doc["format_version"] == FORMAT_VERSION,
            "unsupported format_version %r" % doc["format_version"])
    raw_nodes = doc["nodes"]
    _expect(isinstance(raw_nodes, list) and raw_nodes, "document has no nodes")
    nodes = tuple(_parse_node(rec, i) for i, rec in enumerate(raw_nodes))
    n = len(nodes)
    for key in ("inputs", "outputs"):
        ids = doc[key]
        _expect(isinstance(ids, list) and all(isinstance(i, int) and 0 <= i < n for i in ids),
                "%s list is not a list of node ids" % key)
    declared_inputs = tuple(doc["inputs"])
    actual_inputs = tuple(node.id for node in nodes if node.op.kind == OpKind.INPUT)
    _expect(declared_inputs == actual_inputs,
            "declared inputs %s do not match Input nodes %s"
            % (declared_inputs, actual_inputs))
    graph = Graph(nodes, declared_inputs, tuple(doc["outputs"]))
    return graph, dict(doc["metadata"])


def _op_label(node: GraphNode) -> str:
    a = node.op.attrs
    kind = node.op.kind
    if kind == OpKind.CONV:
        extra = " g%d" % a["groups"] if a["groups"] > 1 else ""
        return "Conv %dx%d s%d%s %d>%d" % (a["kernel"], a["kernel"], a["stride"],
                                           extra, a["in_channels"], a["out_channels"])
    if kind == OpKind.MAX_POOL:
        return "MaxPool %dx%d s%d" % (a["kernel"], a["kernel"], a["stride"])
    if kind == OpKind.LINEAR:
        return "Linear %d>%d" % (a["in_features"], a["out_features"])
    if kind == OpKind.UPSAMPLE:
        return "Upsample x%d" % a["factor"]
    if kind == OpKind.INPUT:
        return "Input %dx%dx%d" % (a["channels"], a["height"], a["width"])
    if kind == OpKind.BATCH_NORM:
        return "BN %d" % a["channels"]
    return kind.value


def to_dot(graph: Graph, collapse: str = "none") -> str:
    """Render as a DOT digraph. ``collapse="blocks"`` folds every tagged
    block and aggregation node into one vertex each; aggregation vertices
    use the diamond shape in either mode."""
    if collapse not in ("none", "blocks"):
        raise ValueError("collapse must be 'none' or 'blocks'")
    lines = ["digraph dla {", "  rankdir=TB;"]

    if collapse == "none":
        vertex = {node.id: "n%d" % node.id for node in graph.nodes}
        for node in graph.nodes:
            if node.tags.agg_node_id is not None:
                shape = "diamond"
            elif node.tags.block_id is not None:
                shape = "box"
            else:
                shape = "ellipse"
            lines.append('  %s [label="%s", shape=%s];'
                         % (vertex[node.id], _op_label(node), shape))
    else:
        vertex = {}
        emitted = set()
        for node in graph.nodes:
            if node.tags.agg_node_id is not None:
                name = "a%d" % node.tags.agg_node_id
                label, shape = "agg %d" % node.tags.agg_node_id, "diamond"
            elif node.tags.block_id is not None:
                name = "b%d" % node.tags.block_id
                label, shape = "block %d" % node.tags.block_id, "box"
            else:
                name = "n%d" % node.id
                label, shape = _op_label(node), "ellipse"
            vertex[node.id] = name
            if name not in emitted:
                emitted.add(name)
                lines.append('  %s [label="%s", shape=%s];' % (name, label, shape))

    seen_edges = set()
    for node in graph.nodes:
        for src in node.inputs:
            edge = (vertex[src], vertex[node.id])
            if edge[0] == edge[1] or edge in seen_edges:
                continue
            seen_edges.add(edge)
            lines.append("  %s -> %s;" % edge)
    lines.append("}")
    return "\n".join(lines) + "\n"
