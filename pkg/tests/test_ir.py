import pytest

from dlagraph import ir
from dlagraph.ir import (ArityMismatch, CycleDetected, Graph, GraphBuilder, GraphNode,
                         PrimOp, OpKind, ShapeConflict, Tags, TensorShape, UnknownInput,
                         infer_node_shape, topo_order, validate)


def test_tensor_shape_rejects_nonpositive_extents():
    with pytest.raises(ValueError):
        TensorShape(1, 0, 8, 8)
    with pytest.raises(ValueError):
        TensorShape(1, 3, 8, -1)


def test_add_node_ids_are_dense_and_sequential():
    b = GraphBuilder()
    x = b.add_input(TensorShape(1, 4, 8, 8))
    assert x == 0
    y = b.add(ir.relu(), [x])
    assert y == 1
    assert len(b) == 2


def test_add_node_arity_mismatch():
    b = GraphBuilder()
    x = b.add_input(TensorShape(1, 4, 8, 8))
    with pytest.raises(ArityMismatch):
        b.add(ir.add(), [x])
    with pytest.raises(ArityMismatch):
        b.add(ir.concat(), [x])
    with pytest.raises(ArityMismatch):
        b.add(ir.relu(), [x, x])


def test_add_node_unknown_input():
    b = GraphBuilder()
    b.add_input(TensorShape(1, 4, 8, 8))
    with pytest.raises(UnknownInput):
        b.add(ir.relu(), [5])


def test_topo_order_linear_chain():
    b = GraphBuilder()
    x = b.add_input(TensorShape(1, 4, 8, 8))
    y = b.add(ir.relu(), [x])
    b.mark_output(y)
    assert topo_order(b.build()) == [0, 1, 2]


def test_topo_order_diamond_places_concat_last():
    b = GraphBuilder()
    x = b.add_input(TensorShape(1, 4, 8, 8))
    left = b.add(ir.relu(), [x])
    right = b.add(ir.relu(), [x])
    cat = b.add(ir.concat(), [left, right])
    order = topo_order(b.build())
    assert sorted(order) == [0, 1, 2, 3]
    assert order[-1] == cat


def test_topo_order_detects_injected_back_edge():
    nodes = (
        GraphNode(0, ir.input_op(4, 8, 8), ()),
        GraphNode(1, PrimOp(OpKind.ADD), (0, 2)),
        GraphNode(2, PrimOp(OpKind.RELU), (1,)),
    )
    graph = Graph(nodes, (0,), (2,))
    with pytest.raises(CycleDetected):
        topo_order(graph)
    kinds = {v.kind for v in validate(graph)}
    assert "CycleDetected" in kinds


def test_validate_builder_graph_is_clean():
    b = GraphBuilder()
    x = b.add_input(TensorShape(1, 4, 8, 8))
    y = b.add(ir.relu(), [x])
    b.mark_output(y)
    assert validate(b.build()) == []


def test_validate_reports_concat_arity_violation():
    nodes = (
        GraphNode(0, ir.input_op(4, 8, 8), ()),
        GraphNode(1, ir.concat(), (0,)),
    )
    report = validate(Graph(nodes, (0,), (1,)))
    assert any(v.kind == "ArityViolation" for v in report)


def test_validate_reports_orphan_node():
    nodes = (
        GraphNode(0, ir.input_op(4, 8, 8), ()),
        GraphNode(1, PrimOp(OpKind.RELU), (0,)),
        GraphNode(2, PrimOp(OpKind.ADD), (3, 3)),
        GraphNode(3, PrimOp(OpKind.ADD), (2, 2)),
    )
    report = validate(Graph(nodes, (0,), (1,)))
    assert any(v.kind == "OrphanNode" for v in report)


def test_replay_in_topo_order_reproduces_graph():
    b = GraphBuilder()
    x = b.add_input(TensorShape(1, 4, 8, 8))
    left = b.add(ir.conv(3, 1, 1, 4, 4), [x])
    right = b.add(ir.relu(), [x])
    cat = b.add(ir.concat(), [left, right])
    b.mark_output(cat)
    g = b.build()

    rb = GraphBuilder()
    for nid in topo_order(g):
        node = g.node(nid)
        replayed = rb.add(node.op, node.inputs, tags=node.tags)
        assert replayed == nid
        if node.op.kind == OpKind.OUTPUT:
            rb._outputs.append(replayed)
    assert rb.build() == g


def test_shape_rule_conv_padding_preserves_extent():
    out = infer_node_shape(ir.conv(3, 1, 1, 8, 8), [TensorShape(1, 8, 16, 16)])
    assert out == TensorShape(1, 8, 16, 16)


def test_shape_rule_add_operand_mismatch():
    with pytest.raises(ShapeConflict):
        infer_node_shape(ir.add(), [TensorShape(1, 64, 8, 8), TensorShape(1, 32, 8, 8)])


def test_shape_rule_maxpool_floor_and_ceil():
    floor_pool = ir.max_pool(2, 2)
    ceil_pool = ir.max_pool(2, 2, ceil_mode=True)
    assert infer_node_shape(floor_pool, [TensorShape(1, 8, 7, 7)]).spatial == (3, 3)
    assert infer_node_shape(ceil_pool, [TensorShape(1, 8, 7, 7)]).spatial == (4, 4)
    assert infer_node_shape(ceil_pool, [TensorShape(1, 8, 1, 1)]).spatial == (1, 1)
    with pytest.raises(ShapeConflict):
        infer_node_shape(floor_pool, [TensorShape(1, 8, 1, 1)])


def test_conv_rejects_indivisible_groups():
    with pytest.raises(ValueError):
        ir.conv(3, 1, 1, 6, 8, groups=4)


def test_tags_follow_builder_context():
    b = GraphBuilder()
    x = b.add_input(TensorShape(1, 4, 8, 8))
    with b.stage(3):
        with b.block() as bid:
            y = b.add(ir.relu(), [x])
    node = b.build().node(y)
    assert node.tags == Tags(stage=3, block_id=bid)
