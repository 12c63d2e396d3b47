"""Shared fixtures: random leaf values, leaf re-keying between graph levels,
and a random joint-graph generator for the min-cut oracle tests."""

from __future__ import annotations

import numpy as np

from seqcomp.autodiff import build_joint_graph
from seqcomp.ir import (
    Axis,
    AxisTag,
    Graph,
    GraphBuilder,
    Level,
    OpKind,
    TensorSpec,
    scalar_spec,
)


def random_leaves(g: Graph, rng: np.random.Generator, scale: float = 0.1):
    inputs, params = {}, {}
    for n in g.nodes:
        if n.kind is OpKind.INPUT:
            inputs[n.id] = rng.integers(0, 64, size=n.out.extents()).astype(np.float64)
        elif n.kind is OpKind.PARAMETER:
            params[n.id] = rng.standard_normal(n.out.extents()) * scale
    return inputs, params


def rekey_leaves(src: Graph, dst: Graph, arrays: dict, kind: OpKind) -> dict:
    """Leaf nodes keep their relative order across lowering; re-key by position."""
    a = [n for n in src.nodes if n.kind is kind]
    b = [n for n in dst.nodes if n.kind is kind]
    assert len(a) == len(b)
    return {l.id: arrays[h.id] for h, l in zip(a, b)}


def mat_spec(k: int, rows: int | None = None) -> TensorSpec:
    return TensorSpec((Axis(AxisTag.FREE, rows or k), Axis(AxisTag.FREE, k)))


def random_joint_graph(rng: np.random.Generator, max_forward: int = 12):
    """Small executable low graph with a scalar loss, then its joint graph.

    Shapes are k×k matrices so MatMul always composes; ReduceSum/broadcast
    pairs inject capacity variety, and matmuls get a random provenance kind
    so the three checkpointing modes differ."""
    k = int(rng.integers(2, 5))
    gb = GraphBuilder(Level.LOW)
    n_leaves = int(rng.integers(2, 4))
    values: list[int] = []
    for i in range(n_leaves):
        kind = OpKind.INPUT if i == 0 else OpKind.PARAMETER
        values.append(gb.add(kind, (), mat_spec(k), {"name": f"leaf{i}"}))

    budget = int(rng.integers(n_leaves + 4, max_forward - 1))  # leave room for the loss
    while len(gb.nodes) < budget:
        roll = rng.random()
        if roll < 0.3:
            a, b = rng.choice(values, size=2)
            origin = "AttentionCore" if rng.random() < 0.5 else "Linear"
            nid = gb.add(
                OpKind.MATMUL,
                (int(a), int(b)),
                mat_spec(k),
                origin=0,
                origin_kind=origin,
            )
        elif roll < 0.5:
            a, b = rng.choice(values, size=2)
            nid = gb.add(
                OpKind.ELEMENTWISE, (int(a), int(b)), mat_spec(k), {"fn": "add"}
            )
        elif roll < 0.65:
            a = int(rng.choice(values))
            nid = gb.add(OpKind.ELEMENTWISE, (a,), mat_spec(k), {"fn": "silu"})
        elif roll < 0.8:
            a = int(rng.choice(values))
            nid = gb.add(OpKind.ELEMENTWISE, (a,), mat_spec(k), {"fn": "square"})
        else:
            a = int(rng.choice(values))
            red = gb.add(
                OpKind.REDUCE_SUM,
                (a,),
                TensorSpec((Axis(AxisTag.FREE, k), Axis(AxisTag.FREE, 1))),
                {"axes": [1], "keepdim": True},
            )
            b = int(rng.choice(values))
            nid = gb.add(OpKind.ELEMENTWISE, (red, b), mat_spec(k), {"fn": "mul"})
        values.append(nid)

    sq = gb.add(OpKind.ELEMENTWISE, (values[-1],), mat_spec(k), {"fn": "square"})
    loss = gb.add(
        OpKind.REDUCE_SUM, (sq,), scalar_spec(), {"axes": [0, 1], "keepdim": False}
    )
    g = gb.finish([loss])
    return build_joint_graph(g)
