"""Reverse-mode differentiation over the low IR.

Backward nodes are appended to the same node arena as the forward graph
(one shared id space), seeded by a GradMarker holding the all-ones gradient
of the scalar loss. Fused backward kernels (softmax_dx, silu_dx, rmsnorm_dx,
rmsnorm_dw) keep the joint graph small; everything else is expressed with the
existing MatMul/Permute/ReduceSum/Slice vocabulary.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

from .errors import ValidationError
from .ir import (
    Axis,
    AxisTag,
    Graph,
    Level,
    Node,
    OpKind,
    TensorSpec,
    all_to_all_out_spec,
    dumps,
    graph_from_json,
    graph_to_json,
    inverse_direction,
    scalar_spec,
    validate,
)

_NO_GRAD_KINDS = frozenset(
    {OpKind.INPUT, OpKind.CAUSAL_MASK_INDEX, OpKind.POSITION_INDEX, OpKind.GRAD_MARKER}
)

# each recipe maps (builder, node, grad-of-output id) -> [(input id, grad id)]
Contribs = list[tuple[int, int]]


@dataclass
class JointGraph:
    graph: Graph
    forward_ids: frozenset[int]
    backward_ids: frozenset[int]
    grad_inputs: tuple[int, ...]
    saved_candidates: frozenset[int]
    grad_map: dict[int, int]  # forward node id -> accumulated gradient node id

    def to_json(self) -> dict[str, Any]:
        d = graph_to_json(self.graph)
        d["forward_ids"] = sorted(self.forward_ids)
        d["backward_ids"] = sorted(self.backward_ids)
        d["grad_inputs"] = list(self.grad_inputs)
        d["saved_candidates"] = sorted(self.saved_candidates)
        d["grad_map"] = {str(k): v for k, v in sorted(self.grad_map.items())}
        return d

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> "JointGraph":
        return cls(
            graph=graph_from_json(d),
            forward_ids=frozenset(d["forward_ids"]),
            backward_ids=frozenset(d["backward_ids"]),
            grad_inputs=tuple(d["grad_inputs"]),
            saved_candidates=frozenset(d.get("saved_candidates", ())),
            grad_map={int(k): v for k, v in d.get("grad_map", {}).items()},
        )

    def dumps(self) -> str:
        return dumps(self.to_json())


class _JointBuilder:
    def __init__(self, g: Graph):
        self.nodes: list[Node] = [
            Node(n.id, n.kind, n.inputs, n.out, dict(n.attrs), n.origin, n.origin_kind)
            for n in g.nodes
        ]

    def add(
        self,
        kind: OpKind,
        inputs: tuple[int, ...],
        out: TensorSpec,
        attrs: dict[str, Any] | None = None,
    ) -> int:
        nid = len(self.nodes)
        self.nodes.append(Node(nid, kind, inputs, out, dict(attrs or {})))
        return nid

    def out_of(self, nid: int) -> TensorSpec:
        return self.nodes[nid].out


def _reduce_to(jb: _JointBuilder, grad: int, target: TensorSpec) -> int:
    """Sum a broadcasted gradient back down to the shape it was broadcast from."""
    gspec = jb.out_of(grad)
    if gspec.extents() == target.extents():
        return grad
    lead = gspec.rank - target.rank
    axes = list(range(lead))
    for i in range(target.rank):
        if target.axes[i].extent == 1 and gspec.axes[lead + i].extent != 1:
            axes.append(lead + i)
    kept = tuple(Axis(ax.tag, 1) if i in axes else ax for i, ax in enumerate(gspec.axes))
    red = jb.add(
        OpKind.REDUCE_SUM,
        (grad,),
        TensorSpec(kept, gspec.elem_bytes),
        {"axes": axes, "keepdim": True},
    )
    if jb.out_of(red).extents() != target.extents():
        red = jb.add(OpKind.RESHAPE, (red,), target)
    return red


def _last_two_swap(jb: _JointBuilder, nid: int) -> int:
    s = jb.out_of(nid)
    perm = list(range(s.rank))
    perm[-1], perm[-2] = perm[-2], perm[-1]
    return jb.add(
        OpKind.PERMUTE,
        (nid,),
        TensorSpec(s.axes[:-2] + (s.axes[-1], s.axes[-2]), s.elem_bytes),
        {"perm": perm},
    )


def _matmul_grads(jb: _JointBuilder, n: Node, dy: int) -> Contribs:
    a, b = n.inputs
    aspec, bspec = jb.out_of(a), jb.out_of(b)
    bt = _last_two_swap(jb, b)
    da = jb.add(OpKind.MATMUL, (dy, bt), aspec)
    # db = Aᵀ·dY, with A and dY flattened to rank 2 when A is batched
    if aspec.rank > 2:
        flat = aspec.numel() // aspec.axes[-1].extent
        a2 = jb.add(
            OpKind.RESHAPE,
            (a,),
            TensorSpec((Axis(AxisTag.FREE, flat), aspec.axes[-1]), aspec.elem_bytes),
        )
        dyspec = jb.out_of(dy)
        dy2 = jb.add(
            OpKind.RESHAPE,
            (dy,),
            TensorSpec((Axis(AxisTag.FREE, flat), dyspec.axes[-1]), dyspec.elem_bytes),
        )
    else:
        a2, dy2 = a, dy
    at = _last_two_swap(jb, a2)
    db = jb.add(OpKind.MATMUL, (at, dy2), bspec)
    return [(a, da), (b, db)]


def _bmm_grads(jb: _JointBuilder, n: Node, dy: int) -> Contribs:
    a, b = n.inputs
    bt = _last_two_swap(jb, b)
    da = jb.add(OpKind.BATCH_MATMUL, (dy, bt), jb.out_of(a))
    at = _last_two_swap(jb, a)
    db = jb.add(OpKind.BATCH_MATMUL, (at, dy), jb.out_of(b))
    return [(a, da), (b, db)]


def _elementwise_grads(jb: _JointBuilder, n: Node, dy: int) -> Contribs:
    fn = n.attrs["fn"]
    if fn == "add":
        a, b = n.inputs
        return [
            (a, _reduce_to(jb, dy, jb.out_of(a))),
            (b, _reduce_to(jb, dy, jb.out_of(b))),
        ]
    if fn == "mul":
        a, b = n.inputs
        da = jb.add(OpKind.ELEMENTWISE, (dy, b), n.out, {"fn": "mul"})
        db = jb.add(OpKind.ELEMENTWISE, (dy, a), n.out, {"fn": "mul"})
        return [
            (a, _reduce_to(jb, da, jb.out_of(a))),
            (b, _reduce_to(jb, db, jb.out_of(b))),
        ]
    if fn == "silu":
        (x,) = n.inputs
        return [(x, jb.add(OpKind.ELEMENTWISE, (x, dy), jb.out_of(x), {"fn": "silu_dx"}))]
    if fn == "square":
        (x,) = n.inputs
        xd = jb.add(OpKind.ELEMENTWISE, (dy, x), jb.out_of(x), {"fn": "mul"})
        return [
            (x, jb.add(OpKind.ELEMENTWISE, (xd,), jb.out_of(x), {"fn": "scale", "factor": 2.0}))
        ]
    if fn == "scale":
        (x,) = n.inputs
        g = jb.add(
            OpKind.ELEMENTWISE, (dy,), jb.out_of(x), {"fn": "scale", "factor": n.attrs["factor"]}
        )
        return [(x, g)]
    if fn == "rmsnorm":
        x, w = n.inputs
        eps = n.attrs.get("eps", 1e-6)
        dx = jb.add(OpKind.ELEMENTWISE, (x, w, dy), jb.out_of(x), {"fn": "rmsnorm_dx", "eps": eps})
        dw = jb.add(OpKind.ELEMENTWISE, (x, w, dy), jb.out_of(w), {"fn": "rmsnorm_dw", "eps": eps})
        return [(x, dx), (w, dw)]
    raise ValidationError(f"no gradient recipe for elementwise fn {fn!r}")


def _node_grads(jb: _JointBuilder, n: Node, dy: int) -> Contribs:
    k = n.kind
    if k is OpKind.MATMUL:
        return _matmul_grads(jb, n, dy)
    if k is OpKind.BATCH_MATMUL:
        return _bmm_grads(jb, n, dy)
    if k is OpKind.ELEMENTWISE:
        return _elementwise_grads(jb, n, dy)
    if k is OpKind.SOFTMAX:
        return [(n.inputs[0], jb.add(OpKind.ELEMENTWISE, (n.id, dy), n.out, {"fn": "softmax_dx"}))]
    if k is OpKind.RESHAPE:
        x = n.inputs[0]
        return [(x, jb.add(OpKind.RESHAPE, (dy,), jb.out_of(x)))]
    if k is OpKind.PERMUTE:
        x = n.inputs[0]
        perm = n.attrs["perm"]
        inv = [0] * len(perm)
        for i, p in enumerate(perm):
            inv[p] = i
        return [(x, jb.add(OpKind.PERMUTE, (dy,), jb.out_of(x), {"perm": inv}))]
    if k is OpKind.REDUCE_SUM:
        x = n.inputs[0]
        xspec = jb.out_of(x)
        axes = n.attrs["axes"]
        cur = dy
        if not n.attrs.get("keepdim", False):
            kept = tuple(
                Axis(ax.tag, 1) if i in axes else ax for i, ax in enumerate(xspec.axes)
            )
            cur = jb.add(OpKind.RESHAPE, (dy,), TensorSpec(kept, xspec.elem_bytes))
        return [(x, jb.add(OpKind.ELEMENTWISE, (cur,), xspec, {"fn": "expand"}))]
    if k is OpKind.SLICE:
        mode = n.attrs["mode"]
        if mode == "range":
            x = n.inputs[0]
            g = jb.add(
                OpKind.SLICE,
                (dy,),
                jb.out_of(x),
                {"mode": "pad", "axis": n.attrs["axis"], "start": n.attrs["start"]},
            )
            return [(x, g)]
        if mode == "gather_rows":
            ids, table = n.inputs
            g = jb.add(OpKind.SLICE, (ids, dy), jb.out_of(table), {"mode": "scatter_add_rows"})
            return [(table, g)]
        raise ValidationError(f"no gradient recipe for slice mode {mode!r}")
    if k is OpKind.ALL_TO_ALL:
        x = n.inputs[0]
        ws = int(n.attrs["world_size"])
        inv_dir = inverse_direction(n.attrs["direction"])
        g = jb.add(
            OpKind.ALL_TO_ALL,
            (dy,),
            all_to_all_out_spec(jb.out_of(dy), inv_dir, ws),
            {"direction": inv_dir, "world_size": ws},
        )
        return [(x, g)]
    raise ValidationError(f"node {n.id}: kind {k.value} has no registered gradient")


def build_joint_graph(g: Graph) -> JointGraph:
    if g.level is not Level.LOW:
        raise ValidationError("build_joint_graph expects a low-level graph")
    loss = g.outputs[-1]
    if g.node(loss).out.rank != 0:
        raise ValidationError("last graph output must be a scalar loss")

    jb = _JointBuilder(g)
    n_forward = len(g.nodes)
    seed = jb.add(OpKind.GRAD_MARKER, (), scalar_spec(g.node(loss).out.elem_bytes), {"value": 1.0})
    grads: dict[int, int] = {loss: seed}

    # only nodes on a path to the loss carry gradients
    needed: set[int] = set()
    stack = [loss]
    while stack:
        nid = stack.pop()
        if nid in needed:
            continue
        needed.add(nid)
        stack.extend(g.node(nid).inputs)

    for n in reversed(g.nodes):
        if n.id not in grads or n.id not in needed:
            continue
        if n.kind in _NO_GRAD_KINDS or n.kind is OpKind.PARAMETER:
            continue
        for src, gnode in _node_grads(jb, n, grads[n.id]):
            if g.node(src).kind in _NO_GRAD_KINDS:
                continue
            if src in grads:
                grads[src] = jb.add(
                    OpKind.ELEMENTWISE, (grads[src], gnode), jb.out_of(src), {"fn": "add"}
                )
            else:
                grads[src] = gnode

    param_ids = [n.id for n in g.nodes if n.kind is OpKind.PARAMETER]
    outputs = tuple(g.outputs) + tuple(grads[p] for p in param_ids if p in grads)
    joint = Graph(Level.LOW, jb.nodes, g.inputs, outputs)
    diags = validate(joint)
    if diags:
        raise ValidationError("; ".join(diags))

    backward = frozenset(range(n_forward, len(jb.nodes)))
    forward = frozenset(range(n_forward))
    saved_candidates = frozenset(
        i
        for b in backward
        for i in joint.node(b).inputs
        if i < n_forward
    )
    return JointGraph(
        graph=joint,
        forward_ids=forward,
        backward_ids=backward,
        grad_inputs=(seed,),
        saved_candidates=saved_candidates,
        grad_map={f: gid for f, gid in grads.items()},
    )


def grad_reachable(j: JointGraph) -> set[int]:
    """All nodes reachable along forward edge direction from the gradient seeds."""
    consumers = j.graph.consumers()
    reached: set[int] = set()
    stack = list(j.grad_inputs)
    while stack:
        nid = stack.pop()
        if nid in reached:
            continue
        reached.add(nid)
        stack.extend(consumers[nid])
    return reached
