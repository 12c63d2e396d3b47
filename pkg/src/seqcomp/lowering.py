"""High-to-low lowering.

Each coarse operator expands into a fixed recipe of fine-grained operators
(e.g. Linear becomes Permute of the weight plus MatMul; AttentionCore becomes
two BatchMatMuls around a scaled, masked Softmax). Every emitted node records
the id and kind of the high node it came from, which later passes use to tell
attention-region matmuls apart from projection/MLP matmuls.
"""

from __future__ import annotations

import math

from .errors import ValidationError
from .ir import (
    Axis,
    AxisTag,
    Graph,
    GraphBuilder,
    Level,
    Node,
    OpKind,
    TensorSpec,
    scalar_spec,
)

_ONE_TO_ONE = frozenset(
    {
        OpKind.INPUT,
        OpKind.PARAMETER,
        OpKind.CAUSAL_MASK_INDEX,
        OpKind.POSITION_INDEX,
        OpKind.ELEMENTWISE,
        OpKind.RESHAPE,
        OpKind.PERMUTE,
        OpKind.SOFTMAX,
        OpKind.ALL_TO_ALL,
    }
)


def lower(g: Graph) -> Graph:
    if g.level is not Level.HIGH:
        raise ValidationError("lower expects a high-level graph")
    diags = g.validate()
    if diags:
        raise ValidationError("; ".join(diags))

    lb = GraphBuilder(Level.LOW)
    # final low id of each high node's expansion
    tip: dict[int, int] = {}

    def emit(kind: OpKind, inputs: tuple[int, ...], out: TensorSpec, attrs=None, *, hi: Node) -> int:
        return lb.add(kind, inputs, out, attrs, origin=hi.id, origin_kind=hi.kind.value)

    for n in g.nodes:
        ins = tuple(tip[i] for i in n.inputs)

        if n.kind in _ONE_TO_ONE:
            tip[n.id] = emit(n.kind, ins, n.out, dict(n.attrs), hi=n)

        elif n.kind is OpKind.EMBEDDING:
            tip[n.id] = emit(OpKind.SLICE, ins, n.out, {"mode": "gather_rows"}, hi=n)

        elif n.kind is OpKind.LINEAR:
            x, w = ins
            wspec = lb.nodes[w].out
            wt = emit(
                OpKind.PERMUTE,
                (w,),
                TensorSpec((wspec.axes[1], wspec.axes[0]), wspec.elem_bytes),
                {"perm": [1, 0]},
                hi=n,
            )
            tip[n.id] = emit(OpKind.MATMUL, (x, wt), n.out, hi=n)

        elif n.kind is OpKind.RMS_NORM:
            tip[n.id] = emit(
                OpKind.ELEMENTWISE, ins, n.out, {"fn": "rmsnorm", "eps": 1e-6}, hi=n
            )

        elif n.kind is OpKind.ATTENTION_CORE:
            x, mask = ins
            xs = lb.nodes[x].out  # [b, s, h, d]
            b_ax, s_ax, h_ax, d_ax = xs.axes
            sdp = TensorSpec((b_ax, h_ax, s_ax, d_ax), xs.elem_bytes)
            q = emit(OpKind.PERMUTE, (x,), sdp, {"perm": [0, 2, 1, 3]}, hi=n)
            kt = emit(
                OpKind.PERMUTE,
                (x,),
                TensorSpec((b_ax, h_ax, d_ax, s_ax), xs.elem_bytes),
                {"perm": [0, 2, 3, 1]},
                hi=n,
            )
            score_spec = TensorSpec(
                (b_ax, h_ax, s_ax, Axis(AxisTag.FREE, s_ax.extent)), xs.elem_bytes
            )
            scores = emit(OpKind.BATCH_MATMUL, (q, kt), score_spec, hi=n)
            scaled = emit(
                OpKind.ELEMENTWISE,
                (scores,),
                score_spec,
                {"fn": "scale", "factor": 1.0 / math.sqrt(d_ax.extent)},
                hi=n,
            )
            # identity slice keeps the recipe shape even when the mask is
            # larger than the local score block (never the case here, but the
            # node also marks where the mask joins the expansion)
            msk = emit(
                OpKind.SLICE,
                (mask,),
                lb.nodes[mask].out,
                {"mode": "range", "axis": 0, "start": 0,
                 "length": lb.nodes[mask].out.axes[0].extent},
                hi=n,
            )
            masked = emit(
                OpKind.ELEMENTWISE, (scaled, msk), score_spec, {"fn": "add"}, hi=n
            )
            probs = emit(OpKind.SOFTMAX, (masked,), score_spec, {"axis": -1}, hi=n)
            ctx = emit(OpKind.BATCH_MATMUL, (probs, q), sdp, hi=n)
            tip[n.id] = emit(OpKind.PERMUTE, (ctx,), n.out, {"perm": [0, 2, 1, 3]}, hi=n)

        elif n.kind is OpKind.LOSS:
            sq = emit(
                OpKind.ELEMENTWISE, ins, lb.nodes[ins[0]].out, {"fn": "square"}, hi=n
            )
            rank = lb.nodes[sq].out.rank
            tip[n.id] = emit(
                OpKind.REDUCE_SUM,
                (sq,),
                scalar_spec(n.out.elem_bytes),
                {"axes": list(range(rank)), "keepdim": False},
                hi=n,
            )

        else:
            raise ValidationError(f"node {n.id}: kind {n.kind.value} is not lowerable")

    low = lb.finish([tip[o] for o in g.outputs])
    return low
