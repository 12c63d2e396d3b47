"""Sequence-parallel rewrite of high-level graphs.

The pass infers training dimensions from the graph, then rebuilds it so each
of P ranks owns a contiguous sequence shard outside attention and a head block
inside it. Two all-to-all exchanges per attention node toggle between the two
layouts. Index-producing ops are re-parameterized per rank (position indices
gain a rank stride; the causal mask stays full-sequence because attention sees
every token for its heads).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Any

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
    dumps,
    graph_from_json,
    graph_to_json,
)
from .transformer import ModelDims


class RewriteReason(str, Enum):
    RESIZED_BUFFER = "ResizedBuffer"
    RECOMPUTED_INDEX = "RecomputedIndex"
    INSERTED_COLLECTIVE = "InsertedCollective"


DEFAULT_RESIZE_SET = frozenset(
    {
        OpKind.EMBEDDING,
        OpKind.LINEAR,
        OpKind.RMS_NORM,
        OpKind.ELEMENTWISE,
        OpKind.RESHAPE,
        OpKind.PERMUTE,
        OpKind.SOFTMAX,
        OpKind.ATTENTION_CORE,
        OpKind.INPUT,
    }
)
DEFAULT_INDEX_SET = frozenset({OpKind.CAUSAL_MASK_INDEX, OpKind.POSITION_INDEX})
DEFAULT_ATTN_SET = (OpKind.ATTENTION_CORE,)


@dataclass(frozen=True)
class SPConfig:
    world_size: int
    resize_set: frozenset[OpKind] = DEFAULT_RESIZE_SET
    index_set: frozenset[OpKind] = DEFAULT_INDEX_SET
    attn_set: tuple[OpKind, ...] = DEFAULT_ATTN_SET

    def __post_init__(self) -> None:
        if self.world_size < 1:
            raise ValidationError("world_size must be positive")
        if not self.attn_set:
            raise ValidationError("attn_set must be non-empty")


@dataclass
class SPGraph:
    graph: Graph
    world_size: int
    provenance: dict[int, RewriteReason] = field(default_factory=dict)
    node_map: dict[int, int] = field(default_factory=dict)  # original id -> new id

    def to_json(self) -> dict[str, Any]:
        d = graph_to_json(self.graph)
        d["world_size"] = self.world_size
        d["provenance"] = {str(k): v.value for k, v in sorted(self.provenance.items())}
        d["node_map"] = {str(k): v for k, v in sorted(self.node_map.items())}
        return d

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> "SPGraph":
        return cls(
            graph=graph_from_json(d),
            world_size=int(d["world_size"]),
            provenance={int(k): RewriteReason(v) for k, v in d.get("provenance", {}).items()},
            node_map={int(k): v for k, v in d.get("node_map", {}).items()},
        )

    def remap_leaves(self, arrays: dict[int, Any]) -> dict[int, Any]:
        """Re-key input/parameter arrays from original ids to rewritten ids."""
        return {self.node_map.get(k, k): v for k, v in arrays.items()}

    def dumps(self) -> str:
        return dumps(self.to_json())


def infer_dims(g: Graph) -> ModelDims:
    """Read (b, s) from the rank-2 data input, (h, d) from the first attention
    output's trailing axes, d_ffn from the widest Linear, layers from the
    attention count."""
    data_inputs = [n for n in g.nodes if n.kind is OpKind.INPUT]
    if len(data_inputs) != 1 or data_inputs[0].out.rank != 2:
        raise ValidationError("expected exactly one rank-2 data input")
    b, s = data_inputs[0].out.extents()

    attn = [n for n in g.nodes if n.kind is OpKind.ATTENTION_CORE]
    if not attn:
        raise ValidationError("graph has no attention node")
    h, d = attn[0].out.extents()[-2:]

    d_ffn = h * d
    for n in g.nodes:
        if n.kind is OpKind.LINEAR:
            ffn_idx = n.out.find(AxisTag.FFN)
            if ffn_idx is not None:
                d_ffn = n.out.axes[ffn_idx].extent
                break
    return ModelDims(b=b, s=s, h=h, d=d, d_ffn=d_ffn, layers=len(attn))


def _resize_axis(spec_in: TensorSpec, tag: AxisTag, extent: int) -> TensorSpec:
    idx = spec_in.find(tag)
    if idx is None:
        return spec_in
    return spec_in.with_extent(idx, extent)


def transform_sp(g: Graph, cfg: SPConfig) -> SPGraph:
    if any(n.kind is OpKind.ALL_TO_ALL for n in g.nodes):
        raise ValidationError("graph already contains AllToAll nodes (pass already applied)")
    dims = infer_dims(g)
    P = cfg.world_size
    if P == 1:
        return SPGraph(
            graph=g,
            world_size=1,
            provenance={},
            node_map={n.id: n.id for n in g.nodes},
        )
    if dims.s % P:
        raise ValidationError(f"sequence length {dims.s} not divisible by world size {P}")
    if dims.h % P:
        raise ValidationError(f"head count {dims.h} not divisible by world size {P}")

    s_loc, h_loc = dims.s // P, dims.h // P
    nb = GraphBuilder(Level.HIGH)
    remap: dict[int, int] = {}
    provenance: dict[int, RewriteReason] = {}

    for n in g.nodes:
        ins = tuple(remap[i] for i in n.inputs)
        attrs = dict(n.attrs)

        if n.kind in cfg.index_set:
            if n.kind is OpKind.POSITION_INDEX:
                # each rank regenerates its own token positions
                attrs.update(length=s_loc, rank_stride=s_loc)
                out = _resize_axis(n.out, AxisTag.SEQUENCE, s_loc)
            else:
                # causal mask stays full: attention sees the whole sequence
                out = n.out
            nid = nb.add(n.kind, ins, out, attrs)
            remap[n.id] = nid
            provenance[nid] = RewriteReason.RECOMPUTED_INDEX
            continue

        if n.kind in cfg.attn_set:
            x, mask = ins
            xs = nb.nodes[x].out  # sequence-sharded [b, s/P, h, d]
            pre = nb.add(
                OpKind.ALL_TO_ALL,
                (x,),
                _resize_axis(_resize_axis(xs, AxisTag.SEQUENCE, dims.s), AxisTag.HEADS, h_loc),
                {"direction": "seq_to_head", "world_size": P},
            )
            provenance[pre] = RewriteReason.INSERTED_COLLECTIVE

            attn_out = _resize_axis(n.out, AxisTag.HEADS, h_loc)
            core = nb.add(n.kind, (pre, mask), attn_out, attrs)
            provenance[core] = RewriteReason.RESIZED_BUFFER

            post = nb.add(
                OpKind.ALL_TO_ALL,
                (core,),
                _resize_axis(_resize_axis(attn_out, AxisTag.SEQUENCE, s_loc), AxisTag.HEADS, dims.h),
                {"direction": "head_to_seq", "world_size": P},
            )
            provenance[post] = RewriteReason.INSERTED_COLLECTIVE
            remap[n.id] = post
            continue

        if n.kind in cfg.resize_set:
            out = _resize_axis(n.out, AxisTag.SEQUENCE, s_loc)
            if n.kind is OpKind.RESHAPE and out.extents() == n.out.extents():
                # reshapes that fold the sequence into a Free axis still shrink
                free = out.find(AxisTag.FREE)
                seq_ref = nb.nodes[ins[0]].out if ins else None
                if (
                    free is not None
                    and seq_ref is not None
                    and out.numel() != seq_ref.numel()
                ):
                    out = out.with_extent(free, out.axes[free].extent // P)
            nid = nb.add(n.kind, ins, out, attrs)
            remap[n.id] = nid
            if out.extents() != n.out.extents():
                provenance[nid] = RewriteReason.RESIZED_BUFFER
            continue

        # parameters, loss, anything else: replicated unchanged
        nid = nb.add(n.kind, ins, n.out, attrs)
        remap[n.id] = nid

    sp = nb.finish([remap[o] for o in g.outputs])
    return SPGraph(graph=sp, world_size=P, provenance=provenance, node_map=remap)
