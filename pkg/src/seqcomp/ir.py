"""Two-level tensor IR: axis-tagged shapes, typed operator graphs, validation, JSON serde.

The high level carries coarse user-facing operators (Linear, AttentionCore, ...);
the low level carries fine-grained compute and data-movement operators
(MatMul, Permute, ...). Axis tags are kept on both levels so later passes can
reason about which dimension is the sequence without pattern matching.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterator

from .errors import ValidationError

NEG_INF_MASK = -1e9


class AxisTag(str, Enum):
    BATCH = "Batch"
    SEQUENCE = "Sequence"
    HEADS = "Heads"
    HEAD_DIM = "HeadDim"
    MODEL = "Model"
    FFN = "FFN"
    VOCAB = "Vocab"
    FREE = "Free"


@dataclass(frozen=True)
class Axis:
    tag: AxisTag
    extent: int

    def __post_init__(self) -> None:
        if self.extent < 1:
            raise ValidationError(f"axis extent must be >= 1, got {self.extent}")


@dataclass(frozen=True)
class TensorSpec:
    axes: tuple[Axis, ...]
    elem_bytes: int = 4

    def __post_init__(self) -> None:
        if self.elem_bytes < 1:
            raise ValidationError("elem_bytes must be positive")
        seen: set[AxisTag] = set()
        for ax in self.axes:
            if ax.tag is AxisTag.FREE:
                continue
            if ax.tag in seen:
                raise ValidationError(f"duplicate axis tag {ax.tag.value}")
            seen.add(ax.tag)

    @property
    def rank(self) -> int:
        return len(self.axes)

    def extents(self) -> tuple[int, ...]:
        return tuple(ax.extent for ax in self.axes)

    def numel(self) -> int:
        return math.prod(self.extents()) if self.axes else 1

    def bytes(self) -> int:
        return self.elem_bytes * self.numel()

    def find(self, tag: AxisTag) -> int | None:
        for i, ax in enumerate(self.axes):
            if ax.tag is tag:
                return i
        return None

    def with_extent(self, idx: int, extent: int) -> "TensorSpec":
        axes = list(self.axes)
        axes[idx] = Axis(axes[idx].tag, extent)
        return TensorSpec(tuple(axes), self.elem_bytes)


def spec(*axes: tuple[str | AxisTag, int], elem_bytes: int = 4) -> TensorSpec:
    """Shorthand constructor: spec(("Batch", 4), ("Sequence", 128))."""
    return TensorSpec(tuple(Axis(AxisTag(t), e) for t, e in axes), elem_bytes)


def scalar_spec(elem_bytes: int = 4) -> TensorSpec:
    return TensorSpec((), elem_bytes)


class OpKind(str, Enum):
    # high-level operators
    INPUT = "Input"
    PARAMETER = "Parameter"
    EMBEDDING = "Embedding"
    LINEAR = "Linear"
    RMS_NORM = "RMSNorm"
    ATTENTION_CORE = "AttentionCore"
    CAUSAL_MASK_INDEX = "CausalMaskIndex"
    POSITION_INDEX = "PositionIndex"
    ELEMENTWISE = "Elementwise"
    RESHAPE = "Reshape"
    PERMUTE = "Permute"
    SOFTMAX = "Softmax"
    LOSS = "Loss"
    ALL_TO_ALL = "AllToAll"
    # low-level-only operators
    MATMUL = "MatMul"
    BATCH_MATMUL = "BatchMatMul"
    REDUCE_SUM = "ReduceSum"
    SLICE = "Slice"
    GRAD_MARKER = "GradMarker"


class Level(str, Enum):
    HIGH = "high"
    LOW = "low"


# Leaf kinds produce values without consuming graph values.
SOURCE_KINDS = frozenset(
    {
        OpKind.INPUT,
        OpKind.PARAMETER,
        OpKind.CAUSAL_MASK_INDEX,
        OpKind.POSITION_INDEX,
        OpKind.GRAD_MARKER,
    }
)

HIGH_KINDS = frozenset(
    {
        OpKind.INPUT,
        OpKind.PARAMETER,
        OpKind.EMBEDDING,
        OpKind.LINEAR,
        OpKind.RMS_NORM,
        OpKind.ATTENTION_CORE,
        OpKind.CAUSAL_MASK_INDEX,
        OpKind.POSITION_INDEX,
        OpKind.ELEMENTWISE,
        OpKind.RESHAPE,
        OpKind.PERMUTE,
        OpKind.SOFTMAX,
        OpKind.LOSS,
        OpKind.ALL_TO_ALL,
    }
)

LOW_KINDS = frozenset(
    {
        OpKind.MATMUL,
        OpKind.BATCH_MATMUL,
        OpKind.PERMUTE,
        OpKind.RESHAPE,
        OpKind.ELEMENTWISE,
        OpKind.SOFTMAX,
        OpKind.REDUCE_SUM,
        OpKind.SLICE,
        OpKind.ALL_TO_ALL,
        OpKind.GRAD_MARKER,
        # leaves survive lowering unchanged
        OpKind.INPUT,
        OpKind.PARAMETER,
        OpKind.CAUSAL_MASK_INDEX,
        OpKind.POSITION_INDEX,
    }
)

HIGH_ELEMENTWISE_FNS = frozenset({"add", "mul", "silu"})

# fn -> arity for low-level Elementwise nodes (fused backward kernels included)
ELEMENTWISE_FNS: dict[str, int] = {
    "add": 2,
    "mul": 2,
    "silu": 1,
    "square": 1,
    "scale": 1,
    "silu_dx": 2,  # (x, dy)
    "softmax_dx": 2,  # (y, dy)
    "rmsnorm": 2,  # (x, w)
    "rmsnorm_dx": 3,  # (x, w, dy)
    "rmsnorm_dw": 3,  # (x, w, dy)
    "expand": 1,  # broadcast dy back to a reduced input's shape
}


@dataclass
class Node:
    id: int
    kind: OpKind
    inputs: tuple[int, ...]
    out: TensorSpec
    attrs: dict[str, Any] = field(default_factory=dict)
    origin: int | None = None  # originating high-level node id, for low nodes
    origin_kind: str | None = None


@dataclass
class Graph:
    level: Level
    nodes: list[Node]
    inputs: tuple[int, ...]
    outputs: tuple[int, ...]

    def node(self, nid: int) -> Node:
        n = self.nodes[nid]
        if n.id != nid:
            raise ValidationError(f"node id {nid} does not match position")
        return n

    def __iter__(self) -> Iterator[Node]:
        return iter(self.nodes)

    def consumers(self) -> dict[int, list[int]]:
        out: dict[int, list[int]] = {n.id: [] for n in self.nodes}
        for n in self.nodes:
            for i in n.inputs:
                out[i].append(n.id)
        return out

    def validate(self) -> list[str]:
        return validate(self)


class GraphBuilder:
    """Appends nodes with sequential ids; the arena index is the node id."""

    def __init__(self, level: Level):
        self.level = level
        self.nodes: list[Node] = []
        self.inputs: list[int] = []
        self.outputs: list[int] = []

    def add(
        self,
        kind: OpKind,
        inputs: tuple[int, ...] | list[int],
        out: TensorSpec,
        attrs: dict[str, Any] | None = None,
        origin: int | None = None,
        origin_kind: str | None = None,
    ) -> int:
        nid = len(self.nodes)
        self.nodes.append(
            Node(nid, kind, tuple(inputs), out, dict(attrs or {}), origin, origin_kind)
        )
        if kind in (OpKind.INPUT, OpKind.PARAMETER):
            self.inputs.append(nid)
        return nid

    def finish(self, outputs: list[int] | tuple[int, ...]) -> Graph:
        self.outputs = list(outputs)
        g = Graph(self.level, self.nodes, tuple(self.inputs), tuple(self.outputs))
        diags = validate(g)
        if diags:
            raise ValidationError("; ".join(diags))
        return g


# ---------------------------------------------------------------------------
# shape rules
# ---------------------------------------------------------------------------


def _dedupe_tags(axes: list[Axis]) -> tuple[Axis, ...]:
    seen: set[AxisTag] = set()
    out: list[Axis] = []
    for ax in axes:
        if ax.tag is not AxisTag.FREE and ax.tag in seen:
            out.append(Axis(AxisTag.FREE, ax.extent))
        else:
            seen.add(ax.tag)
            out.append(ax)
    return tuple(out)


def broadcast_specs(a: TensorSpec, b: TensorSpec) -> TensorSpec:
    """NumPy-style right-aligned broadcast; tags come from the non-unit side."""
    rank = max(a.rank, b.rank)
    axes: list[Axis] = []
    for i in range(rank):
        ax_a = a.axes[i - rank + a.rank] if i - rank + a.rank >= 0 else None
        ax_b = b.axes[i - rank + b.rank] if i - rank + b.rank >= 0 else None
        if ax_a is None:
            axes.append(ax_b)  # type: ignore[arg-type]
        elif ax_b is None:
            axes.append(ax_a)
        elif ax_a.extent == ax_b.extent:
            tag = ax_a.tag if ax_a.tag is not AxisTag.FREE else ax_b.tag
            axes.append(Axis(tag, ax_a.extent))
        elif ax_a.extent == 1:
            axes.append(ax_b)
        elif ax_b.extent == 1:
            axes.append(ax_a)
        else:
            raise ValidationError(
                f"cannot broadcast extents {a.extents()} with {b.extents()}"
            )
    return TensorSpec(_dedupe_tags(axes), a.elem_bytes)


def _broadcastable_to(src: TensorSpec, dst: TensorSpec) -> bool:
    if src.rank > dst.rank:
        return False
    for i in range(1, src.rank + 1):
        se, de = src.axes[-i].extent, dst.axes[-i].extent
        if se != de and se != 1:
            return False
    return True


def infer_out_spec(g: Graph, n: Node) -> TensorSpec | None:
    """Derive a node's output spec from its inputs. None means source-defined
    (Input/Parameter/index kinds and shape-declaring ops validate separately)."""
    ins = [g.node(i).out for i in n.inputs]
    k = n.kind

    if k in SOURCE_KINDS:
        return None

    if k is OpKind.EMBEDDING or (k is OpKind.SLICE and n.attrs.get("mode") == "gather_rows"):
        ids, table = ins
        if table.rank != 2:
            raise ValidationError(f"node {n.id}: embedding table must be rank 2")
        return TensorSpec(ids.axes + (table.axes[1],), table.elem_bytes)

    if k is OpKind.LINEAR:
        x, w = ins
        if w.rank != 2:
            raise ValidationError(f"node {n.id}: weight must be rank 2 [out, in]")
        if x.axes[-1].extent != w.axes[1].extent:
            raise ValidationError(
                f"node {n.id}: shape mismatch, input extent {x.axes[-1].extent} "
                f"!= weight column count {w.axes[1].extent}"
            )
        return TensorSpec(_dedupe_tags(list(x.axes[:-1]) + [w.axes[0]]), x.elem_bytes)

    if k is OpKind.RMS_NORM:
        x, w = ins
        if w.rank != 1 or w.axes[0].extent != x.axes[-1].extent:
            raise ValidationError(f"node {n.id}: norm weight mismatch")
        return x

    if k is OpKind.ATTENTION_CORE:
        x, mask = ins
        if x.rank != 4:
            raise ValidationError(f"node {n.id}: attention input must be rank 4")
        s = x.axes[1].extent
        if mask.rank != 2 or mask.axes[0].extent != s or mask.axes[1].extent != s:
            raise ValidationError(f"node {n.id}: mask must be [{s}, {s}]")
        return x

    if k is OpKind.ELEMENTWISE:
        fn = n.attrs.get("fn")
        if fn not in ELEMENTWISE_FNS:
            raise ValidationError(f"node {n.id}: unknown elementwise fn {fn!r}")
        if len(ins) != ELEMENTWISE_FNS[fn]:
            raise ValidationError(f"node {n.id}: fn {fn} expects {ELEMENTWISE_FNS[fn]} inputs")
        if g.level is Level.HIGH and fn not in HIGH_ELEMENTWISE_FNS:
            raise ValidationError(f"node {n.id}: fn {fn} not allowed in high IR")
        if fn in ("add", "mul"):
            return broadcast_specs(ins[0], ins[1])
        if fn == "rmsnorm_dw":
            return ins[1]
        if fn == "expand":
            if not _broadcastable_to(ins[0], n.out):
                raise ValidationError(f"node {n.id}: expand input not broadcastable")
            return n.out
        return ins[0]

    if k is OpKind.RESHAPE:
        if ins[0].numel() != n.out.numel():
            raise ValidationError(
                f"node {n.id}: reshape changes element count "
                f"{ins[0].numel()} -> {n.out.numel()}"
            )
        return n.out

    if k is OpKind.PERMUTE:
        perm = n.attrs.get("perm")
        if not isinstance(perm, list) or sorted(perm) != list(range(ins[0].rank)):
            raise ValidationError(f"node {n.id}: invalid permutation {perm}")
        return TensorSpec(tuple(ins[0].axes[p] for p in perm), ins[0].elem_bytes)

    if k is OpKind.SOFTMAX:
        return ins[0]

    if k is OpKind.LOSS:
        return scalar_spec(ins[0].elem_bytes)

    if k is OpKind.ALL_TO_ALL:
        return all_to_all_out_spec(ins[0], n.attrs["direction"], int(n.attrs["world_size"]))

    if k is OpKind.MATMUL:
        a, b = ins
        if b.rank != 2 or a.rank < 2:
            raise ValidationError(f"node {n.id}: matmul expects A rank>=2, B rank 2")
        if a.axes[-1].extent != b.axes[0].extent:
            raise ValidationError(f"node {n.id}: matmul contraction mismatch")
        return TensorSpec(_dedupe_tags(list(a.axes[:-1]) + [b.axes[1]]), a.elem_bytes)

    if k is OpKind.BATCH_MATMUL:
        a, b = ins
        if a.rank != b.rank or a.rank < 3:
            raise ValidationError(f"node {n.id}: bmm expects equal ranks >= 3")
        if a.extents()[:-2] != b.extents()[:-2] or a.axes[-1].extent != b.axes[-2].extent:
            raise ValidationError(f"node {n.id}: bmm shape mismatch")
        return TensorSpec(_dedupe_tags(list(a.axes[:-1]) + [b.axes[-1]]), a.elem_bytes)

    if k is OpKind.REDUCE_SUM:
        axes = n.attrs.get("axes")
        keepdim = bool(n.attrs.get("keepdim", False))
        x = ins[0]
        if not isinstance(axes, list) or any(a < 0 or a >= x.rank for a in axes):
            raise ValidationError(f"node {n.id}: invalid reduction axes {axes}")
        out: list[Axis] = []
        for i, ax in enumerate(x.axes):
            if i in axes:
                if keepdim:
                    out.append(Axis(ax.tag, 1))
            else:
                out.append(ax)
        return TensorSpec(tuple(out), x.elem_bytes)

    if k is OpKind.SLICE:
        mode = n.attrs.get("mode")
        x = ins[0]
        if mode == "range":
            axis, start, length = (int(n.attrs[a]) for a in ("axis", "start", "length"))
            if start < 0 or start + length > x.axes[axis].extent:
                raise ValidationError(f"node {n.id}: slice out of range")
            return x.with_extent(axis, length)
        if mode == "pad":
            axis, start = int(n.attrs["axis"]), int(n.attrs["start"])
            if start + x.axes[axis].extent > n.out.axes[axis].extent:
                raise ValidationError(f"node {n.id}: pad out of range")
            return n.out
        if mode == "scatter_add_rows":
            # (ids, values) -> declared table-shaped output
            if n.out.rank != 2:
                raise ValidationError(f"node {n.id}: scatter output must be rank 2")
            return n.out
        raise ValidationError(f"node {n.id}: unknown slice mode {mode!r}")

    raise ValidationError(f"node {n.id}: no shape rule for kind {k.value}")


def all_to_all_out_spec(x: TensorSpec, direction: str, world_size: int) -> TensorSpec:
    si = x.find(AxisTag.SEQUENCE)
    hi = x.find(AxisTag.HEADS)
    if si is None or hi is None:
        raise ValidationError("all-to-all operand needs Sequence and Heads axes")
    s, h = x.axes[si].extent, x.axes[hi].extent
    if direction == "seq_to_head":
        if h % world_size:
            raise ValidationError(f"heads {h} not divisible by world size {world_size}")
        return x.with_extent(si, s * world_size).with_extent(hi, h // world_size)
    if direction == "head_to_seq":
        if s % world_size:
            raise ValidationError(f"sequence {s} not divisible by world size {world_size}")
        return x.with_extent(si, s // world_size).with_extent(hi, h * world_size)
    raise ValidationError(f"unknown all-to-all direction {direction!r}")


def inverse_direction(direction: str) -> str:
    return "head_to_seq" if direction == "seq_to_head" else "seq_to_head"


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------

_ALLOWED = {Level.HIGH: HIGH_KINDS, Level.LOW: LOW_KINDS}


def validate(g: Graph) -> list[str]:
    """Return every invariant violation found (empty list means ok)."""
    diags: list[str] = []
    seen: set[int] = set()
    for pos, n in enumerate(g.nodes):
        if n.id != pos:
            diags.append(f"node at position {pos} has id {n.id}")
            continue
        if n.kind not in _ALLOWED[g.level]:
            diags.append(f"node {n.id}: kind {n.kind.value} not allowed at {g.level.value} level")
        for i in n.inputs:
            if i not in seen:
                kind = "forward reference" if i >= n.id else "dangling id"
                diags.append(f"node {n.id}: {kind} to {i}")
        seen.add(n.id)
    if diags:
        return diags

    for nid in tuple(g.inputs) + tuple(g.outputs):
        if nid < 0 or nid >= len(g.nodes):
            diags.append(f"graph references unknown node {nid}")
    if diags:
        return diags

    # reachability from leaf nodes
    reached = {n.id for n in g.nodes if not n.inputs}
    for n in g.nodes:
        if n.inputs and all(i in reached for i in n.inputs):
            reached.add(n.id)
    for n in g.nodes:
        if n.id not in reached:
            diags.append(f"node {n.id}: not reachable from inputs")

    for n in g.nodes:
        try:
            expect = infer_out_spec(g, n)
        except ValidationError as e:
            diags.append(str(e))
            continue
        # tags are advisory metadata; extents are the binding shape contract
        if expect is not None and expect.extents() != n.out.extents():
            diags.append(
                f"node {n.id}: shape mismatch, declared {n.out.extents()} "
                f"vs derived {expect.extents()}"
            )
    return diags


# ---------------------------------------------------------------------------
# JSON serde (round-trips bit-exactly via canonical dumps)
# ---------------------------------------------------------------------------


def spec_to_json(s: TensorSpec) -> dict[str, Any]:
    return {"axes": [[ax.tag.value, ax.extent] for ax in s.axes], "elem_bytes": s.elem_bytes}


def spec_from_json(d: dict[str, Any]) -> TensorSpec:
    return TensorSpec(
        tuple(Axis(AxisTag(t), int(e)) for t, e in d["axes"]), int(d["elem_bytes"])
    )


def node_to_json(n: Node) -> dict[str, Any]:
    d: dict[str, Any] = {
        "id": n.id,
        "kind": n.kind.value,
        "inputs": list(n.inputs),
        "attrs": n.attrs,
    }
    d.update(spec_to_json(n.out))
    if n.origin is not None:
        d["origin"] = n.origin
    if n.origin_kind is not None:
        d["origin_kind"] = n.origin_kind
    return d


def node_from_json(d: dict[str, Any]) -> Node:
    return Node(
        id=int(d["id"]),
        kind=OpKind(d["kind"]),
        inputs=tuple(int(i) for i in d["inputs"]),
        out=spec_from_json(d),
        attrs=dict(d.get("attrs", {})),
        origin=d.get("origin"),
        origin_kind=d.get("origin_kind"),
    )


def graph_to_json(g: Graph) -> dict[str, Any]:
    return {
        "level": g.level.value,
        "nodes": [node_to_json(n) for n in g.nodes],
        "inputs": list(g.inputs),
        "outputs": list(g.outputs),
    }


def graph_from_json(d: dict[str, Any]) -> Graph:
    return Graph(
        level=Level(d["level"]),
        nodes=[node_from_json(nd) for nd in d["nodes"]],
        inputs=tuple(int(i) for i in d["inputs"]),
        outputs=tuple(int(i) for i in d["outputs"]),
    )


def dumps(payload: dict[str, Any]) -> str:
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"
