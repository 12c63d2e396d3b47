"""Min-cut activation checkpointing over the joint graph.

Every joint-graph node n is split into n_in/n_out with a finite edge whose
capacity is the node's output bytes; data dependencies, source wiring, and
sink wiring are infinite. The minimum source/sink cut then selects exactly
the cheapest set of forward values to keep live for the backward pass; all
other backward dependencies get recomputed.

Three policies differ only in which matmul-family nodes receive an infinite
source edge (a guard that forbids discarding their output): every one of them,
only those inside an attention expansion, or none.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable

from .autodiff import JointGraph, grad_reachable
from .errors import InfeasibleError, ValidationError
from .ir import Node, OpKind, SOURCE_KINDS, dumps
from .maxflow import Dinic


class AcMode(str, Enum):
    CONSERVATIVE = "conservative"
    SEQ_AWARE_NON_ATTENTION = "seq-aware"
    SEQ_AWARE_ALL = "seq-aware-all"


class EdgeOrigin(str, Enum):
    SPLIT_CAPACITY = "SplitCapacity"
    STRUCTURAL = "Structural"
    SOURCE_WIRE = "SourceWire"
    SINK_WIRE = "SinkWire"
    COMPUTE_HEAVY_GUARD = "ComputeHeavyGuard"


COMPUTE_HEAVY_KINDS = frozenset({OpKind.MATMUL, OpKind.BATCH_MATMUL})

CapacityHeuristic = Callable[[Node], int]


def capacity(node: Node) -> int:
    return node.out.bytes()


@dataclass(frozen=True)
class FlowEdge:
    src: str
    dst: str
    cap: int | None  # None = infinite
    origin: EdgeOrigin


@dataclass
class FlowNetwork:
    edges: list[FlowEdge]
    node_ids: tuple[int, ...]  # joint-graph ids, in split order

    def to_json(self) -> dict[str, Any]:
        return {
            "edges": [
                {"src": e.src, "dst": e.dst, "cap": e.cap, "origin": e.origin.value}
                for e in self.edges
            ],
            "node_ids": list(self.node_ids),
        }

    def dumps(self) -> str:
        return dumps(self.to_json())


@dataclass
class CheckpointPlan:
    saved: frozenset[int]
    cut_value: int
    recompute_schedule: tuple[int, ...]
    mode: AcMode

    def to_json(self) -> dict[str, Any]:
        return {
            "saved": sorted(self.saved),
            "cut_value": self.cut_value,
            "recompute_schedule": list(self.recompute_schedule),
            "mode": self.mode.value,
        }

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> "CheckpointPlan":
        return cls(
            saved=frozenset(d["saved"]),
            cut_value=int(d["cut_value"]),
            recompute_schedule=tuple(d["recompute_schedule"]),
            mode=AcMode(d["mode"]),
        )

    def dumps(self) -> str:
        return dumps(self.to_json())


def guarded_nodes(j: JointGraph, mode: AcMode) -> set[int]:
    """Forward nodes whose output must not be discarded under the mode."""
    if mode is AcMode.SEQ_AWARE_ALL:
        return set()
    out: set[int] = set()
    for nid in j.forward_ids:
        n = j.graph.node(nid)
        if n.kind not in COMPUTE_HEAVY_KINDS:
            continue
        if mode is AcMode.CONSERVATIVE or n.origin_kind == OpKind.ATTENTION_CORE.value:
            out.add(nid)
    return out


def build_flow_network(
    j: JointGraph, mode: AcMode, cap: CapacityHeuristic = capacity
) -> FlowNetwork:
    g = j.graph
    sink_side = grad_reachable(j) & j.backward_ids
    edges: list[FlowEdge] = []

    for n in g.nodes:
        edges.append(FlowEdge(f"{n.id}_in", f"{n.id}_out", cap(n), EdgeOrigin.SPLIT_CAPACITY))
    for n in g.nodes:
        for i in n.inputs:
            edges.append(FlowEdge(f"{i}_out", f"{n.id}_in", None, EdgeOrigin.STRUCTURAL))
    for n in g.nodes:
        if n.kind in SOURCE_KINDS and n.id in j.forward_ids:
            edges.append(FlowEdge("source", f"{n.id}_in", None, EdgeOrigin.SOURCE_WIRE))
    for nid in sorted(guarded_nodes(j, mode)):
        edges.append(FlowEdge("source", f"{nid}_in", None, EdgeOrigin.COMPUTE_HEAVY_GUARD))
    for nid in sorted(sink_side):
        # wire both halves so the cut can never cross a backward split edge
        edges.append(FlowEdge(f"{nid}_in", "sink", None, EdgeOrigin.SINK_WIRE))
        edges.append(FlowEdge(f"{nid}_out", "sink", None, EdgeOrigin.SINK_WIRE))

    return FlowNetwork(edges=edges, node_ids=tuple(n.id for n in g.nodes))


def min_cut(net: FlowNetwork, j: JointGraph, mode: AcMode = AcMode.SEQ_AWARE_NON_ATTENTION
            ) -> CheckpointPlan:
    finite_total = sum(e.cap for e in net.edges if e.cap is not None)
    inf = finite_total + 1

    names: dict[str, int] = {"source": 0, "sink": 1}
    for nid in net.node_ids:
        names[f"{nid}_in"] = len(names)
        names[f"{nid}_out"] = len(names)
    dn = Dinic(len(names))
    split_cap: dict[int, int] = {}
    for e in net.edges:
        dn.add_edge(names[e.src], names[e.dst], inf if e.cap is None else e.cap)
        if e.origin is EdgeOrigin.SPLIT_CAPACITY:
            split_cap[int(e.src.removesuffix("_in"))] = e.cap or 0

    flow = dn.max_flow(names["source"], names["sink"])
    if flow >= inf:
        raise InfeasibleError(f"plan infeasible under mode {mode.value}")

    src_side = dn.residual_reachable(names["source"])
    saved = frozenset(
        nid
        for nid in net.node_ids
        if names[f"{nid}_in"] in src_side and names[f"{nid}_out"] not in src_side
    )
    cut_value = sum(split_cap[nid] for nid in saved)
    if cut_value != flow:
        raise ValidationError(
            f"internal fault: cut value {cut_value} does not match max flow {flow}"
        )
    return CheckpointPlan(
        saved=saved,
        cut_value=cut_value,
        recompute_schedule=recompute_schedule(j, saved),
        mode=mode,
    )


def plan_checkpoints(
    j: JointGraph, mode: AcMode, cap: CapacityHeuristic = capacity
) -> CheckpointPlan:
    return min_cut(build_flow_network(j, mode, cap), j, mode)


def recompute_schedule(j: JointGraph, saved: frozenset[int]) -> tuple[int, ...]:
    """Forward nodes the backward pass must re-execute, in topological order.

    A forward value is available for free if it is saved or produced by a
    leaf; everything else a backward node (transitively) consumes must be
    recomputed."""
    g = j.graph
    needed: set[int] = set()
    stack = [
        i
        for b in j.backward_ids
        for i in g.node(b).inputs
        if i in j.forward_ids
    ]
    while stack:
        nid = stack.pop()
        if nid in needed or nid in saved:
            continue
        n = g.node(nid)
        if n.kind in SOURCE_KINDS:
            continue
        needed.add(nid)
        stack.extend(n.inputs)
    return tuple(sorted(needed))


def apply_plan(j: JointGraph, plan: CheckpointPlan):
    from .schedule import build_schedule

    for nid in plan.saved:
        if nid not in j.forward_ids:
            raise ValidationError(f"plan saves unknown or backward node {nid}")
    return build_schedule(j, plan.saved)
