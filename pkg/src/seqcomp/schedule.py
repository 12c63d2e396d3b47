"""Execution schedules and the liveness rule shared by the interpreter and
the cost model.

Both sides must account peak memory with the exact same lifetimes, so the
rule lives here once: a value instance is live from the step that
(re)computes it to its last consuming step; graph outputs (including gradient
outputs) stay live to the end; leaf values (inputs, parameters, index
tensors) never count toward the activation total.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

from .autodiff import JointGraph
from .errors import ValidationError
from .ir import SOURCE_KINDS


class Action(str, Enum):
    COMPUTE = "Compute"
    RECOMPUTE = "Recompute"


@dataclass(frozen=True)
class ExecutionSchedule:
    phases: tuple[tuple[int, Action], ...]
    retained: frozenset[int]  # the saved set the schedule was built from


@dataclass(frozen=True)
class Liveness:
    # free_after[t] lists value ids whose current instance dies after step t
    free_after: tuple[tuple[int, ...], ...]
    peak_bytes: int


def save_everything_ids(j: JointGraph) -> frozenset[int]:
    return frozenset(
        nid for nid in j.forward_ids if j.graph.node(nid).kind not in SOURCE_KINDS
    )


def build_schedule(j: JointGraph, saved: frozenset[int]) -> ExecutionSchedule:
    """Forward in topological order, then backward in topological order with
    each missing forward dependency recomputed (once) just before its first
    backward consumer."""
    g = j.graph
    phases: list[tuple[int, Action]] = []
    for n in g.nodes:
        if n.id in j.forward_ids and n.kind not in SOURCE_KINDS:
            phases.append((n.id, Action.COMPUTE))

    available = set(saved)
    for bid in sorted(j.backward_ids):
        n = g.node(bid)
        for m in n.inputs:
            if (
                m not in j.forward_ids
                or m in available
                or g.node(m).kind in SOURCE_KINDS
            ):
                continue
            # pull in the whole unsaved chain under m, oldest first
            chain: list[int] = []
            stack = [m]
            seen: set[int] = set()
            while stack:
                nid = stack.pop()
                if nid in seen or nid in available:
                    continue
                if g.node(nid).kind in SOURCE_KINDS:
                    continue
                seen.add(nid)
                stack.extend(g.node(nid).inputs)
                chain.append(nid)
            for nid in sorted(chain):
                phases.append((nid, Action.RECOMPUTE))
                available.add(nid)
        if n.kind not in SOURCE_KINDS:
            phases.append((bid, Action.COMPUTE))
            available.add(bid)

    return ExecutionSchedule(phases=tuple(phases), retained=saved)


def analyze_liveness(j: JointGraph, sched: ExecutionSchedule) -> Liveness:
    """The single source of truth for value lifetimes under a schedule."""
    g = j.graph
    keep = set(g.outputs)
    steps = sched.phases

    # map each consumption to the producing instance active at that step
    current: dict[int, int] = {}  # value id -> production step
    last_use: dict[tuple[int, int], int] = {}
    for t, (nid, _) in enumerate(steps):
        for i in g.node(nid).inputs:
            if g.node(i).kind in SOURCE_KINDS:
                continue
            if i not in current:
                raise ValidationError(f"schedule uses value {i} before computing it")
            last_use[(i, current[i])] = t
        current[nid] = t

    free_after: list[list[int]] = [[] for _ in steps]
    live = 0
    peak = 0
    inst: dict[int, int] = {}
    for t, (nid, _) in enumerate(steps):
        if nid not in inst:  # a still-live instance is replaced in place
            live += g.node(nid).out.bytes()
        inst[nid] = t
        peak = max(peak, live)
        for i in sorted(set(g.node(nid).inputs) | {nid}):
            if i not in inst or i in keep:
                continue
            if last_use.get((i, inst[i]), t if i == nid else -1) == t:
                live -= g.node(i).out.bytes()
                free_after[t].append(i)
                del inst[i]
    return Liveness(
        free_after=tuple(tuple(f) for f in free_after),
        peak_bytes=peak,
    )
