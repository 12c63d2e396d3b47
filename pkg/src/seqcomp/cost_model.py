"""FLOPs and memory accounting, and the trainability search.

FLOPs follow the per-layer closed forms for attention (2·b·h·s²·d),
linear projections (8·b·h·s·d²), and the MLP (4·b·h·s·d_ffn·d); memory
combines liveness-simulated activation peaks with a static term for weights,
gradients, and optimizer state, plus collective staging buffers.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Any

from .ac_pass import AcMode, CheckpointPlan, plan_checkpoints
from .autodiff import JointGraph, build_joint_graph
from .errors import InfeasibleError
from .ir import Graph, Node, OpKind
from .lowering import lower
from .schedule import analyze_liveness, build_schedule, save_everything_ids
from .sp_pass import SPConfig, transform_sp
from .transformer import ModelDims, build_transformer_graph

DEFAULT_OPTIMIZER_MULTIPLIER = 8
DEFAULT_GRANULARITY = 256


@dataclass(frozen=True)
class FlopsBreakdown:
    attention: float
    linear_proj: float
    mlp: float
    recompute: float = 0.0

    @property
    def total(self) -> float:
        return self.attention + self.linear_proj + self.mlp + self.recompute

    def to_json(self) -> dict[str, float]:
        return {
            "attention": self.attention,
            "linear_proj": self.linear_proj,
            "mlp": self.mlp,
            "recompute": self.recompute,
            "total": self.total,
        }


@dataclass(frozen=True)
class MemoryBreakdown:
    activations_peak: int
    static: int
    comm_buffers: int

    @property
    def total_peak(self) -> int:
        return self.activations_peak + self.static + self.comm_buffers

    def to_json(self) -> dict[str, int]:
        return {
            "activations_peak": self.activations_peak,
            "static": self.static,
            "comm_buffers": self.comm_buffers,
            "total_peak": self.total_peak,
        }


@dataclass(frozen=True)
class TrainabilityQuery:
    dims: ModelDims  # s is ignored; the search varies it
    budget: int
    strategy: str  # NoSP | SP | SP+SAC
    world_size: int = 1
    ac_mode: AcMode = AcMode.SEQ_AWARE_NON_ATTENTION
    granularity: int = DEFAULT_GRANULARITY
    optimizer_multiplier: int = DEFAULT_OPTIMIZER_MULTIPLIER

    def __post_init__(self) -> None:
        if self.strategy not in ("NoSP", "SP", "SP+SAC"):
            raise InfeasibleError(f"unknown strategy {self.strategy!r}")


def flops(dims: ModelDims) -> FlopsBreakdown:
    b, s, h, d = dims.b, dims.s, dims.h, dims.d
    return FlopsBreakdown(
        attention=2.0 * b * h * s * s * d * dims.layers,
        linear_proj=8.0 * b * h * s * d * d * dims.layers,
        mlp=4.0 * b * h * s * dims.d_ffn * d * dims.layers,
    )


def fraction_non_attention(dims: ModelDims) -> float:
    f = flops(dims)
    return (f.linear_proj + f.mlp) / (f.attention + f.linear_proj + f.mlp)


def _matmul_flops(g: Graph, n: Node) -> float:
    if n.kind not in (OpKind.MATMUL, OpKind.BATCH_MATMUL):
        return 0.0
    contraction = g.node(n.inputs[0]).out.axes[-1].extent
    return 2.0 * n.out.numel() * contraction


def graph_forward_flops(g: Graph, ids=None) -> float:
    pool = g.nodes if ids is None else [g.node(i) for i in ids]
    return sum(_matmul_flops(g, n) for n in pool)


def recompute_overhead(j: JointGraph, plan: CheckpointPlan) -> float:
    """Recomputed matmul FLOPs over total training FLOPs (backward ≈ 2× forward)."""
    fwd = graph_forward_flops(j.graph, sorted(j.forward_ids))
    if fwd == 0:
        return 0.0
    re = graph_forward_flops(j.graph, plan.recompute_schedule)
    return re / (3.0 * fwd)


def param_bytes(g: Graph) -> int:
    return sum(n.out.bytes() for n in g.nodes if n.kind is OpKind.PARAMETER)


def static_bytes(g: Graph, optimizer_multiplier: int = DEFAULT_OPTIMIZER_MULTIPLIER) -> int:
    params = sum(n.out.numel() for n in g.nodes if n.kind is OpKind.PARAMETER)
    return params * (4 + 4 + optimizer_multiplier * 4)


def comm_buffer_bytes(g: Graph) -> int:
    return sum(n.out.bytes() for n in g.nodes if n.kind is OpKind.ALL_TO_ALL)


def memory(
    j: JointGraph,
    plan: CheckpointPlan | None,
    optimizer_multiplier: int = DEFAULT_OPTIMIZER_MULTIPLIER,
) -> MemoryBreakdown:
    saved = plan.saved if plan is not None else save_everything_ids(j)
    sched = build_schedule(j, frozenset(saved))
    peak = analyze_liveness(j, sched).peak_bytes
    return MemoryBreakdown(
        activations_peak=peak,
        static=static_bytes(j.graph, optimizer_multiplier),
        comm_buffers=comm_buffer_bytes(j.graph),
    )


def _joint_for(dims: ModelDims, world_size: int) -> JointGraph:
    g = build_transformer_graph(dims)
    if world_size > 1:
        g = transform_sp(g, SPConfig(world_size=world_size)).graph
    return build_joint_graph(lower(g))


def memory_at(
    dims: ModelDims,
    s: int,
    strategy: str,
    world_size: int,
    ac_mode: AcMode,
    optimizer_multiplier: int,
) -> tuple[MemoryBreakdown, CheckpointPlan | None]:
    d = replace(dims, s=s, world_size=world_size)
    P = world_size if strategy != "NoSP" else 1
    j = _joint_for(d, P)
    plan = plan_checkpoints(j, ac_mode) if strategy == "SP+SAC" else None
    return memory(j, plan, optimizer_multiplier), plan


def max_trainable_seq(q: TrainabilityQuery) -> int:
    """Largest sequence length (a multiple of granularity·P) whose predicted
    total peak fits the per-rank byte budget."""
    P = q.world_size if q.strategy != "NoSP" else 1
    step = q.granularity * max(P, q.dims.h)  # keep s divisible by heads too

    def fits(s: int) -> bool:
        mem, _ = memory_at(q.dims, s, q.strategy, q.world_size, q.ac_mode,
                           q.optimizer_multiplier)
        return mem.total_peak <= q.budget

    if not fits(step):
        raise InfeasibleError(
            f"budget {q.budget} cannot fit even s={step} under {q.strategy}"
        )
    lo = 1
    hi = 2
    while fits(hi * step):
        lo = hi
        hi *= 2
    # largest k in [lo, hi) with fits(k*step)
    while lo + 1 < hi:
        mid = (lo + hi) // 2
        if fits(mid * step):
            lo = mid
        else:
            hi = mid
    return lo * step


def cost_report(
    dims: ModelDims,
    j: JointGraph,
    plan: CheckpointPlan | None,
    optimizer_multiplier: int = DEFAULT_OPTIMIZER_MULTIPLIER,
    budget: int | None = None,
    strategy: str = "SP",
    world_size: int = 1,
) -> dict[str, Any]:
    f = flops(dims)
    if plan is not None:
        re = graph_forward_flops(j.graph, plan.recompute_schedule)
        f = FlopsBreakdown(f.attention, f.linear_proj, f.mlp, recompute=re)
    mem = memory(j, plan, optimizer_multiplier)
    report: dict[str, Any] = {
        "flops": f.to_json(),
        "memory": mem.to_json(),
        "fraction_non_attention": fraction_non_attention(dims),
        "overhead": recompute_overhead(j, plan) if plan is not None else 0.0,
    }
    if budget is not None:
        report["max_seq"] = max_trainable_seq(
            TrainabilityQuery(
                dims=dims,
                budget=budget,
                strategy=strategy,
                world_size=world_size,
                optimizer_multiplier=optimizer_multiplier,
            )
        )
    return report
