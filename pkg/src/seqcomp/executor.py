"""Reference interpreter for high, low, and joint graphs, plus a deterministic
multi-rank simulator for sequence-parallel graphs.

Ranks are logical participants stepped round-robin in lockstep; collectives
rendezvous at an exchange point that checks every rank submitted a matching
descriptor. There is no real transport, which keeps every test bit-reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .autodiff import JointGraph
from .errors import CollectiveError, EquivalenceError, ValidationError
from .ir import NEG_INF_MASK, AxisTag, Graph, Node, OpKind, SOURCE_KINDS
from .schedule import ExecutionSchedule, analyze_liveness

Arrays = dict[int, np.ndarray]


def _dtype(precision: int) -> type:
    if precision == 64:
        return np.float64
    if precision == 32:
        return np.float32
    raise ValidationError(f"unsupported precision {precision}")


def _silu(x: np.ndarray) -> np.ndarray:
    return x / (1.0 + np.exp(-x))


def _softmax(x: np.ndarray) -> np.ndarray:
    m = np.max(x, axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / np.sum(e, axis=-1, keepdims=True)


def _rmsnorm(x: np.ndarray, w: np.ndarray, eps: float) -> np.ndarray:
    r = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    return x * r * w


def _rmsnorm_dx(x: np.ndarray, w: np.ndarray, dy: np.ndarray, eps: float) -> np.ndarray:
    n = x.shape[-1]
    ms = np.mean(x * x, axis=-1, keepdims=True) + eps
    r = 1.0 / np.sqrt(ms)
    dyw = dy * w
    return r * dyw - (r / ms / n) * x * np.sum(dyw * x, axis=-1, keepdims=True)


def _rmsnorm_dw(x: np.ndarray, w: np.ndarray, dy: np.ndarray, eps: float) -> np.ndarray:
    r = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    prod = dy * x * r
    return np.sum(prod.reshape(-1, x.shape[-1]), axis=0)


def _causal_mask(s: int, dtype: type) -> np.ndarray:
    m = np.zeros((s, s), dtype=dtype)
    m[np.triu_indices(s, k=1)] = NEG_INF_MASK
    return m


def _position_index(n: Node, rank: int, dtype: type) -> np.ndarray:
    start = int(n.attrs.get("start", 0)) + rank * int(n.attrs.get("rank_stride", 0))
    return np.arange(start, start + int(n.attrs["length"]), dtype=dtype)


def _eval_elementwise(n: Node, args: list[np.ndarray]) -> np.ndarray:
    fn = n.attrs["fn"]
    if fn == "add":
        return args[0] + args[1]
    if fn == "mul":
        return args[0] * args[1]
    if fn == "silu":
        return _silu(args[0])
    if fn == "square":
        return args[0] * args[0]
    if fn == "scale":
        return args[0] * args[0].dtype.type(n.attrs["factor"])
    if fn == "silu_dx":
        x, dy = args
        sig = 1.0 / (1.0 + np.exp(-x))
        return dy * sig * (1.0 + x * (1.0 - sig))
    if fn == "softmax_dx":
        y, dy = args
        return y * (dy - np.sum(dy * y, axis=-1, keepdims=True))
    if fn == "rmsnorm":
        return _rmsnorm(args[0], args[1], n.attrs.get("eps", 1e-6))
    if fn == "rmsnorm_dx":
        return _rmsnorm_dx(args[0], args[1], args[2], n.attrs.get("eps", 1e-6))
    if fn == "rmsnorm_dw":
        return _rmsnorm_dw(args[0], args[1], args[2], n.attrs.get("eps", 1e-6))
    if fn == "expand":
        return np.broadcast_to(args[0], n.out.extents()).copy()
    raise ValidationError(f"node {n.id}: unknown elementwise fn {fn!r}")


def _eval_slice(n: Node, args: list[np.ndarray]) -> np.ndarray:
    mode = n.attrs["mode"]
    if mode == "gather_rows":
        ids, table = args
        return table[ids.astype(np.int64) % table.shape[0]]
    if mode == "range":
        axis, start, length = (int(n.attrs[a]) for a in ("axis", "start", "length"))
        idx = [slice(None)] * args[0].ndim
        idx[axis] = slice(start, start + length)
        return args[0][tuple(idx)]
    if mode == "pad":
        axis, start = int(n.attrs["axis"]), int(n.attrs["start"])
        out = np.zeros(n.out.extents(), dtype=args[0].dtype)
        idx = [slice(None)] * out.ndim
        idx[axis] = slice(start, start + args[0].shape[axis])
        out[tuple(idx)] = args[0]
        return out
    if mode == "scatter_add_rows":
        ids, values = args
        out = np.zeros(n.out.extents(), dtype=values.dtype)
        np.add.at(
            out,
            ids.astype(np.int64).reshape(-1) % out.shape[0],
            values.reshape(-1, values.shape[-1]),
        )
        return out
    raise ValidationError(f"node {n.id}: unknown slice mode {mode!r}")


def _eval_attention_core(x: np.ndarray, mask: np.ndarray) -> np.ndarray:
    # mirrors the lowering recipe operation-for-operation so both levels
    # agree to the oracle tolerance
    q = np.transpose(x, (0, 2, 1, 3))
    kt = np.transpose(x, (0, 2, 3, 1))
    scores = np.matmul(q, kt)
    scaled = scores * x.dtype.type(1.0 / math.sqrt(x.shape[-1]))
    masked = scaled + mask
    probs = _softmax(masked)
    ctx = np.matmul(probs, q)
    return np.transpose(ctx, (0, 2, 1, 3))


def eval_node(n: Node, args: list[np.ndarray], dtype: type, rank: int = 0) -> np.ndarray:
    k = n.kind
    if k is OpKind.CAUSAL_MASK_INDEX:
        return _causal_mask(n.out.axes[0].extent, dtype)
    if k is OpKind.POSITION_INDEX:
        return _position_index(n, rank, dtype)
    if k is OpKind.GRAD_MARKER:
        return np.full(n.out.extents(), n.attrs.get("value", 1.0), dtype=dtype)
    if k is OpKind.EMBEDDING:
        return args[1][args[0].astype(np.int64) % args[1].shape[0]]
    if k is OpKind.LINEAR:
        return np.matmul(args[0], args[1].T)
    if k is OpKind.RMS_NORM:
        return _rmsnorm(args[0], args[1], 1e-6)
    if k is OpKind.ATTENTION_CORE:
        return _eval_attention_core(args[0], args[1])
    if k is OpKind.LOSS:
        return np.sum(args[0] * args[0])
    if k is OpKind.ELEMENTWISE:
        return _eval_elementwise(n, args)
    if k is OpKind.RESHAPE:
        return args[0].reshape(n.out.extents())
    if k is OpKind.PERMUTE:
        return np.transpose(args[0], n.attrs["perm"])
    if k is OpKind.SOFTMAX:
        return _softmax(args[0])
    if k is OpKind.MATMUL or k is OpKind.BATCH_MATMUL:
        return np.matmul(args[0], args[1])
    if k is OpKind.REDUCE_SUM:
        return np.sum(
            args[0], axis=tuple(n.attrs["axes"]), keepdims=bool(n.attrs.get("keepdim", False))
        )
    if k is OpKind.SLICE:
        return _eval_slice(n, args)
    raise ValidationError(f"node {n.id}: kind {k.value} is not executable here")


def execute(g: Graph, inputs: Arrays, params: Arrays, precision: int = 64) -> Arrays:
    """Single-device evaluation in topological order; returns g.outputs values."""
    dtype = _dtype(precision)
    env: Arrays = {}
    for n in g.nodes:
        if n.kind is OpKind.INPUT:
            env[n.id] = np.asarray(inputs[n.id], dtype=dtype)
        elif n.kind is OpKind.PARAMETER:
            env[n.id] = np.asarray(params[n.id], dtype=dtype)
        elif n.kind is OpKind.ALL_TO_ALL:
            raise CollectiveError(f"node {n.id}: collectives require the multi-rank runner")
        else:
            env[n.id] = eval_node(n, [env[i] for i in n.inputs], dtype)
    return {o: env[o] for o in g.outputs}


# ---------------------------------------------------------------------------
# multi-rank simulation
# ---------------------------------------------------------------------------


def all_to_all_shards(direction: str, shards: list[np.ndarray]) -> list[np.ndarray]:
    """Pure index permutation between sequence-sharded and head-sharded layouts.

    Axis convention: (batch, sequence, heads, head_dim)."""
    P = len(shards)
    if P == 1:
        return [shards[0].copy()]
    base = shards[0].shape
    for x in shards:
        if x.shape != base:
            raise CollectiveError(f"mismatched shard shapes {x.shape} vs {base}")
    if direction == "seq_to_head":
        h_loc = base[2] // P
        return [
            np.concatenate(
                [shards[j][:, :, r * h_loc : (r + 1) * h_loc, :] for j in range(P)], axis=1
            )
            for r in range(P)
        ]
    if direction == "head_to_seq":
        s_loc = base[1] // P
        return [
            np.concatenate(
                [shards[j][:, r * s_loc : (r + 1) * s_loc, :, :] for j in range(P)], axis=2
            )
            for r in range(P)
        ]
    raise CollectiveError(f"unknown all-to-all direction {direction!r}")


@dataclass
class DeviceGroup:
    """Rendezvous point for simulated ranks; fires an exchange once all P
    shards for a (node, direction) descriptor have been submitted."""

    P: int
    collective_log: list[dict[str, Any]] = field(default_factory=list)
    _step: int = 0
    _pending: dict[tuple[int, str], dict[int, np.ndarray]] = field(default_factory=dict)
    _results: dict[tuple[int, str], list[np.ndarray]] = field(default_factory=dict)

    def submit(self, rank: int, node_id: int, direction: str, x: np.ndarray) -> None:
        key = (node_id, direction)
        if key in self._results:
            raise CollectiveError(f"rank {rank} re-entered collective at node {node_id}")
        pend = self._pending.setdefault(key, {})
        if rank in pend:
            raise CollectiveError(f"rank {rank} double-submitted at node {node_id}")
        if pend and next(iter(pend.values())).shape != x.shape:
            raise CollectiveError(f"mismatched shard specs at node {node_id}")
        pend[rank] = x
        if len(pend) == self.P:
            self._results[key] = all_to_all_shards(direction, [pend[r] for r in range(self.P)])
            self.collective_log.append(
                {
                    "step": self._step,
                    "op": f"all_to_all:{direction}",
                    "bytes": int(2 * (self.P - 1) / self.P * x.nbytes),
                    "ranks": list(range(self.P)),
                }
            )
            self._step += 1
            del self._pending[key]

    def ready(self, key: tuple[int, str]) -> bool:
        return key in self._results

    def take(self, key: tuple[int, str], rank: int) -> np.ndarray:
        out = self._results[key][rank]
        self._results[key][rank] = None  # type: ignore[call-overload]
        if all(v is None for v in self._results[key]):
            del self._results[key]
        return out


@dataclass
class _RankState:
    rank: int
    env: Arrays
    next_node: int = 0
    waiting_on: tuple[int, str] | None = None


def _run_lockstep(
    g: Graph, group: DeviceGroup, per_rank_inputs: list[Arrays], params: Arrays, dtype: type
) -> list[Arrays]:
    """Round-robin the ranks one node at a time so collectives stay matched."""
    states = [_RankState(r, {}) for r in range(group.P)]

    while any(st.next_node < len(g.nodes) for st in states):
        progressed = False
        for st in states:
            if st.next_node >= len(g.nodes):
                continue
            n = g.node(st.next_node)
            if st.waiting_on is not None:
                if not group.ready(st.waiting_on):
                    continue
                st.env[n.id] = group.take(st.waiting_on, st.rank)
                st.waiting_on = None
            elif n.kind is OpKind.INPUT:
                st.env[n.id] = per_rank_inputs[st.rank][n.id]
            elif n.kind is OpKind.PARAMETER:
                st.env[n.id] = np.asarray(params[n.id], dtype=dtype)
            elif n.kind is OpKind.ALL_TO_ALL:
                key = (n.id, n.attrs["direction"])
                group.submit(st.rank, n.id, key[1], st.env[n.inputs[0]])
                st.waiting_on = key
                progressed = True
                continue
            else:
                st.env[n.id] = eval_node(n, [st.env[i] for i in n.inputs], dtype, st.rank)
            st.next_node += 1
            progressed = True
        if not progressed:
            stuck = [(st.rank, st.next_node) for st in states if st.next_node < len(g.nodes)]
            raise CollectiveError(f"collective deadlock; ranks stuck at nodes {stuck}")

    return [st.env for st in states]


def shard_inputs(g: Graph, full_inputs: Arrays, P: int, dtype: type) -> list[Arrays]:
    """Contiguous-block sharding of every Sequence-bearing input across ranks."""
    per_rank: list[Arrays] = [{} for _ in range(P)]
    for n in g.nodes:
        if n.kind is not OpKind.INPUT:
            continue
        x = np.asarray(full_inputs[n.id], dtype=dtype)
        seq = n.out.find(AxisTag.SEQUENCE)
        if seq is None:
            for r in range(P):
                per_rank[r][n.id] = x
            continue
        s_loc = n.out.axes[seq].extent
        idx: list[Any] = [slice(None)] * x.ndim
        for r in range(P):
            idx[seq] = slice(r * s_loc, (r + 1) * s_loc)
            per_rank[r][n.id] = x[tuple(idx)].copy()
    return per_rank


def execute_ranks(
    g: Graph, group: DeviceGroup, full_inputs: Arrays, params: Arrays, precision: int = 64
) -> list[Arrays]:
    """Run any (possibly joint) graph on all ranks; returns per-rank values of
    the graph outputs, each rank holding its own sequence shard."""
    dtype = _dtype(precision)
    per_rank_inputs = shard_inputs(g, full_inputs, group.P, dtype)
    envs = _run_lockstep(g, group, per_rank_inputs, params, dtype)
    return [{o: env[o] for o in g.outputs} for env in envs]


def execute_sp(
    spg, group: DeviceGroup, full_inputs: Arrays, params: Arrays, precision: int = 64
) -> list[Arrays]:
    if group.P != spg.world_size:
        raise ValidationError(
            f"device group has {group.P} ranks, graph expects {spg.world_size}"
        )
    return execute_ranks(spg.graph, group, full_inputs, params, precision)


# ---------------------------------------------------------------------------
# planned execution with liveness-based freeing
# ---------------------------------------------------------------------------


def execute_with_plan(
    j: JointGraph,
    sched: ExecutionSchedule,
    inputs: Arrays,
    params: Arrays,
    precision: int = 64,
) -> tuple[Arrays, int]:
    """Execute a checkpointing schedule, freeing buffers at their analyzed
    lifetimes; returns (gradients by parameter id, measured peak live bytes)."""
    g = j.graph
    dtype = _dtype(precision)
    live = analyze_liveness(j, sched)

    leaf: Arrays = {}
    for n in g.nodes:
        if n.kind is OpKind.INPUT:
            leaf[n.id] = np.asarray(inputs[n.id], dtype=dtype)
        elif n.kind is OpKind.PARAMETER:
            leaf[n.id] = np.asarray(params[n.id], dtype=dtype)
        elif n.kind in SOURCE_KINDS:
            leaf[n.id] = eval_node(n, [], dtype)

    env: Arrays = {}
    live_bytes = 0
    peak = 0

    def value(i: int) -> np.ndarray:
        if i in env:
            return env[i]
        if i in leaf:
            return leaf[i]
        raise ValidationError(f"use-after-free of value {i} in schedule")

    for t, (nid, _) in enumerate(sched.phases):
        n = g.node(nid)
        if n.kind is OpKind.ALL_TO_ALL:
            raise CollectiveError(f"node {nid}: collectives require the multi-rank runner")
        out = eval_node(n, [value(i) for i in n.inputs], dtype)
        if nid not in env:
            live_bytes += n.out.bytes()
        env[nid] = out
        peak = max(peak, live_bytes)
        for dead in live.free_after[t]:
            del env[dead]
            live_bytes -= g.node(dead).out.bytes()

    param_ids = [n.id for n in g.nodes if n.kind is OpKind.PARAMETER]
    grads = {p: env[j.grad_map[p]] for p in param_ids if p in j.grad_map}
    return grads, peak


# ---------------------------------------------------------------------------
# finite differences and comparison helpers
# ---------------------------------------------------------------------------


def finite_diff_check(
    g: Graph,
    j: JointGraph,
    inputs: Arrays,
    params: Arrays,
    eps: float = 1e-5,
    max_coords: int = 64,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients,
    over at most max_coords sampled coordinates per parameter."""
    from .schedule import build_schedule, save_everything_ids

    sched = build_schedule(j, save_everything_ids(j))
    grads, _ = execute_with_plan(j, sched, inputs, params, precision=64)

    # the loss is the forward node whose gradient is the seed
    seed_id = j.grad_inputs[0]
    loss_id = next(f for f, gid in j.grad_map.items() if gid == seed_id)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for pid, analytic_grad in grads.items():
        base = np.asarray(params[pid], dtype=np.float64)
        flat = base.reshape(-1)
        coords = rng.choice(flat.size, size=min(max_coords, flat.size), replace=False)
        for c in coords:
            losses = []
            for delta in (eps, -eps):
                bumped = flat.copy()
                bumped[c] += delta
                p = dict(params)
                p[pid] = bumped.reshape(base.shape)
                losses.append(float(execute(g, inputs, p, precision=64)[loss_id]))
            numeric = (losses[0] - losses[1]) / (2 * eps)
            analytic = float(analytic_grad.reshape(-1)[c])
            denom = max(abs(numeric), abs(analytic), 1e-12)
            worst = max(worst, abs(numeric - analytic) / denom)
    return worst


def max_rel_err(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-12)
    return float(np.max(np.abs(a - b) / denom))


def assert_close(a: np.ndarray, b: np.ndarray, tol: float, what: str = "values") -> None:
    err = max_rel_err(a, b)
    if err > tol:
        raise EquivalenceError(f"{what} disagree: max relative error {err:.3e} > {tol:.0e}")
