"""Command-line surface: build graphs, run passes, check equivalence, plan
checkpointing, and emit cost reports. Everything flows through JSON files so
artifacts are diff-able and runs are reproducible."""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import cost_model
from .ac_pass import AcMode, build_flow_network, plan_checkpoints
from .autodiff import JointGraph, build_joint_graph
from .errors import SeqcompError, ValidationError
from .executor import DeviceGroup, assert_close, execute, execute_ranks, max_rel_err
from .ir import AxisTag, OpKind, dumps, graph_from_json, graph_to_json
from .lowering import lower
from .sp_pass import SPConfig, SPGraph, transform_sp
from .transformer import ModelDims, build_transformer_graph

PRESETS = {
    # rough shape analogs of small open decoder models
    "llama-1b-like": {"b": 1, "h": 32, "d": 64, "d_ffn": 8192, "layers": 16},
    "llama-3b-like": {"b": 1, "h": 24, "d": 128, "d_ffn": 8192, "layers": 28},
    "llama-8b-like": {"b": 1, "h": 32, "d": 128, "d_ffn": 14336, "layers": 32},
}

AC_MODES = {
    "conservative": AcMode.CONSERVATIVE,
    "seq-aware": AcMode.SEQ_AWARE_NON_ATTENTION,
    "seq-aware-all": AcMode.SEQ_AWARE_ALL,
}


def _load_dims(args) -> ModelDims:
    fields: dict = {}
    if args.config:
        cfg = json.loads(Path(args.config).read_text())
        presets = {**PRESETS, **cfg.get("presets", {})}
        if args.preset:
            fields.update(presets[args.preset])
        fields.update(cfg.get("dims", {}))
    elif args.preset:
        fields.update(PRESETS[args.preset])
    for key in ("b", "s", "h", "d", "d_ffn", "layers"):
        v = getattr(args, key if key != "s" else "seq", None)
        if v is not None:
            fields[key] = v
    missing = [k for k in ("b", "s", "h", "d", "d_ffn", "layers") if k not in fields]
    if missing:
        raise ValidationError(f"missing dimensions: {', '.join(missing)}")
    return ModelDims(**fields)


def _dims_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with presets/dims objects")
    p.add_argument("--preset", choices=sorted(PRESETS), help="named model shape")
    p.add_argument("-s", "--seq", type=int, help="sequence length")
    p.add_argument("-b", type=int, help="batch size")
    p.add_argument("--h", type=int, help="head count")
    p.add_argument("--d", type=int, help="head dimension")
    p.add_argument("--d-ffn", dest="d_ffn", type=int, help="MLP hidden dimension")
    p.add_argument("--layers", type=int, help="transformer block count")


def _seed(args) -> int:
    if args.seed is not None:
        return args.seed
    return int(os.environ.get("SEQCOMP_SEED", "0"))


def _write(path: str, text: str) -> None:
    Path(path).write_text(text)


def _read_graph(path: str):
    return graph_from_json(json.loads(Path(path).read_text()))


def cmd_build(args) -> int:
    dims = _load_dims(args)
    g = build_transformer_graph(dims)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write(out / "high.json", dumps(graph_to_json(g)))
    low = lower(g)
    _write(out / "low.json", dumps(graph_to_json(low)))
    _write(out / "joint.json", build_joint_graph(low).dumps())
    print(f"wrote high/low/joint graphs to {out}")
    return 0


def cmd_lower(args) -> int:
    g = _read_graph(args.graph)
    _write(args.out, dumps(graph_to_json(lower(g))))
    return 0


def cmd_transform(args) -> int:
    g = _read_graph(args.graph)
    spg = transform_sp(g, SPConfig(world_size=args.world_size))
    _write(args.dump_sp_graph or args.out, spg.dumps())
    print(
        f"world_size={spg.world_size}, "
        f"{sum(1 for n in spg.graph.nodes if n.kind is OpKind.ALL_TO_ALL)} collectives inserted"
    )
    return 0


def _random_leaves(g, rng: np.random.Generator):
    inputs, params = {}, {}
    for n in g.nodes:
        if n.kind is OpKind.INPUT:
            inputs[n.id] = rng.integers(0, 64, size=n.out.extents()).astype(np.float64)
        elif n.kind is OpKind.PARAMETER:
            params[n.id] = rng.standard_normal(n.out.extents()) * 0.1
    return inputs, params


def cmd_check(args) -> int:
    g = _read_graph(args.original)
    spg = SPGraph.from_json(json.loads(Path(args.sp_graph).read_text()))
    precision = args.precision
    tol = 1e-12 if precision == 64 else 1e-4
    rng = np.random.default_rng(_seed(args))
    inputs, params = _random_leaves(g, rng)

    ref = execute(g, inputs, params, precision=precision)
    group = DeviceGroup(P=args.ranks)
    outs = execute_ranks(
        spg.graph, group, spg.remap_leaves(inputs), spg.remap_leaves(params),
        precision=precision,
    )

    worst = 0.0
    for ref_o, sp_o in zip(g.outputs, spg.graph.outputs):
        seq = g.node(ref_o).out.find(AxisTag.SEQUENCE)
        if seq is None:
            # sequence-reduced values (the loss) sum across shards
            merged = sum(o[sp_o] for o in outs)
        else:
            merged = np.concatenate([o[sp_o] for o in outs], axis=seq)
        assert_close(ref[ref_o], merged, tol, what=f"output {ref_o}")
        worst = max(worst, max_rel_err(ref[ref_o], merged))
    print(f"check passed: max relative error {worst:.3e} <= {tol:.0e}")
    return 0


def cmd_plan(args) -> int:
    j = JointGraph.from_json(json.loads(Path(args.joint).read_text()))
    mode = AC_MODES[args.ac_mode]
    if args.dump_flow:
        _write(args.dump_flow, build_flow_network(j, mode).dumps())
    plan = plan_checkpoints(j, mode)
    _write(args.dump_plan or args.out, plan.dumps())
    print(
        f"mode={mode.value}: saved {len(plan.saved)} values "
        f"({plan.cut_value} bytes), {len(plan.recompute_schedule)} nodes recomputed"
    )
    return 0


def cmd_report(args) -> int:
    dims = _load_dims(args)
    sp_dims = replace(dims, world_size=args.world_size)
    mode = AC_MODES[args.ac_mode]

    def row(strategy: str):
        P = args.world_size if strategy != "NoSP" else 1
        j = cost_model._joint_for(replace(sp_dims, world_size=P), P)
        plan = plan_checkpoints(j, mode) if strategy == "SP+SAC" else None
        return cost_model.cost_report(
            sp_dims, j, plan,
            optimizer_multiplier=args.optimizer_multiplier,
            budget=args.budget_bytes, strategy=strategy, world_size=args.world_size,
        )

    rows = {s: row(s) for s in (args.strategy,) if args.strategy != "ablation"}
    if args.strategy == "ablation":
        rows = {s: row(s) for s in ("SP", "SP+SAC")}
        if rows["SP"].get("max_seq"):
            rows["ratio"] = rows["SP+SAC"]["max_seq"] / rows["SP"]["max_seq"]
    _write(args.out, dumps(rows))
    print(f"wrote report to {args.out}")
    return 0


def cmd_max_seq(args) -> int:
    dims = _load_dims(args)
    q = cost_model.TrainabilityQuery(
        dims=dims,
        budget=args.budget_bytes,
        strategy=args.strategy,
        world_size=args.world_size,
        ac_mode=AC_MODES[args.ac_mode],
        optimizer_multiplier=args.optimizer_multiplier,
    )
    print(cost_model.max_trainable_seq(q))
    return 0


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="seqcomp", description=__doc__)
    p.add_argument("--seed", type=int, default=None, help="RNG seed (or SEQCOMP_SEED)")
    sub = p.add_subparsers(dest="command", required=True)

    b = sub.add_parser("build", help="build high/low/joint graphs for a model")
    _dims_args(b)
    b.add_argument("-o", "--out-dir", default=".", help="output directory")
    b.set_defaults(fn=cmd_build)

    lw = sub.add_parser("lower", help="lower a high graph")
    lw.add_argument("graph")
    lw.add_argument("-o", "--out", required=True)
    lw.set_defaults(fn=cmd_lower)

    t = sub.add_parser("transform", help="apply the sequence-parallel rewrite")
    t.add_argument("graph")
    t.add_argument("--world-size", type=int, required=True)
    t.add_argument("--dump-sp-graph", help="output path for the rewritten graph")
    t.add_argument("-o", "--out", default="sp.json")
    t.set_defaults(fn=cmd_transform)

    c = sub.add_parser("check", help="multi-rank vs single-device equivalence")
    c.add_argument("original")
    c.add_argument("sp_graph")
    c.add_argument("--ranks", type=int, required=True)
    c.add_argument("--precision", type=int, choices=(32, 64), default=64)
    c.set_defaults(fn=cmd_check)

    pl = sub.add_parser("plan", help="min-cut checkpointing plan for a joint graph")
    pl.add_argument("joint")
    pl.add_argument("--ac-mode", choices=sorted(AC_MODES), default="seq-aware")
    pl.add_argument("--dump-flow", help="output path for the flow network")
    pl.add_argument("--dump-plan", help="output path for the plan")
    pl.add_argument("-o", "--out", default="plan.json")
    pl.set_defaults(fn=cmd_plan)

    r = sub.add_parser("report", help="FLOPs/memory/trainability cost report")
    _dims_args(r)
    r.add_argument("--world-size", type=int, default=1)
    r.add_argument("--ac-mode", choices=sorted(AC_MODES), default="seq-aware")
    r.add_argument("--budget-bytes", type=int)
    r.add_argument("--optimizer-multiplier", type=int,
                   default=cost_model.DEFAULT_OPTIMIZER_MULTIPLIER)
    r.add_argument("--strategy", choices=("NoSP", "SP", "SP+SAC", "ablation"), default="SP")
    r.add_argument("-o", "--out", default="report.json")
    r.set_defaults(fn=cmd_report)

    m = sub.add_parser("max-seq", help="largest sequence fitting a byte budget")
    _dims_args(m)
    m.add_argument("--world-size", type=int, default=1)
    m.add_argument("--ac-mode", choices=sorted(AC_MODES), default="seq-aware")
    m.add_argument("--budget-bytes", type=int, required=True)
    m.add_argument("--optimizer-multiplier", type=int,
                   default=cost_model.DEFAULT_OPTIMIZER_MULTIPLIER)
    m.add_argument("--strategy", choices=("NoSP", "SP", "SP+SAC"), default="SP")
    m.set_defaults(fn=cmd_max_seq)
    return p


def main(argv: list[str] | None = None) -> int:
    args = make_parser().parse_args(argv)
    try:
        return args.fn(args)
    except SeqcompError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
