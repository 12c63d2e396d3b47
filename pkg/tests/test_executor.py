import numpy as np
import pytest

from helpers import random_joint_graph, random_leaves

from seqcomp.ac_pass import AcMode, apply_plan, plan_checkpoints
from seqcomp.errors import CollectiveError
from seqcomp.executor import (
    DeviceGroup,
    all_to_all_shards,
    execute,
    execute_ranks,
    execute_with_plan,
    max_rel_err,
    shard_inputs,
)
from seqcomp.ir import OpKind
from seqcomp.schedule import analyze_liveness, build_schedule, save_everything_ids
from seqcomp.transformer import ModelDims, build_transformer_graph


@pytest.mark.parametrize("P", [2, 4])
def test_all_to_all_round_trip(P):
    rng = np.random.default_rng(P)
    shards = [rng.standard_normal((2, 8 // P, 4, 3)) for _ in range(P)]
    mid = all_to_all_shards("seq_to_head", shards)
    back = all_to_all_shards("head_to_seq", mid)
    for a, b in zip(shards, back):
        np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("P", [1, 2, 4])
def test_all_to_all_matches_global_slicing(P):
    rng = np.random.default_rng(10 + P)
    b, s, h, d = 2, 8, 4, 3
    full = rng.standard_normal((b, s, h, d))
    s_loc, h_loc = s // P, h // P
    shards = [full[:, r * s_loc : (r + 1) * s_loc] for r in range(P)]
    out = all_to_all_shards("seq_to_head", shards)
    for r in range(P):
        np.testing.assert_array_equal(out[r], full[:, :, r * h_loc : (r + 1) * h_loc, :])


def test_all_to_all_rejects_bad_direction_and_shapes():
    x = np.zeros((1, 2, 2, 1))
    with pytest.raises(CollectiveError):
        all_to_all_shards("sideways", [x, x])
    with pytest.raises(CollectiveError):
        all_to_all_shards("seq_to_head", [x, np.zeros((1, 2, 4, 1))])


def test_device_group_rejects_double_submit():
    group = DeviceGroup(P=2)
    group.submit(0, 5, "seq_to_head", np.zeros((1, 1, 2, 1)))
    with pytest.raises(CollectiveError):
        group.submit(0, 5, "seq_to_head", np.zeros((1, 1, 2, 1)))


def test_device_group_rejects_mismatched_shards():
    group = DeviceGroup(P=2)
    group.submit(0, 5, "seq_to_head", np.zeros((1, 1, 2, 1)))
    with pytest.raises(CollectiveError):
        group.submit(1, 5, "seq_to_head", np.zeros((1, 2, 2, 1)))


def test_collective_log_records_exchange_volume():
    group = DeviceGroup(P=4)
    x = np.zeros((1, 2, 4, 2))
    for r in range(4):
        group.submit(r, 9, "seq_to_head", x)
    assert len(group.collective_log) == 1
    rec = group.collective_log[0]
    assert rec["op"] == "all_to_all:seq_to_head"
    assert rec["bytes"] == int(2 * 3 / 4 * x.nbytes)
    assert rec["ranks"] == [0, 1, 2, 3]


def test_shard_inputs_replicates_sequence_free_tensors():
    g = build_transformer_graph(ModelDims(b=1, s=8, h=2, d=4, d_ffn=8, layers=1))
    from seqcomp.sp_pass import SPConfig, transform_sp

    spg = transform_sp(g, SPConfig(world_size=2))
    rng = np.random.default_rng(0)
    inputs, _ = random_leaves(g, rng)
    shards = shard_inputs(spg.graph, spg.remap_leaves(inputs), 2, np.float64)
    tok = next(n for n in spg.graph.nodes if n.kind is OpKind.INPUT)
    assert shards[0][tok.id].shape == (1, 4)
    assert shards[1][tok.id].shape == (1, 4)


def test_single_token_sequence_executes():
    g = build_transformer_graph(ModelDims(b=1, s=1, h=2, d=4, d_ffn=8, layers=1))
    rng = np.random.default_rng(3)
    inputs, params = random_leaves(g, rng)
    out = execute(g, inputs, params)
    assert np.isfinite(out[g.outputs[1]]).all()


def test_execute_refuses_collectives_single_device():
    from seqcomp.sp_pass import SPConfig, transform_sp

    g = build_transformer_graph(ModelDims(b=1, s=8, h=2, d=4, d_ffn=8, layers=1))
    spg = transform_sp(g, SPConfig(world_size=2))
    rng = np.random.default_rng(4)
    inputs, params = random_leaves(g, rng)
    rank0 = shard_inputs(spg.graph, spg.remap_leaves(inputs), 2, np.float64)[0]
    with pytest.raises(CollectiveError):
        execute(spg.graph, rank0, spg.remap_leaves(params))


def test_precision_controls_dtype():
    g = build_transformer_graph(ModelDims(b=1, s=4, h=2, d=4, d_ffn=8, layers=1))
    rng = np.random.default_rng(5)
    inputs, params = random_leaves(g, rng)
    out = execute(g, inputs, params, precision=32)
    assert out[g.outputs[0]].dtype == np.float32


@pytest.mark.parametrize("seed", range(8))
def test_planned_execution_matches_unplanned_gradients(seed):
    rng = np.random.default_rng(100 + seed)
    j = random_joint_graph(rng)
    inputs, params = random_leaves(j.graph, rng)
    ref = execute(j.graph, inputs, params)
    for mode in AcMode:
        plan = plan_checkpoints(j, mode)
        sched = apply_plan(j, plan)
        grads, peak = execute_with_plan(j, sched, inputs, params)
        for p, gval in grads.items():
            assert max_rel_err(ref[j.grad_map[p]], gval) <= 1e-12
        assert peak == analyze_liveness(j, sched).peak_bytes


@pytest.mark.parametrize("seed", range(4))
def test_save_everything_peak_matches_analysis(seed):
    rng = np.random.default_rng(200 + seed)
    j = random_joint_graph(rng)
    inputs, params = random_leaves(j.graph, rng)
    sched = build_schedule(j, save_everything_ids(j))
    _, peak = execute_with_plan(j, sched, inputs, params)
    assert peak == analyze_liveness(j, sched).peak_bytes


def test_lockstep_runner_executes_plain_graph():
    g = build_transformer_graph(ModelDims(b=1, s=8, h=2, d=4, d_ffn=8, layers=1))
    rng = np.random.default_rng(6)
    inputs, params = random_leaves(g, rng)
    ref = execute(g, inputs, params)
    outs = execute_ranks(g, DeviceGroup(P=1), inputs, params)
    assert max_rel_err(ref[g.outputs[1]], outs[0][g.outputs[1]]) == 0.0
