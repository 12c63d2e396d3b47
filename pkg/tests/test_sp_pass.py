import numpy as np
import pytest

from helpers import random_leaves

from seqcomp.errors import ValidationError
from seqcomp.executor import DeviceGroup, execute, execute_ranks, max_rel_err
from seqcomp.ir import AxisTag, OpKind
from seqcomp.sp_pass import SPConfig, infer_dims, transform_sp
from seqcomp.transformer import ModelDims, build_transformer_graph


def test_infer_dims_reads_input_and_attention():
    g = build_transformer_graph(ModelDims(b=4, s=1024, h=32, d=128, d_ffn=64, layers=1))
    d = infer_dims(g)
    assert (d.b, d.s, d.h, d.d, d.d_model) == (4, 1024, 32, 128, 4096)


def test_infer_dims_all_ones():
    g = build_transformer_graph(ModelDims(b=1, s=1, h=1, d=1, d_ffn=1, layers=1))
    d = infer_dims(g)
    assert (d.b, d.s, d.h, d.d) == (1, 1, 1, 1)


@pytest.mark.parametrize("seed", range(12))
def test_infer_dims_round_trip(seed):
    rng = np.random.default_rng(seed)
    dims = ModelDims(
        b=int(rng.integers(1, 4)),
        s=int(rng.integers(1, 9)) * 4,
        h=int(rng.choice([2, 4, 8])),
        d=int(rng.integers(1, 9)),
        d_ffn=int(rng.integers(1, 33)),
        layers=int(rng.integers(1, 4)),
    )
    d = infer_dims(build_transformer_graph(dims))
    assert (d.b, d.s, d.h, d.d, d.d_ffn, d.layers) == (
        dims.b, dims.s, dims.h, dims.d, dims.d_ffn, dims.layers,
    )


def test_collective_shapes_match_layout_toggle():
    g = build_transformer_graph(ModelDims(b=2, s=8, h=4, d=16, d_ffn=8, layers=1))
    spg = transform_sp(g, SPConfig(world_size=2))
    a2a = [n for n in spg.graph.nodes if n.kind is OpKind.ALL_TO_ALL]
    assert len(a2a) == 2
    assert a2a[0].attrs["direction"] == "seq_to_head"
    assert a2a[0].out.extents() == (2, 8, 2, 16)
    assert a2a[1].attrs["direction"] == "head_to_seq"
    assert a2a[1].out.extents() == (2, 4, 4, 16)


def test_two_collectives_per_layer():
    g = build_transformer_graph(ModelDims(b=1, s=8, h=4, d=4, d_ffn=8, layers=3))
    spg = transform_sp(g, SPConfig(world_size=4))
    assert sum(1 for n in spg.graph.nodes if n.kind is OpKind.ALL_TO_ALL) == 6


def test_world_size_one_is_identity():
    g = build_transformer_graph(ModelDims(b=1, s=8, h=2, d=4, d_ffn=8, layers=1))
    spg = transform_sp(g, SPConfig(world_size=1))
    assert spg.provenance == {}
    assert spg.graph is g


def test_indivisible_dims_rejected():
    g = build_transformer_graph(ModelDims(b=1, s=9, h=2, d=4, d_ffn=8, layers=1))
    with pytest.raises(ValidationError):
        transform_sp(g, SPConfig(world_size=2))
    g = build_transformer_graph(ModelDims(b=1, s=8, h=3, d=4, d_ffn=8, layers=1))
    with pytest.raises(ValidationError):
        transform_sp(g, SPConfig(world_size=2))


def test_idempotence_guard():
    g = build_transformer_graph(ModelDims(b=1, s=8, h=2, d=4, d_ffn=8, layers=1))
    spg = transform_sp(g, SPConfig(world_size=2))
    with pytest.raises(ValidationError):
        transform_sp(spg.graph, SPConfig(world_size=2))


def test_sequence_axes_sharded_outside_attention():
    dims = ModelDims(b=1, s=8, h=4, d=4, d_ffn=8, layers=2)
    spg = transform_sp(build_transformer_graph(dims), SPConfig(world_size=2))
    inside = set()
    for n in spg.graph.nodes:
        if n.kind is OpKind.ATTENTION_CORE:
            inside.add(n.id)
    for n in spg.graph.nodes:
        seq = n.out.find(AxisTag.SEQUENCE)
        if seq is None or n.kind is OpKind.CAUSAL_MASK_INDEX:
            continue
        if n.id in inside or (
            n.kind is OpKind.ALL_TO_ALL and n.attrs["direction"] == "seq_to_head"
        ):
            assert n.out.axes[seq].extent == 8
        else:
            assert n.out.axes[seq].extent == 4


def test_mask_stays_full():
    dims = ModelDims(b=1, s=8, h=4, d=4, d_ffn=8, layers=1)
    spg = transform_sp(build_transformer_graph(dims), SPConfig(world_size=2))
    mask = next(n for n in spg.graph.nodes if n.kind is OpKind.CAUSAL_MASK_INDEX)
    assert mask.out.extents() == (8, 8)


def test_position_index_rank_offset():
    dims = ModelDims(b=1, s=8, h=2, d=4, d_ffn=8, layers=1)
    spg = transform_sp(build_transformer_graph(dims), SPConfig(world_size=2))
    pos = next(n for n in spg.graph.nodes if n.kind is OpKind.POSITION_INDEX)
    assert pos.attrs["length"] == 4
    assert pos.attrs["rank_stride"] == 4


@pytest.mark.parametrize("P", [2, 4])
def test_sp_forward_equivalence(P):
    rng = np.random.default_rng(P)
    dims = ModelDims(b=2, s=16, h=4, d=4, d_ffn=16, layers=2)
    g = build_transformer_graph(dims)
    inputs, params = random_leaves(g, rng)
    ref = execute(g, inputs, params)

    spg = transform_sp(g, SPConfig(world_size=P))
    outs = execute_ranks(
        spg.graph, DeviceGroup(P=P), spg.remap_leaves(inputs), spg.remap_leaves(params)
    )
    hidden = np.concatenate([o[spg.graph.outputs[0]] for o in outs], axis=1)
    assert max_rel_err(ref[g.outputs[0]], hidden) <= 1e-12
    loss = sum(o[spg.graph.outputs[1]] for o in outs)
    assert max_rel_err(ref[g.outputs[1]], loss) <= 1e-12
