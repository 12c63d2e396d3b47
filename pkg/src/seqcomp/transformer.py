"""Decoder-only transformer construction at the high IR level.

The layout mirrors the usual Llama-style block: RMSNorm, a shared projection
feeding self-attention (q = k = v for this reference model, so a single value
crosses each attention boundary), an output projection, a second RMSNorm, and
a silu-gated-free two-linear MLP, with residual adds around both halves. A
sum-of-squares Loss makes the graph end in a scalar.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import ValidationError
from .ir import AxisTag, Graph, GraphBuilder, Level, OpKind, scalar_spec, spec

DEFAULT_VOCAB = 64


@dataclass(frozen=True)
class ModelDims:
    b: int
    s: int
    h: int
    d: int
    d_ffn: int
    layers: int
    world_size: int = 1
    vocab: int = DEFAULT_VOCAB
    d_model: int = field(default=0)

    def __post_init__(self) -> None:
        dm = self.d_model or self.h * self.d
        object.__setattr__(self, "d_model", dm)
        for name in ("b", "s", "h", "d", "d_ffn", "layers", "world_size", "vocab"):
            if getattr(self, name) < 1:
                raise ValidationError(f"dimension {name} must be positive")
        if dm != self.h * self.d:
            raise ValidationError(f"d_model {dm} != h*d = {self.h * self.d}")


def build_transformer_graph(dims: ModelDims) -> Graph:
    b, s, dm = dims.b, dims.s, dims.d_model
    g = GraphBuilder(Level.HIGH)

    ids = g.add(OpKind.INPUT, (), spec(("Batch", b), ("Sequence", s)), {"name": "token_ids"})
    table = g.add(
        OpKind.PARAMETER,
        (),
        spec(("Vocab", dims.vocab), ("Model", dm)),
        {"name": "embed_table"},
    )
    x = g.add(OpKind.EMBEDDING, (ids, table), spec(("Batch", b), ("Sequence", s), ("Model", dm)))

    # additive raw-position signal; its index op is what the SP rewrite re-offsets
    pos = g.add(
        OpKind.POSITION_INDEX,
        (),
        spec(("Sequence", s)),
        {"start": 0, "length": s, "rank_stride": 0},
    )
    pos2 = g.add(OpKind.RESHAPE, (pos,), spec(("Sequence", s), ("Free", 1)))
    x = g.add(OpKind.ELEMENTWISE, (x, pos2), g.nodes[x].out, {"fn": "add"})

    mask = g.add(OpKind.CAUSAL_MASK_INDEX, (), spec(("Sequence", s), ("Free", s)))

    hidden = g.nodes[x].out
    split = spec(("Batch", b), ("Sequence", s), ("Heads", dims.h), ("HeadDim", dims.d))
    for layer in range(dims.layers):
        resid = x
        w_n1 = g.add(OpKind.PARAMETER, (), spec(("Model", dm)), {"name": f"l{layer}.norm1.w"})
        x = g.add(OpKind.RMS_NORM, (x, w_n1), hidden)

        w_qkv = g.add(
            OpKind.PARAMETER, (), spec(("Model", dm), ("Free", dm)), {"name": f"l{layer}.qkv.w"}
        )
        x = g.add(OpKind.LINEAR, (x, w_qkv), hidden)
        x = g.add(OpKind.RESHAPE, (x,), split)
        x = g.add(OpKind.ATTENTION_CORE, (x, mask), split)
        x = g.add(OpKind.RESHAPE, (x,), hidden)

        w_o = g.add(
            OpKind.PARAMETER, (), spec(("Model", dm), ("Free", dm)), {"name": f"l{layer}.out.w"}
        )
        x = g.add(OpKind.LINEAR, (x, w_o), hidden)
        x = g.add(OpKind.ELEMENTWISE, (x, resid), hidden, {"fn": "add"})

        resid = x
        w_n2 = g.add(OpKind.PARAMETER, (), spec(("Model", dm)), {"name": f"l{layer}.norm2.w"})
        x = g.add(OpKind.RMS_NORM, (x, w_n2), hidden)
        w_up = g.add(
            OpKind.PARAMETER,
            (),
            spec(("FFN", dims.d_ffn), ("Free", dm)),
            {"name": f"l{layer}.mlp.up.w"},
        )
        up = g.add(
            OpKind.LINEAR,
            (x, w_up),
            spec(("Batch", b), ("Sequence", s), ("FFN", dims.d_ffn)),
        )
        up = g.add(OpKind.ELEMENTWISE, (up,), g.nodes[up].out, {"fn": "silu"})
        w_down = g.add(
            OpKind.PARAMETER,
            (),
            spec(("Model", dm), ("Free", dims.d_ffn)),
            {"name": f"l{layer}.mlp.down.w"},
        )
        x = g.add(OpKind.LINEAR, (up, w_down), hidden)
        x = g.add(OpKind.ELEMENTWISE, (x, resid), hidden, {"fn": "add"})

    loss = g.add(OpKind.LOSS, (x,), scalar_spec())
    return g.finish([x, loss])


def parameter_ids(g: Graph) -> list[int]:
    return [n.id for n in g.nodes if n.kind is OpKind.PARAMETER]


def data_input_ids(g: Graph) -> list[int]:
    return [n.id for n in g.nodes if n.kind is OpKind.INPUT]


def sequence_axis(g: Graph, nid: int) -> int | None:
    return g.node(nid).out.find(AxisTag.SEQUENCE)
