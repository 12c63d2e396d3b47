"""seqcomp: tensor-program compiler passes and a multi-rank simulator for
long-context transformer training.

Pipeline: build a high-level transformer graph, optionally shard it across
ranks with head/sequence all-to-all exchanges, lower it, differentiate it,
pick a set of activations to keep with a min-cut, and execute or cost-model
the result.
"""

from .errors import (
    CollectiveError,
    EquivalenceError,
    InfeasibleError,
    SeqcompError,
    ValidationError,
)
from .ir import Axis, AxisTag, Graph, Level, Node, OpKind, TensorSpec

__all__ = [
    "Axis",
    "AxisTag",
    "CollectiveError",
    "EquivalenceError",
    "Graph",
    "InfeasibleError",
    "Level",
    "Node",
    "OpKind",
    "SeqcompError",
    "TensorSpec",
    "ValidationError",
]

__version__ = "0.1.0"
