"""Exceptions shared across the package, mapped to CLI exit codes."""


class SeqcompError(Exception):
    exit_code = 1


class ValidationError(SeqcompError):
    """Malformed graph, config, or arguments."""

    exit_code = 2


class InfeasibleError(SeqcompError):
    """A requested plan or budget cannot be satisfied."""

    exit_code = 3


class EquivalenceError(SeqcompError):
    """Numeric disagreement between two programs expected to match."""

    exit_code = 4


class CollectiveError(SeqcompError):
    """Ranks disagree during a simulated collective."""

    exit_code = 2
