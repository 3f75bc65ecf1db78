"""Exception types shared across the package."""


class StreetNavError(Exception):
    """Base class for all errors raised by this package."""


class GraphError(StreetNavError):
    """Unknown node id or structurally invalid graph."""


class StateError(StreetNavError):
    """Agent state violates the heading-on-edge invariant."""


class PolicyProtocolError(StreetNavError):
    """A policy callback returned something that is not a valid action."""


class FeatureStoreError(StreetNavError):
    """Missing node, wrong dims, or invalid content in a panorama feature store."""


class ShapeError(StreetNavError):
    """Tensor operands with incompatible shapes."""


class OptimizerError(StreetNavError):
    """Optimizer invoked on parameters without gradients."""


class GradCheckError(StreetNavError):
    """Gradient checking failed its preconditions (e.g. stochastic function)."""


class VocabError(StreetNavError):
    """Token id outside the tokenizer vocabulary."""


class ConfigError(StreetNavError):
    """Invalid or inconsistent configuration values."""


class MetricError(StreetNavError):
    """Metric preconditions violated (disconnected nodes, degenerate variance)."""


class DataError(StreetNavError):
    """Malformed instance, trajectory, or dataset file."""


class WorldGenError(StreetNavError):
    """World generation could not satisfy the requested constraints."""
