"""Exception hierarchy shared by all modules."""

from __future__ import annotations


class SpfclustError(Exception):
    """Base class for every error raised by the package."""


# graph
class GraphError(SpfclustError, ValueError):
    pass


class DisconnectedGraph(GraphError):
    def __init__(self, components):
        self.components = [sorted(c) for c in components]
        super().__init__(f"graph is disconnected; components: {self.components}")


class DuplicateEdge(GraphError):
    pass


class SelfLoop(GraphError):
    pass


class IndexOutOfRange(GraphError):
    pass


class MissingWeight(GraphError):
    pass


class EdgeNotInTree(GraphError):
    pass


# moves
class NoEligibleEdge(SpfclustError):
    pass


class InvalidQ(SpfclustError, ValueError):
    pass


# lgm
class ModelError(SpfclustError, ValueError):
    pass


class PeriodTooLarge(ModelError):
    pass


class NonStationaryRho(ModelError):
    pass


class UnboundHyper(ModelError):
    pass


class ShapeMismatch(ModelError):
    pass


class NegativeCount(ModelError):
    pass


# laplace
class NoConvergence(SpfclustError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class SingularHessian(SpfclustError):
    pass


class OptimFailed(SpfclustError):
    pass


# sampler
class MissingMarginal(SpfclustError, KeyError):
    pass


# posterior
class EmptyTrace(SpfclustError, ValueError):
    pass


class LengthMismatch(SpfclustError, ValueError):
    pass


# cli / io
class DataError(SpfclustError, ValueError):
    pass


class MissingCell(DataError):
    pass


class UnknownRegion(DataError):
    pass


class NonIntegerCount(DataError):
    pass


class RegionMismatch(DataError):
    pass


class TraceCorrupt(DataError):
    pass


class ConfigError(SpfclustError, ValueError):
    pass
