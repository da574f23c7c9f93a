"""
Exception hierarchy for snake-refine.

Every error carries the process exit code the CLI reports for it.
"""

from typing import Optional


class SnakeRefineError(Exception):
    """Base class for all snake-refine errors"""
    exit_code = 1


# ─── Graph construction ──────────────────────────────────────────

class GraphError(SnakeRefineError, ValueError):
    """Invalid annotation graph"""
    exit_code = 2


class VertexIndexError(GraphError):
    """Edge references a vertex index that does not exist"""


class DuplicateEdgeError(GraphError):
    """The same undirected edge appears twice"""


class SelfLoopError(GraphError):
    """Edge connects a vertex to itself"""


class EmptyGraphError(GraphError):
    """Operation needs at least one vertex"""


# ─── Configuration and IO ────────────────────────────────────────

class ConfigError(SnakeRefineError, ValueError):
    """Unknown key or invalid value in a run configuration"""
    exit_code = 2


class FormatError(SnakeRefineError, OSError):
    """Malformed or unreadable graph/volume file"""
    exit_code = 3


# ─── Numerics ────────────────────────────────────────────────────

class SolverError(SnakeRefineError, RuntimeError):
    """Snake solver failure"""
    exit_code = 5


class NonFiniteGradientError(SolverError):
    """External-energy gradient is NaN or infinite at a vertex"""

    def __init__(self, vertex: int, message: Optional[str] = None):
        self.vertex = vertex
        super().__init__(message or f"Non-finite gradient at vertex {vertex}")


class TapeMismatchError(SolverError):
    """Recorded tape does not belong to the coordinates or system it is used with"""


class DivergenceError(SnakeRefineError, ArithmeticError):
    """Snake or training run left the stable regime"""
    exit_code = 4

    def __init__(self, step: int, message: Optional[str] = None):
        self.step = step
        super().__init__(message or f"Diverged at step {step}")


class MetricError(SnakeRefineError, ValueError):
    """Metric undefined for the given inputs"""
    exit_code = 2


class FixtureError(SnakeRefineError, RuntimeError):
    """Synthetic fixture could not be generated"""
    exit_code = 5
