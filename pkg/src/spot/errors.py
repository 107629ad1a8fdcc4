"""Structured exception types shared across the package."""


class SpotError(Exception):
    """Base class for all package errors."""


class ShapeError(SpotError):
    """Operand shapes violate an operation's contract."""


class DomainError(SpotError):
    """Numeric input outside an operation's domain (log of non-positive, div by zero, ...)."""


class GraphError(SpotError):
    """Misuse of the autodiff graph (non-scalar backward, unrecorded loss, ...)."""


class DistributionError(SpotError):
    """Invalid distribution specification (non-SPD covariance, bad weights, ...)."""


class DatasetError(SpotError):
    """Dataset construction or minibatch request violates its contract."""


class ConvergenceError(SpotError):
    """An iterative solver hit its iteration cap before reaching tolerance."""

    def __init__(self, msg, residual=None):
        super().__init__(msg)
        self.residual = residual


class DivergenceError(SpotError):
    """Training produced a non-finite or absurdly large loss; carries last diagnostics."""

    def __init__(self, msg, diagnostics=None):
        super().__init__(msg)
        self.diagnostics = diagnostics


class ConfigError(SpotError):
    """Malformed run configuration; carries the offending line number when known."""

    def __init__(self, msg, line=None):
        if line is not None:
            msg = f"line {line}: {msg}"
        super().__init__(msg)
        self.line = line


class CheckpointError(SpotError):
    """Corrupt, truncated, or wrong-version checkpoint; carries the byte offset when known."""

    def __init__(self, msg, offset=None):
        if offset is not None:
            msg = f"{msg} (byte offset {offset})"
        super().__init__(msg)
        self.offset = offset
