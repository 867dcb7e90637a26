"""Exception types raised across the simulator."""


class ShapeError(ValueError):
    """Input or parameter dimensions do not match the network layout."""


class DomainError(ValueError):
    """Argument outside the domain of an operation."""


class NumericError(ArithmeticError):
    """A computation produced non-finite values."""


class FormatError(ValueError):
    """Malformed binary or text input."""


class ConsistencyError(ValueError):
    """Two inputs that must agree do not."""


class PartitionError(ValueError):
    """A dataset cannot be partitioned as requested."""


class ProtocolError(RuntimeError):
    """A protocol step was called with inconsistent state."""


class ConfigError(ValueError):
    """Experiment configuration is invalid."""
