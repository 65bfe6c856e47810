"""Exception types raised across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf reached a place where only finite values are allowed."""


class GraphStateError(RuntimeError):
    """The autodiff graph was used in an invalid order (e.g. a second sweep)."""


class ConfigError(ValueError):
    """Invalid configuration value or combination."""


class BuildError(ConfigError):
    """A model specification could not be assembled into a shape-consistent chain."""


class SeqbFormatError(ValueError):
    """Malformed seqb container. ``offset`` is the byte position of the fault."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset
