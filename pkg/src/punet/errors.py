"""Exception hierarchy shared across the library."""


class PunetError(Exception):
    """Base class for all library errors."""


class ShapeMismatch(PunetError, ValueError):
    pass


class DomainError(PunetError, ValueError):
    pass


class InvalidConfig(PunetError, ValueError):
    pass


class GraphError(PunetError, RuntimeError):
    pass


class NumericalOverflow(PunetError, ArithmeticError):
    """Raised when a computation leaves the finite range.

    ``where`` carries optional context (epoch, batch, op name) so the trainer
    can report the point of divergence.
    """

    def __init__(self, message, where=None):
        super().__init__(message)
        self.where = dict(where or {})


class FormatError(PunetError, ValueError):
    pass


class CheckpointError(PunetError, ValueError):
    pass
