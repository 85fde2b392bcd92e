"""Exception types raised by swbesov."""


class ValidationError(ValueError):
    """A parameter or configuration violates a stated inequality.

    ``inequality`` names the violated condition so that callers (and the
    command line harness) can report it verbatim.
    """

    def __init__(self, message, inequality=None):
        super().__init__(message)
        self.inequality = inequality


class GridMismatchError(ValueError):
    pass


class UndefinedAtZeroError(ValueError):
    """A symbol without a value at the zero frequency met a field with a mean."""


class BlockRangeError(IndexError):
    pass


class CFLError(RuntimeError):
    pass


class VacuumError(RuntimeError):
    """Density left the admissible band around the reference state."""

    def __init__(self, message, min_density=None):
        super().__init__(message)
        self.min_density = min_density
