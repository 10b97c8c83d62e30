"""Exception types shared across the package."""


class HeadOffloadError(Exception):
    """Base class for every error raised by this package."""


class ParseError(HeadOffloadError):
    """A configuration file could not be read or decoded."""


class InvalidSpec(HeadOffloadError):
    """A descriptor violates one of its invariants."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class UnresolvedPolicy(HeadOffloadError):
    """An adaptive policy reached code that needs a concrete one."""


class Infeasible(HeadOffloadError):
    """No configuration fits within the memory budget."""


class CapacityExceeded(HeadOffloadError):
    """An arena or cache would grow past its pre-allocated capacity."""


class ShapeMismatch(HeadOffloadError):
    """Matrix operands have incompatible shapes."""
