"""Exception hierarchy shared by every raana module."""

from __future__ import annotations


class RaanaError(Exception):
    """Base class for all errors raised by this package."""


class InvalidDimensionError(RaanaError, ValueError):
    pass


class InvalidInputError(RaanaError, ValueError):
    pass


class InvalidBitWidthError(RaanaError, ValueError):
    pass


class CodeRangeError(RaanaError, ValueError):
    """A code value does not fit in the requested number of bits."""


class CorruptDataError(RaanaError, ValueError):
    pass


class CorruptFileError(CorruptDataError):
    """A container file failed validation.

    ``section`` names the part of the file being parsed and ``offset`` is
    the byte position where parsing failed.
    """

    def __init__(self, message: str, section: str = "", offset: int | None = None):
        self.section = section
        self.offset = offset
        where = []
        if section:
            where.append(f"section {section!r}")
        if offset is not None:
            where.append(f"offset {offset}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class UnsupportedFormatError(RaanaError, ValueError):
    pass


class InvalidRecordError(RaanaError, ValueError):
    pass


class InvalidConfigError(RaanaError, ValueError):
    pass


class InfeasibleBudgetError(RaanaError, ValueError):
    """The bit budget cannot cover even the smallest candidate bit-width."""

    def __init__(self, budget: int, minimal_budget: int):
        self.budget = budget
        self.minimal_budget = minimal_budget
        super().__init__(
            f"bit budget {budget} is infeasible; the minimal feasible budget is {minimal_budget}"
        )


class InstanceTooLargeError(RaanaError, ValueError):
    pass
