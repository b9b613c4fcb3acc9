"""Exception hierarchy shared by every module of the package."""

from __future__ import annotations


class ConvExprError(Exception):
    """Base class for all errors raised by convexpr."""


class ParseError(ConvExprError, ValueError):
    """A conv_einsum string is malformed or violates an expression invariant.

    ``position`` is the 0-based offset into the original source string
    (whitespace included) where the problem was detected.
    """

    def __init__(self, message: str, source: str = "", position: int = 0):
        self.message = message
        self.source = source
        self.position = position
        super().__init__(f"{message} (at position {position})")

    def pointer(self) -> str:
        """Two-line rendering of the source with a caret under the offending column."""
        return f"{self.source}\n{' ' * self.position}^"


class ShapeError(ConvExprError, ValueError):
    """Tensor dimensions are inconsistent with an expression or operation."""


class ConvModeError(ConvExprError, ValueError):
    """A convolution mode is not permitted for the atom it is applied to."""


class PlanningError(ConvExprError):
    """The planner cannot handle the request (too many inputs, malformed plan)."""


class LayerError(ConvExprError, ValueError):
    """A layer descriptor is invalid for the requested layer kind."""
