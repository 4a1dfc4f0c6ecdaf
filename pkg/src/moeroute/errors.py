class MoeRouteError(Exception):
    """Base class for all errors raised by moeroute."""


class ParseError(MoeRouteError):
    """A config file could not be read or parsed."""


class ValidationError(MoeRouteError, ValueError):
    """A value violates a documented invariant. The message names the key."""


class DimensionError(MoeRouteError, ValueError):
    """Array shapes are inconsistent."""


class CountMismatch(MoeRouteError):
    """A collective's buffers disagree with the declared row counts."""


class PlanMismatch(MoeRouteError):
    """A redundancy-bypassing plan does not match the buffer it is applied to."""
