"""Exception types raised across the toolkit."""


class HpflexError(Exception):
    """Base class for all toolkit errors."""


class DataError(HpflexError):
    """Input data is unusable (CLI exit code 3)."""


class ParseError(DataError):
    pass


class MonotonicityError(DataError):
    pass


class GapError(DataError):
    pass


class CoverageError(DataError):
    pass


class LengthError(DataError, ValueError):
    pass


class DegenerateClusterError(DataError):
    """Switching extrema do not separate into on/noise/off clusters."""


class UndefinedEdge(HpflexError, ZeroDivisionError):
    pass


class EmptySetError(DataError, ValueError):
    pass


class InsufficientDataError(DataError):
    pass


class SlopeSignError(DataError):
    pass


class NonConvergenceError(DataError):
    pass


class ZeroLossError(HpflexError):
    pass


class InfeasibleStateError(HpflexError):
    pass


class IneligibleBuildingError(HpflexError, ValueError):
    def __init__(self, ids):
        self.ids = sorted(ids)
        super().__init__(f"buildings not eligible for the requested throttle: {self.ids}")


class ZeroReferenceError(DataError, ZeroDivisionError):
    pass


class ExtrapolationWarning(UserWarning):
    """A rate model was evaluated outside its validity temperature range."""


class ConfigError(HpflexError):
    """Bad configuration or usage (CLI exit code 2)."""
