"""Exception hierarchy for the minimal-surface pipeline."""


class MinsurfError(Exception):
    """Base class for every error raised by this package."""


class NonPositiveDensity(MinsurfError):
    pass


class SingularM(MinsurfError):
    pass


class OutOfTube(MinsurfError):
    pass


class NoConvergence(MinsurfError):
    pass


class LineSearchStall(MinsurfError):
    pass


class SingularOperator(MinsurfError):
    pass


class EigenSolverFail(MinsurfError):
    pass


class CannotShrink(MinsurfError):
    pass


class SelectionFail(MinsurfError):
    pass


class CoverageFail(MinsurfError):
    pass


class Divergence(MinsurfError):
    pass


class UnknownKind(MinsurfError):
    pass


class ConfigError(MinsurfError):
    """Raised when a configuration does not validate; carries the offending field."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field
