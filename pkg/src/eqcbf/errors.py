"""Exception types raised across the package."""


class EqcbfError(Exception):
    """Base class for all package errors."""


class NonFiniteState(EqcbfError):
    pass


class UnknownSystem(EqcbfError):
    pass


class MissingParam(EqcbfError):
    pass


class BadShapeParam(EqcbfError):
    pass


class NotSupporting(EqcbfError):
    pass


class UnknownTransform(EqcbfError):
    pass


class BadParam(EqcbfError):
    pass


class NoUnitEigenvalue(EqcbfError):
    pass


class EmptyRegion(EqcbfError):
    pass


class BadGrid(EqcbfError):
    pass


class OutOfDomain(EqcbfError):
    pass


class NaNCell(EqcbfError):
    pass


class BadMagic(EqcbfError):
    pass


class VersionMismatch(EqcbfError):
    pass


class TruncatedPayload(EqcbfError):
    pass


class DimMismatch(EqcbfError):
    pass


class OutsideL0(EqcbfError):
    pass


class ChartInvariantViolated(EqcbfError):
    def __init__(self, message, worst_sample=None):
        super().__init__(message)
        self.worst_sample = worst_sample


class OutsideKnownRegion(EqcbfError):
    pass


class EmptyParamSet(EqcbfError):
    pass


class OutsideMHat(EqcbfError):
    pass


class ShiftConditionFailed(EqcbfError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class ConservativenessViolated(EqcbfError):
    pass


class NoSafeInput(EqcbfError):
    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


class PreconditionError(EqcbfError):
    pass


class ConfigError(EqcbfError):
    pass
