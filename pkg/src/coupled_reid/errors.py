"""Exception types raised across the package."""


class CoupledReIDError(Exception):
    """Base class for all package errors."""


class ZeroVector(CoupledReIDError, ValueError):
    pass


class DimensionMismatch(CoupledReIDError, ValueError):
    pass


class IndexOutOfRange(CoupledReIDError, IndexError):
    pass


class EpochZero(CoupledReIDError, ValueError):
    pass


class InvalidK(CoupledReIDError, ValueError):
    pass


class EmptySet(CoupledReIDError, ValueError):
    pass


class NoPositivePairs(CoupledReIDError, ValueError):
    pass


class BetaNonPositive(CoupledReIDError, ValueError):
    pass


class BankMismatch(CoupledReIDError, ValueError):
    pass


class EmptyDomain(CoupledReIDError, ValueError):
    pass


class LabelOutOfRange(CoupledReIDError, ValueError):
    pass


class NonDeterministicLoss(CoupledReIDError, RuntimeError):
    pass


class NonFiniteInput(CoupledReIDError, ValueError):
    pass


class CacheMismatch(CoupledReIDError, ValueError):
    pass


class ShapeMismatch(CoupledReIDError, ValueError):
    pass


class BatchLargerThanSet(CoupledReIDError, ValueError):
    pass


class StaleAnnotation(CoupledReIDError, RuntimeError):
    pass


class InvalidSpec(CoupledReIDError, ValueError):
    pass


class NoValidQueries(CoupledReIDError, ValueError):
    pass


class ConfigError(CoupledReIDError, ValueError):
    pass
