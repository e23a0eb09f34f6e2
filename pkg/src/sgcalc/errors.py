"""Exception types raised across the package."""


class SgcalcError(Exception):
    """Base class for all package errors."""


class DisconnectedGraph(SgcalcError):
    pass


class NonPositiveWeight(SgcalcError):
    pass


class EmptyGrid(SgcalcError):
    pass


class DegenerateBall(SgcalcError):
    pass


class EllipticityViolation(SgcalcError):
    pass


class DenseCapExceeded(SgcalcError):
    pass


class FunctionDomainError(SgcalcError):
    pass


class EmptyBall(SgcalcError):
    pass


class ZeroInput(SgcalcError):
    pass


class NoSeparatedPairs(SgcalcError):
    pass


class SingularSpec(SgcalcError):
    pass


class ConfigError(SgcalcError):
    """Invalid configuration; the message carries the field path and line."""
