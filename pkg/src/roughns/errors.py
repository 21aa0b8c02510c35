"""Exception types raised across the package."""


class RoughNSError(Exception):
    """Base class for all package errors."""


class InvalidGrid(RoughNSError, ValueError):
    pass


class UnsupportedHurst(RoughNSError, ValueError):
    pass


class NotSewable(RoughNSError, ValueError):
    pass


class MeshTooFine(RoughNSError, ValueError):
    pass


class EmptyBasis(RoughNSError, ValueError):
    pass


class ChannelMismatch(RoughNSError, ValueError):
    pass


class BasisMismatch(RoughNSError, ValueError):
    pass


class GridMismatch(RoughNSError, ValueError):
    pass


class DriverMismatch(RoughNSError, ValueError):
    pass


class OracleUnavailable(RoughNSError, ValueError):
    pass


class NumericalBlowup(RoughNSError, ArithmeticError):
    pass


class EnergyViolation(RoughNSError, ArithmeticError):
    """Discrete energy grew beyond tolerance during a solve."""


class ConfigError(RoughNSError, ValueError):
    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field
