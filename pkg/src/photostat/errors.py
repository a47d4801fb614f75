"""Exception types shared across the package."""


class PhotostatError(Exception):
    """Base class for all package errors."""


class InvalidConfig(PhotostatError, ValueError):
    pass


class MalformedRecord(PhotostatError, ValueError):
    pass


class UnsortedStream(PhotostatError, ValueError):
    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class UnknownChannel(PhotostatError, ValueError):
    pass


class IoFailure(PhotostatError, OSError):
    pass


class UnsortedInput(PhotostatError, ValueError):
    pass


class EmptyWindow(PhotostatError, ValueError):
    pass


class DivisionByZeroConfig(PhotostatError, ValueError):
    pass


class DegenerateData(PhotostatError, ValueError):
    pass


class NonConvergence(PhotostatError, RuntimeError):
    """Raised when an iterative fit exhausts its iteration budget.

    The best partial result is attached as ``result``.
    """

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


class SingularJacobian(PhotostatError, ArithmeticError):
    pass


class NonPositivePressure(PhotostatError, ValueError):
    pass


class InvalidCoefficients(PhotostatError, ValueError):
    pass
