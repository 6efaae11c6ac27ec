class HopfEError(Exception):
    pass


class ZeroQuaternion(HopfEError, ValueError):
    pass


class NotOnSphere(HopfEError, ValueError):
    pass


class ShapeMismatch(HopfEError, ValueError):
    pass


class InvalidConfig(HopfEError, ValueError):
    pass


class NumericalOverflow(HopfEError, ArithmeticError):
    pass


class NonFiniteGradient(HopfEError, ArithmeticError):
    pass


class ParseError(HopfEError, ValueError):
    def __init__(self, path, lineno, message):
        super().__init__(f"{path}:{lineno}: {message}")
        self.path = path
        self.lineno = lineno


class EmptySplit(HopfEError, ValueError):
    pass


class WidthMismatch(HopfEError, ValueError):
    pass


class UnknownEntity(HopfEError, KeyError):
    pass


class UnknownRelation(HopfEError, KeyError):
    pass
