"""Exception hierarchy shared by every module of the package."""


class MnemonicsError(Exception):
    """Base class. ``phase`` is filled in by the protocol loop when known."""

    phase = None

    def __str__(self):
        msg = super().__str__()
        if self.phase is not None:
            return f"[phase {self.phase}] {msg}"
        return msg


class ShapeError(MnemonicsError, ValueError):
    pass


class NumericError(MnemonicsError, ArithmeticError):
    """Non-finite loss or gradient. ``block`` names the offending parameter block."""

    def __init__(self, message, block=None):
        super().__init__(message)
        self.block = block


class DivergenceError(NumericError):
    """Parameters became non-finite or exceeded the magnitude guard.

    ``step`` is the inner/unrolled step index, ``epoch`` the outer epoch.
    """

    def __init__(self, message, step=None, epoch=None, block=None):
        super().__init__(message, block=block)
        self.step = step
        self.epoch = epoch


class LabelError(MnemonicsError, ValueError):
    pass


class ArgumentError(MnemonicsError, ValueError):
    pass


class BalanceError(MnemonicsError, ValueError):
    def __init__(self, message, offending=()):
        super().__init__(message)
        self.offending = tuple(offending)


class ScheduleError(MnemonicsError, ValueError):
    pass


class BudgetError(MnemonicsError, ValueError):
    pass


class SpecError(MnemonicsError, ValueError):
    pass


class FormatError(MnemonicsError, ValueError):
    pass


class ParseError(FormatError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
