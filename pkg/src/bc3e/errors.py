"""Exception hierarchy shared by the library, the session runners and the CLI."""


class BC3EError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(BC3EError, ValueError):
    """Input tables, files or configuration are malformed."""


class ShapeMismatch(ValidationError):
    pass


class OutOfRangeLabel(ValidationError):
    def __init__(self, violations):
        self.violations = list(violations)
        shown = ", ".join(str(v) for v in self.violations[:10])
        more = "" if len(self.violations) <= 10 else f" (+{len(self.violations) - 10} more)"
        super().__init__(f"out-of-range labels at {shown}{more}")


class LengthMismatch(ValidationError):
    pass


class NumericalError(BC3EError, ArithmeticError):
    """A computation produced a non-finite value or hit a degenerate configuration."""


class DomainError(NumericalError, ValueError):
    pass


class AllNegativeInfinity(NumericalError):
    pass


class ConvergenceWarning(UserWarning):
    pass


class NonConvergenceWarning(ConvergenceWarning):
    pass


class NewtonNonConvergence(ConvergenceWarning):
    pass


class ProtocolError(BC3EError):
    """Anything that goes wrong on the wire or in the round protocol."""


class ProtocolViolation(ProtocolError):
    pass


class StaleRound(ProtocolError):
    pass


class MissingSite(ProtocolError):
    pass


class DuplicateSite(ProtocolError):
    pass


class TransportTimeout(ProtocolError, TimeoutError):
    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint
