"""Exception types raised across the package."""


class RBFlowError(Exception):
    """Base class for all package errors."""


class ShapeError(RBFlowError, ValueError):
    pass


class DomainError(RBFlowError, ValueError):
    pass


class UnsupportedActivationError(RBFlowError, ValueError):
    """Raised when an operation needs a C^1 activation with Lipschitz derivative."""


class EnumerationError(RBFlowError, ValueError):
    """Raised when a scheme is too large to enumerate exactly."""


class AlignmentError(RBFlowError, ValueError):
    pass


class BlowUpError(RBFlowError, ArithmeticError):
    def __init__(self, step: int, norm: float):
        self.step = step
        self.norm = norm
        super().__init__(f"state blew up at step {step} (|x| = {norm:.3e})")


class StepSizeError(RBFlowError, RuntimeError):
    pass


class UnboundedError(RBFlowError, ValueError):
    """Raised when every step size satisfies the tolerance."""
