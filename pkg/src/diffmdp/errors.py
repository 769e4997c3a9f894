"""Exception hierarchy.

Configuration problems and numerical failures are kept apart so the CLI can
map them to distinct exit codes.
"""


class DiffMdpError(Exception):
    """Base class for all package errors."""


class ConfigError(DiffMdpError, ValueError):
    pass


class InvalidDistributionError(DiffMdpError, ValueError):
    pass


class UnsupportedError(DiffMdpError, NotImplementedError):
    pass


class OutOfRangeError(DiffMdpError, IndexError):
    pass


class NumericalError(DiffMdpError, ArithmeticError):
    """Base for failures of a numerical procedure (CLI exit code 3)."""


class SimulationDiverged(NumericalError):
    def __init__(self, step: int, context: str = ""):
        self.step = step
        self.context = context
        msg = f"non-finite state at step {step}"
        if context:
            msg = f"{msg} ({context})"
        super().__init__(msg)


class AssemblyError(NumericalError, ValueError):
    pass


class InvalidDiscountError(NumericalError, ValueError):
    pass


class NonConvergenceError(NumericalError):
    def __init__(self, message: str, residual: float, iterations: int):
        self.residual = residual
        self.iterations = iterations
        super().__init__(f"{message} (residual={residual:.3e} after {iterations} iterations)")
