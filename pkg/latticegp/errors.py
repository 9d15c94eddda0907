"""
Error hierarchy. Every error carries a human readable ``detail`` and the
process exit code the CLI should use for it.
"""
from typing import Any, Optional


class LatticeGPError(Exception):
    exit_code = 1

    def __init__(self, detail: str, exit_code: Optional[int] = None):
        super().__init__(detail)
        self.detail = detail
        if exit_code is not None:
            self.exit_code = exit_code


class ConfigError(LatticeGPError):
    exit_code = 2


class GridIOError(LatticeGPError):
    exit_code = 4


class NumericalError(LatticeGPError):
    exit_code = 3


class NegativeEigenvalue(NumericalError):
    def __init__(self, detail: str, min_eig: float = float("nan")):
        super().__init__(detail)
        self.min_eig = min_eig


class NonSymmetricBase(NumericalError):
    pass


class NotConverged(NumericalError):
    """PCG stopped at ``max_iters``; the best iterate travels with the error."""

    def __init__(self, detail: str, result: Any = None, draw_index: Optional[int] = None):
        super().__init__(detail)
        self.result = result
        self.draw_index = draw_index


class BreakdownZeroCurvature(NumericalError):
    pass


class SingularConditioningSet(NumericalError):
    pass


class NotPositiveDefinite(NumericalError):
    pass


class OptimizerFailed(NumericalError):
    pass


class InitializationError(NumericalError):
    pass


class IncompleteLattice(NumericalError):
    pass


class OutOfSupport(NumericalError):
    pass
