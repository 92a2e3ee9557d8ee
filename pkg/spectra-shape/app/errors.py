"""
Error taxonomy for the shape lab.

Every hard failure carries an ``exit_code`` and a human readable ``detail``.
The CLI turns them into process exit codes: 2 for bad input, 1 for a
numerical or check failure.
"""


class ShapeLabError(Exception):
    exit_code = 1

    def __init__(self, detail: str, exit_code: int = None):
        super().__init__(detail)
        self.detail = detail
        if exit_code is not None:
            self.exit_code = exit_code

    def __str__(self) -> str:
        return self.detail


class InvalidInputError(ShapeLabError, ValueError):
    """Precondition violated by the caller (bad h, non-injective map, bad bracket...)."""
    exit_code = 2


class DiscretizationError(ShapeLabError):
    """Mesh or form cannot be built: inverted element, singular B, unstable penalty."""
    exit_code = 1


class SolverError(ShapeLabError):
    """Eigensolver breakdown or non-convergence."""
    exit_code = 1

    def __init__(self, detail: str, residuals=None):
        super().__init__(detail)
        self.residuals = residuals


class UnusableClusterError(ShapeLabError):
    # inconclusive, not a failure
    exit_code = 0
