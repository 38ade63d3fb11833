"""Pseudospectral simulation of the stochastic real Ginzburg-Landau equation
on the torus with noise acting on a few Fourier modes, plus its tangent,
adjoint and Malliavin calculus and long-time experiments."""

__version__ = "0.1.0"

from .errors import (BlowUpError, BudgetExhausted, GLSimError, RecombinationError,  # noqa: E402
                     ResolutionError, ValidationError, WindowError)
from .sde import ForcingSpec, SolverConfig, Trajectory, integrate  # noqa: E402
from .spectral import SobolevIndex, SpectralField, basis  # noqa: E402

__all__ = [
    "__version__", "GLSimError", "ValidationError", "ResolutionError", "WindowError",
    "BlowUpError", "BudgetExhausted", "RecombinationError", "ForcingSpec", "SolverConfig",
    "Trajectory", "integrate", "SpectralField", "SobolevIndex", "basis",
]
