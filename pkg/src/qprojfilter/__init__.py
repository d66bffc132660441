"""Quantum filtering, exact finite-dimensional solutions and projection filters."""

from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # pragma: no cover
    __version__ = "0.0.0"

from .exact import ExactChart, exact_vs_filter, propagate_exact, tangency_check
from .linalg import bloch_to_density, density_to_bloch, spectral_decompose
from .model import ModelSpec, SdeGrid, spin_half_model
from .projection import ExponentialFamily, ProjState, projection_step, qnd_theta
from .qubit import QubitParams, closed_loop_run
from .residuals import BoundIngredients, bound_rhs, empirical_e_t, residuals
from .sde import SimulationError, iterate_filter, simulate_filter

__all__ = [
    "BoundIngredients",
    "ExactChart",
    "ExponentialFamily",
    "ModelSpec",
    "ProjState",
    "QubitParams",
    "SdeGrid",
    "SimulationError",
    "bloch_to_density",
    "bound_rhs",
    "closed_loop_run",
    "density_to_bloch",
    "empirical_e_t",
    "exact_vs_filter",
    "iterate_filter",
    "projection_step",
    "propagate_exact",
    "qnd_theta",
    "residuals",
    "simulate_filter",
    "spectral_decompose",
    "spin_half_model",
    "tangency_check",
]
