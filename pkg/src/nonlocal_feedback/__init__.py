"""Numerical lab for a transport equation with nonlocal velocity under output feedback."""

from .core_model import (ClosedLoopConfig, DegenerateEquilibriumError, EquilibriumSummary, ModelError,
                         VelocityKind, VelocityModel, equilibrium_summary, feedback_influx)
from .solver import BlowUpError, DensityField, NumericalError, TrajectoryRecord, simulate, weak_residual
from .spectral import (char_fn, classify_stability, count_roots, find_roots, imag_axis_roots_k_minus1,
                       spectral_abscissa, stability_predicate)

__version__ = "0.1.0"

__all__ = [
    "BlowUpError", "ClosedLoopConfig", "DegenerateEquilibriumError", "DensityField", "EquilibriumSummary",
    "ModelError", "NumericalError", "TrajectoryRecord", "VelocityKind", "VelocityModel", "char_fn",
    "classify_stability", "count_roots", "equilibrium_summary", "feedback_influx", "find_roots",
    "imag_axis_roots_k_minus1", "simulate", "spectral_abscissa", "stability_predicate", "weak_residual",
]
