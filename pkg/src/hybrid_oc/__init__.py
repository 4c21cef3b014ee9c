"""Numerical toolkit for optimal control of hybrid dynamical systems."""

from .errors import *  # noqa: F401,F403
from .hybrid_core import FlowConfig, GuardChart, HybridArc, HybridSystem, ResetEvent, apply_reset, classify_zeno, flow
from .saltation import augmented_differential, conjugate_points, propagate_variational, symplectic_defect

__version__ = "0.1.0"
