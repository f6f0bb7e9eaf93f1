"""Finite wave-speed closure for piecewise-smooth models.

Modules
-------
model
    Closed switched models, their free and sliding flows, tangency and
    uniqueness tests.
string_kernels
    Reduced-model coefficients and memory kernels of a taut string.
hybrid
    Event-driven integrator for switched and sliding motion.
memory
    Fixed-step integrators for the string with convolution or exponential
    memory.
scenarios
    Concrete models (linear string, friction oscillator, two-fold) and
    their analysis helpers.
cli
    Batch front end.
"""

from __future__ import annotations

__version__ = "0.1.0"

from .hybrid import HybridTrajectory, IntegratorConfig, simulate
from .model import ClosedModel, ModeLabel, uniqueness_certificate
from .string_kernels import StringParams

__all__ = [
    "ClosedModel",
    "HybridTrajectory",
    "IntegratorConfig",
    "ModeLabel",
    "StringParams",
    "simulate",
    "uniqueness_certificate",
    "__version__",
]
