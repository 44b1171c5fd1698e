"""Numerical toolkit for recursive stochastic control under volatility uncertainty.

Modules
-------
gcore     sublinear G operator, scenario measures, counter-based noise
problem   control problems, drivers, Hamiltonian, built-in examples
hjb       explicit monotone solver for the G-type HJB equation
simulate  forward paths under one scenario and martingale diagnostics
adjoint   adjoint process, maximum-principle check, jets and bounds
cli       command-line front end (``gcontrol``)
"""

__version__ = "0.1.0"

from .errors import CFLError, DomainError, GControlError, MembershipError, NumericalError  # noqa: F401
from .gcore import NoiseStream, ScenarioMeasure, VolBounds, g_maximizer, g_scalar  # noqa: F401
from .problem import ControlProblem, ControlSet, builtin_example  # noqa: F401
