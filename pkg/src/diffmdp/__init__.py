"""Markov chain approximations of controlled diffusions: build, solve, roll out, verify."""

from .errors import (ConfigError, DiffMdpError, NonConvergenceError, NumericalError,
                     SimulationDiverged)
from .sde import DiffusionModel, RandomSource, SmoothFunction, simulate_path
from .mdp import (ActionNet, Grid, SampledMdp, TransitionKernel, assemble_mdp, build_action_net,
                  build_grid, estimate_kernel_mc, estimate_kernel_quadrature_1d)
from .solvers import ValueSolution, policy_evaluation, relative_value_iteration, value_iteration
from .lyapunov import EmpiricalMeasure, LyapunovCertificate, bl_distance, stationary_distribution

__version__ = "0.1.0"
