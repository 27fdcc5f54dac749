"""Monte Carlo verification toolkit for Malliavin calculus, Girsanov tilts and
transport maps on Poisson space."""

from .clark_ocone import TimeGrid, predictable_projection, reconstruct, residual
from .configuration import Configuration, ConfigurationBatch, MarkTimeFunction, simulate, simulate_replicates
from .errors import (BufferOverflowError, ConfigurationError, ContractError, DomainError, ParameterError,
                     PoissonLabError)
from .functionals import Functional, count, difference, linear, quadratic
from .girsanov import Control, constant_control, doleans, entropy_cost, tilted_sample
from .intensity import IntensityModel, Window, exp_decay, gaussian_bump, lebesgue
from .rng import RandomStreams, StreamKey
from .transport import TransportMap, gamma_transform, hat_control, plan_buffer, tilde_control
from .variational import ControlFamily, dual_tilt, dual_transport, duality_report, lhs, minimize_dual, optimal_control

__version__ = "0.1.0"
