"""Stochastic Navier-Stokes mixing laboratory on the periodic box."""
from .exceptions import ConfigurationError, GridMismatchError, NumericalFailure
from .spectral import SpectralVelocity, WaveGrid, build_grid
from .solver import ForcingProfile, PeriodicForce, Trajectory, integrate, time_one_map
from .noise import CylinderSpec, NoiseBasis, build_noise_basis, rng_stream, sample_noise
from .control import ControlOperator, FeedbackController, build_phi, parameter_sweep, verify_contraction
from .coupling import CouplingParams, DiscreteMeasure, coupled_kernel, epsilon_optimal_cost, shift_map_build
from .mixing import ExperimentRecord, fit_exponential
from .config import LabConfig, parse_config

__version__ = "0.1.0"
