"""Ground-truth trajectory generators for the double pendulum, KS and Kolmogorov benchmarks."""

from .dataset import (
    GenerationError,
    TrajectoryDataset,
    generate_dataset,
    generate_dp_dataset,
    generate_kf_dataset,
    generate_ks_dataset,
)
from .etdrk4 import ETDRK4Coefficients, etdrk4_coefficients, etdrk4_step
from .ics import REGIMES, sample_filtered_fourier_ic
from .kolmogorov import KFConfig, KFSolver, kf_step, poisson_residual, poisson_solve
from .ks import KSConfig, KSSolver, ks_step
from .pendulum import DPConfig, NumericalError, dp_derivatives, dp_energy, rk4_step
