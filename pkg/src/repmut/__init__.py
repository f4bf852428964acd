"""Stochastic solver suite for extended replicator-mutator dynamics."""

from .model import (DiffusionModel, DomainSpec, FitnessFunction, InitialLaw,
                    check_fitness_bound, check_fitness_modulus, sample_initial,
                    validate_model)
from .sde import PathBundle, TiltedDrift, TimeGrid, accumulate_log_weight, simulate, simulate_cir
from .numerics import (GaussianMoments, GridDensity, covariance_integral,
                       integrate, kde, matrix_exp)
from .closed_form import (ClosedFormSolution, ConstantCondition, Eigenpair,
                          affine_engine, detect_constant_condition,
                          eigenpair_residual, linear_engine, mass_factor,
                          solve_linear_v, solve_riccati, tilted_engine)
from .spectral import (SchrodingerProblem, cir_eigenpair, kummer_M,
                       pinsky_diagnostic, schrodinger_ground_state)
from .particle import (EmpiricalMeasure, WeightedParticleEnsemble, mass_estimate,
                       normalized_measure, run_particles, tilted_measure)
from .metric import (CompactifiedMeasure, bl_distance, compactify, dqt_estimate,
                     dstar, wasserstein1_1d, STAR)
from .pde import PdeScheme, fitness_mean_trace, solve_rm_pde

__version__ = "0.1.0"
