"""Stability-constrained prediction-error identification of Kalman filter gains."""

from .exceptions import (ConfigError, DimensionError, EmptyFeasibleGridError, FeasibleSampleExhausted,
                         InfeasibleStartError, KalmanGainError, NonConvergenceError, NonFiniteTrajectoryError,
                         SingularRegressionError, UnstableMatrixError, UnsupportedDimensionError)
from .model import (Dataset, ExtendedData, InnovationModel, NoiseSpec, StateSpaceModel, build_three_state,
                    discretize_particle, predict_states, predict_states_extended, simulate_extended,
                    simulate_innovation, simulate_physical)
from .optimizer import (FitResult, MultiStartResult, SolveOptions, grid_search, minimize_mle, minimize_pem,
                        multi_start)
from .pem import (MleParams, asymptotic_eval, empirical_uniform_convergence, mle_partial_updates, mle_value,
                  pem_eval, pem_value, sweep)
from .riccati import dare_residual, solve_dare, to_innovation_form
from .stability import (certificate, constraint_value_grad, membership, sample_feasible_gain, solve_dlyap,
                        stability_bounds, verify_uniform_stability)

__version__ = "0.1.0"
