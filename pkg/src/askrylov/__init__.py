"""Unbiased randomized truncation of Krylov subspace solvers.

The deterministic CG/CR/GMRES recurrences emit per-iteration improvements;
an adaptive truncation schedule turns any prefix of the run into an unbiased
estimate of the full solution, trading iterations for variance at the best
achievable rate whenever the improvements keep decreasing.
"""

from .driver import (ASEstimator, RandomizedSolveResult, RREstimator,
                     TrialProblem, TrialStatistics, randomized_solve,
                     run_trials, variance_curve)
from .linop import (LinearOperator, NotSymmetricError, SparseMatrixCSR,
                    energy_norm_sq, gen_sparse_spd, matvec, read_matrix_market,
                    read_vector, spd_operator, to_dense, write_matrix_market,
                    write_vector)
from .oracle import (KKTCertificate, OptimizationInstance, OracleConvergenceError,
                     brute_force_optimum, make_adversarial_instance, objective,
                     objective_gradient)
from .solvers import (CGState, CRState, GMRESState, IterationRecord, NotSPDError,
                      SolverBreakdownError, cg_step, cr_step, gmres_step,
                      make_state, solve_deterministic, step)
from .truncation import (AnchorDegenerateError, ASConfig, DegenerateImprovementError,
                         PoolState, RRConfig, ScheduleInconsistencyError,
                         TruncationSchedule, as_probabilities_finite,
                         as_schedule_with_groups, calibrate_eta, expected_cost,
                         expected_cost_closed_form, expected_cost_streaming,
                         initial_prob, pool_step, rr_schedule, sample_truncation,
                         streaming_schedule)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
