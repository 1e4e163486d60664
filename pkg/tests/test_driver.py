import numpy as np
import pytest
from scipy import stats

from askrylov.driver import (ASEstimator, RREstimator, TrialProblem, build_plan,
                             randomized_solve, run_trials, variance_curve)
from askrylov.linop import gen_sparse_spd, spd_operator, to_dense
from askrylov.seeds import generator, trial_generator
from askrylov.solvers import solve_deterministic
from askrylov.truncation import ASConfig, expected_cost_streaming


@pytest.fixture(scope="module")
def small_problem():
    m = gen_sparse_spd(20, 0.25, 5.0, seed=42)
    b = generator(7).standard_normal(20)
    return TrialProblem(matrix=m, b=b, method="cg", tol=1e-10, maxit=400)


def _telemetry(problem):
    op = problem.operator()
    det = solve_deterministic(op, problem.b, tol=problem.tol, maxit=problem.maxit,
                              method=problem.method)
    return op, det


def test_deterministic_limit_bit_identical(small_problem):
    op, det = _telemetry(small_problem)
    res = randomized_solve(op, small_problem.b, None, "cg", ASEstimator(1e9),
                           small_problem.tol, small_problem.maxit, generator(0))
    assert np.array_equal(res.estimate, det.x)
    assert res.executed_iterations == det.iterations
    assert all(w == 1.0 for w in res.weights_applied)
    assert not res.truncated
    assert res.diagnostics["converged"]


def test_weights_are_reciprocal_survival(small_problem):
    op, _ = _telemetry(small_problem)
    res = randomized_solve(op, small_problem.b, None, "cg", ASEstimator(2.5),
                           small_problem.tol, small_problem.maxit, generator(3))
    sched = res.diagnostics["schedule_realized"]
    survival = 1.0
    for k, w in enumerate(res.weights_applied):
        survival -= sched.get(k, 0.0)
        assert w == pytest.approx(1.0 / survival, rel=1e-12)
        assert w >= 1.0


def test_truncated_run_keeps_committed_prefix(small_problem):
    op, _ = _telemetry(small_problem)
    found = False
    for seed in range(40):
        res = randomized_solve(op, small_problem.b, None, "cg", ASEstimator(0.5),
                               small_problem.tol, small_problem.maxit,
                               generator(seed))
        if res.truncated:
            found = True
            assert res.executed_iterations == len(res.weights_applied)
            assert not res.diagnostics["converged"]
    assert found


def test_plan_replay_identical_to_sequential(small_problem):
    op, _ = _telemetry(small_problem)
    for est in [ASEstimator(2.0), ASEstimator(-0.5), RREstimator(2, 0.25)]:
        plan = build_plan(op, small_problem.b, None, "cg", est,
                          small_problem.tol, small_problem.maxit)
        for trial in range(100):
            seq = randomized_solve(op, small_problem.b, None, "cg", est,
                                   small_problem.tol, small_problem.maxit,
                                   trial_generator(13, trial))
            outcome = plan.sample(trial_generator(13, trial))
            assert np.array_equal(seq.estimate, plan.estimates[outcome])
            assert seq.executed_iterations == plan.iterations[outcome]


def test_run_trials_single_trial_equals_single_solve(small_problem):
    op, _ = _telemetry(small_problem)
    est = ASEstimator(3.0)
    st = run_trials(small_problem, est, trials=1, base_seed=99)
    single = randomized_solve(op, small_problem.b, None, "cg", est,
                              small_problem.tol, small_problem.maxit,
                              trial_generator(99, 0))
    assert np.array_equal(st.mean_estimate, single.estimate)
    assert st.avg_iterations == single.executed_iterations
    assert st.std_err_iterations == 0.0


def test_unbiasedness_z_statistics(small_problem):
    x_star = small_problem.reference_solution()
    trials = 30_000
    st = run_trials(small_problem, ASEstimator(3.5), trials, base_seed=5)
    z = (st.mean_estimate - x_star) / (st.std_estimate / np.sqrt(trials))
    assert np.mean(np.abs(z) < 4.0) >= 0.99


def test_avg_iterations_matches_expected_cost(small_problem):
    op, det = _telemetry(small_problem)
    t_hist = [r.improvement for r in det.history]
    trials = 30_000
    for eta in [1.5, 6.0]:
        c = expected_cost_streaming(t_hist, ASConfig(eta))
        st = run_trials(small_problem, ASEstimator(eta), trials, base_seed=21)
        assert abs(st.avg_iterations - c) <= 3.0 * max(st.std_err_iterations, 1e-12)


def test_truncation_index_distribution_chi_squared(small_problem):
    """Empirical outcome frequencies match the trajectory plan probabilities."""
    op, _ = _telemetry(small_problem)
    est = ASEstimator(2.0)
    plan = build_plan(op, small_problem.b, None, "cg", est, small_problem.tol,
                      small_problem.maxit)
    probs = plan.probabilities()
    trials = 100_000
    counts = np.zeros(plan.n_outcomes)
    for trial in range(trials):
        counts[plan.sample(trial_generator(31, trial))] += 1
    keep = probs * trials >= 5  # chi-squared validity
    chi2 = float(np.sum((counts[keep] - trials * probs[keep]) ** 2
                        / (trials * probs[keep])))
    dof = int(keep.sum()) - 1
    assert chi2 < stats.chi2.ppf(0.999, dof)


def test_run_trials_deterministic_across_workers(small_problem):
    est = RREstimator(1, 0.3)
    st1 = run_trials(small_problem, est, trials=2000, base_seed=17, workers=1)
    st2 = run_trials(small_problem, est, trials=2000, base_seed=17, workers=4)
    assert np.array_equal(st1.mean_estimate, st2.mean_estimate)
    assert st1.mean_sq_error_metric == st2.mean_sq_error_metric
    assert st1.avg_iterations == st2.avg_iterations


def test_variance_curve_sorted_and_monotone_cost_in_eta(small_problem):
    etas = [1.0, 4.0, 8.0, 12.0]
    grid = [("as", f"eta={e:g}", ASEstimator(e)) for e in etas]
    rows = variance_curve(small_problem, grid, trials=4000, base_seed=2)
    costs = [r.avg_iterations for r in rows]
    assert costs == sorted(costs)
    by_eta = {r.param: r.avg_iterations for r in rows}
    ordered = [by_eta[f"eta={e:g}"] for e in etas]
    assert all(ordered[i] < ordered[i + 1] for i in range(len(ordered) - 1))


def test_variance_curve_single_point_matches_run_trials(small_problem):
    est = ASEstimator(2.0)
    rows = variance_curve(small_problem, [("as", "eta=2", est)], trials=500,
                          base_seed=3)
    st = run_trials(small_problem, est, trials=500, base_seed=3)
    assert rows[0].avg_iterations == st.avg_iterations
    assert rows[0].mean_sq_error_metric == st.mean_sq_error_metric


def test_randomized_solve_warm_start_unbiased(small_problem):
    op, det = _telemetry(small_problem)
    x0 = 0.5 * det.x  # fixed non-zero start
    x_star = small_problem.reference_solution()
    prob = TrialProblem(matrix=small_problem.matrix, b=small_problem.b,
                        method="cg", x0=x0, tol=1e-10, maxit=400)
    st = run_trials(prob, ASEstimator(2.5), 20_000, base_seed=8)
    z = (st.mean_estimate - x_star) / (st.std_estimate / np.sqrt(20_000))
    assert np.mean(np.abs(z) < 4.0) >= 0.99


def test_cr_and_gmres_paths():
    m = gen_sparse_spd(15, 0.3, 5.0, seed=3)
    b = generator(4).standard_normal(15)
    cr_prob = TrialProblem(matrix=m, b=b, method="cr", tol=1e-10, maxit=300,
                           symmetric=True, spd=False)
    st = run_trials(cr_prob, ASEstimator(2.0), 5000, base_seed=11)
    assert st.mean_sq_error_metric >= 0

    rng = generator(6)
    a = rng.standard_normal((15, 15)) + 5.0 * np.eye(15)
    gm_prob = TrialProblem(matrix=a, b=b, method="gmres", tol=1e-10, maxit=300,
                           symmetric=False, spd=False)
    st2 = run_trials(gm_prob, ASEstimator(2.0), 5000, base_seed=12)
    assert st2.mean_sq_error_metric >= 0


def test_maxit_flagged(small_problem):
    op, _ = _telemetry(small_problem)
    res = randomized_solve(op, small_problem.b, None, "cg", ASEstimator(1e9),
                           1e-14, 4, generator(1))
    assert res.diagnostics["maxit_exceeded"]
