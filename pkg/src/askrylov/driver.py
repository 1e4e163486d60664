"""Couple a solver iteration stream with a truncation schedule.

The driver always advances the *deterministic* recurrence; randomness only
decides how many increments enter the returned estimate and with what weight.
Surviving increment k is added scaled by 1/s_k (reciprocal survival), which
makes the estimate unbiased for the full deterministic solution no matter the
schedule.

Adaptive schedules are revealed lazily: feeding iteration k+1's improvement
into the pooling sweep fixes P(k), so exactly one unfinalized increment is in
flight at any time. Exponential-roulette schedules are known a priori, so the
truncation draw happens before an iteration is computed at all.

Because the recurrence is deterministic given (A, b, x0), the schedule and
every candidate estimate are trial-independent; run_trials exploits this by
recording the decision sequence once and replaying only the truncation draws
per trial, which reproduces the sequential driver draw for draw.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .linop import LinearOperator, SparseMatrixCSR, matvec, to_dense
from .seeds import trial_generator
from .solvers import make_state, solve_deterministic, step
from .truncation import (ASConfig, PoolState, RRConfig, ScheduleInconsistencyError,
                         initial_prob, pool_step)

CHUNK = 512  # trials per aggregation chunk; fixed so results never depend on workers


@dataclass(frozen=True)
class ASEstimator:
    """Adaptively subsampled truncation with continuous parameter eta."""

    eta: float

    def config(self) -> ASConfig:
        return ASConfig(self.eta)


@dataclass(frozen=True)
class RREstimator:
    """Exponential roulette truncation with a deterministic prefix."""

    min_iters: int = 0
    lam: float = 0.05

    def config(self) -> RRConfig:
        return RRConfig(self.min_iters, self.lam)


Estimator = Union[ASEstimator, RREstimator]


@dataclass
class RandomizedSolveResult:
    """Unbiased solution estimate with execution diagnostics.

    executed_iterations counts applied increments (the lookahead may compute
    up to one more iteration than it applies). weights_applied[k] = 1/s_k.
    """

    estimate: np.ndarray
    executed_iterations: int
    truncated: bool
    weights_applied: List[float]
    diagnostics: Dict[str, object] = field(default_factory=dict)


# decide(index, conditional probability, estimate-if-truncated, applied count)
# -> truncate here? The sequential driver draws a uniform; the plan recorder
# stores the outcome and survives.
Decide = Callable[[int, float, np.ndarray, int], bool]


def _draw_decide(rng: np.random.Generator) -> Decide:
    def decide(idx: int, cond: float, _acc, _count) -> bool:
        if cond > 1.0 + 1e-12:
            raise ScheduleInconsistencyError(
                f"conditional truncation probability {cond} > 1 at index {idx}")
        return rng.random() < cond
    return decide


def _result(acc, weights, truncated, *, converged, flushed=False, clamped=0,
            maxit_exceeded=False, schedule=None) -> RandomizedSolveResult:
    return RandomizedSolveResult(
        estimate=acc, executed_iterations=len(weights), truncated=truncated,
        weights_applied=weights,
        diagnostics={"converged": converged, "flushed": flushed,
                     "clamped_improvements": clamped,
                     "maxit_exceeded": maxit_exceeded,
                     "schedule_realized": schedule})


def _machine_as(op, b, x0, method, config: ASConfig, tol, maxit,
                decide: Decide) -> RandomizedSolveResult:
    b = np.asarray(b, dtype=np.float64)
    bnorm = float(np.linalg.norm(b))
    scale = bnorm if bnorm > 0 else 1.0
    state = make_state(method, op, b, x0)
    acc = state.x.copy()
    weights: List[float] = []
    probs: Dict[int, float] = {}
    n = config.n
    survival = 1.0
    t_prev: Optional[float] = None
    pool: Optional[PoolState] = None
    pending: Optional[np.ndarray] = None
    clamped = 0

    def commit(delta: np.ndarray, s: float):
        nonlocal acc
        acc = acc + delta * (1.0 / s)
        weights.append(1.0 / s)

    if state.residual_norm <= tol * scale:
        return _result(acc, weights, False, converged=True, schedule=probs)

    for k in range(maxit):
        rec = step(state, op)
        j, t_j = rec.index, rec.improvement
        if t_j < 0.0:
            t_j, clamped = 0.0, clamped + 1

        if j <= n:
            commit(rec.delta_x, 1.0)  # deterministic prefix: P(j) = 0
        elif j == n + 1:
            p1 = initial_prob(config, t_prev, t_j)
            probs[j] = p1
            if decide(j, p1 / survival, acc, len(weights)):
                return _result(acc, weights, True, converged=False,
                               clamped=clamped, schedule=probs)
            survival -= p1
            commit(rec.delta_x, survival)
        elif j == n + 2:
            pool = PoolState.start(probs[n + 1], t_prev, t_j, j)
            clamped += pool.clamped
            pending = rec.delta_x
        else:
            pool, emitted = pool_step(pool, t_j)
            if emitted is None:
                commit(pending, survival)  # confirmed interior, P = 0
            else:
                idx, p = emitted
                probs[idx] = p
                if decide(idx, p / survival, acc, len(weights)):
                    return _result(acc, weights, True, converged=False,
                                   clamped=pool.clamped, schedule=probs)
                survival -= p
                commit(pending, survival)
            pending = rec.delta_x

        converged = rec.residual_norm <= tol * scale or getattr(state, "breakdown", False)
        if converged or k == maxit - 1:
            maxed = not converged
            if pending is None:
                return _result(acc, weights, False, converged=converged,
                               clamped=clamped, maxit_exceeded=maxed, schedule=probs)
            pool, (idx, p) = pool_step(pool, None)  # flush the open candidate
            probs[idx] = probs.get(idx, 0.0) + p
            if decide(idx, p / survival, acc, len(weights)):
                return _result(acc, weights, True, converged=False, flushed=True,
                               clamped=pool.clamped, maxit_exceeded=maxed,
                               schedule=probs)
            survival -= p
            commit(pending, survival)
            return _result(acc, weights, False, converged=converged, flushed=True,
                           clamped=pool.clamped, maxit_exceeded=maxed, schedule=probs)
        t_prev = t_j

    raise AssertionError("unreachable")


def _machine_rr(op, b, x0, method, config: RRConfig, tol, maxit,
                decide: Decide) -> RandomizedSolveResult:
    b = np.asarray(b, dtype=np.float64)
    bnorm = float(np.linalg.norm(b))
    scale = bnorm if bnorm > 0 else 1.0
    state = make_state(method, op, b, x0)
    acc = state.x.copy()
    weights: List[float] = []
    if state.residual_norm <= tol * scale:
        return _result(acc, weights, False, converged=True)
    s_prev = 1.0
    for j in range(maxit):
        s_j = config.survival(j)
        if s_j < s_prev:
            # a priori schedule: decide before paying for the iteration
            if decide(j, (s_prev - s_j) / s_prev, acc, len(weights)):
                return _result(acc, weights, True, converged=False)
        rec = step(state, op)
        acc = acc + rec.delta_x * (1.0 / s_j)
        weights.append(1.0 / s_j)
        s_prev = s_j
        if rec.residual_norm <= tol * scale or getattr(state, "breakdown", False):
            return _result(acc, weights, False, converged=True)
    return _result(acc, weights, False, converged=False, maxit_exceeded=True)


def _run_machine(op, b, x0, method, estimator: Estimator, tol, maxit,
                 decide: Decide) -> RandomizedSolveResult:
    if isinstance(estimator, ASEstimator):
        return _machine_as(op, b, x0, method, estimator.config(), tol, maxit, decide)
    if isinstance(estimator, RREstimator):
        return _machine_rr(op, b, x0, method, estimator.config(), tol, maxit, decide)
    raise TypeError(f"unknown estimator {estimator!r}")


def randomized_solve(op: LinearOperator, b, x0, method: str,
                     estimator: Estimator, tol: float, maxit: int,
                     rng: np.random.Generator) -> RandomizedSolveResult:
    """One unbiased randomized solve; see the module docstring.

    A sufficiently large eta (past the iteration count at convergence) never
    triggers any randomness and reproduces the deterministic solve bit for
    bit.
    """
    return _run_machine(op, b, x0, method, estimator, tol, maxit, _draw_decide(rng))


# ---------------------------------------------------------------------------
# Trial plans: record the decision sequence once, replay draws per trial
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrialPlan:
    """One trajectory's decision sequence and candidate estimates.

    Walking the decisions in order, drawing one uniform each, reproduces the
    sequential driver exactly: decision d fires with conditional probability
    cond[d] and yields estimates[d]; surviving every decision yields the
    run-everything outcome estimates[-1].
    """

    cond: np.ndarray
    estimates: List[np.ndarray]
    iterations: np.ndarray

    @property
    def n_outcomes(self) -> int:
        return len(self.iterations)

    def sample(self, rng: np.random.Generator) -> int:
        """Outcome index for one trial (consumes one uniform per decision)."""
        for d, c in enumerate(self.cond):
            if rng.random() < c:
                return d
        return len(self.cond)

    def probabilities(self) -> np.ndarray:
        """Unconditional probability of each outcome (decisions + final)."""
        out = np.empty(len(self.cond) + 1)
        s = 1.0
        for d, c in enumerate(self.cond):
            out[d] = s * c
            s *= (1.0 - c)
        out[-1] = s
        return out


def build_plan(op: LinearOperator, b, x0, method: str, estimator: Estimator,
               tol: float, maxit: int) -> TrialPlan:
    """Record the decision sequence of the (deterministic) trajectory."""
    cond: List[float] = []
    estimates: List[np.ndarray] = []
    iterations: List[int] = []
    stopped = False

    def record(idx: int, p_cond: float, acc: np.ndarray, count: int) -> bool:
        nonlocal stopped
        if p_cond > 1.0 + 1e-12:
            raise ScheduleInconsistencyError(
                f"conditional truncation probability {p_cond} > 1 at index {idx}")
        cond.append(min(p_cond, 1.0))
        estimates.append(acc)  # acc is never mutated in place by the machines
        iterations.append(count)
        stopped = p_cond >= 1.0
        return stopped  # a certain truncation ends the trajectory

    res = _run_machine(op, b, x0, method, estimator, tol, maxit, record)
    if stopped:
        # the final decision always fires; the fall-through entry is unreachable
        estimates.append(estimates[-1])
        iterations.append(iterations[-1])
    else:
        estimates.append(res.estimate)
        iterations.append(res.executed_iterations)
    return TrialPlan(cond=np.array(cond), estimates=estimates,
                     iterations=np.array(iterations, dtype=np.int64))


# ---------------------------------------------------------------------------
# Trial batching
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrialProblem:
    """A picklable linear-system spec for batched randomized trials."""

    matrix: Union[np.ndarray, SparseMatrixCSR]
    b: np.ndarray
    method: str = "cg"
    x0: Optional[np.ndarray] = None
    tol: float = 1e-8
    maxit: Optional[int] = None
    symmetric: bool = True
    spd: bool = True

    def operator(self) -> LinearOperator:
        if isinstance(self.matrix, SparseMatrixCSR):
            return LinearOperator.from_csr(self.matrix, symmetric=self.symmetric,
                                           spd_asserted=self.spd)
        return LinearOperator.from_dense(self.matrix, symmetric=self.symmetric,
                                         spd_asserted=self.spd)

    def reference_solution(self) -> np.ndarray:
        """x* from a dense direct solve (the across-trial error reference)."""
        return np.linalg.solve(to_dense(self.operator()), self.b)


@dataclass
class TrialStatistics:
    """Aggregates over independent randomized solves.

    mean_sq_error_metric is E||xbar - x*||_A^2 for CG and E||b - A xbar||^2
    for CR/GMRES; strict_variance_metric removes the (tiny, for an unbiased
    run) squared bias of the mean in the same norm.
    """

    trials: int
    mean_estimate: np.ndarray
    std_estimate: np.ndarray
    mean_sq_error_metric: float
    metric_stderr: float
    strict_variance_metric: float
    avg_iterations: float
    std_err_iterations: float


def _chunk_counts(plan_n: int, cond: np.ndarray, base_seed: int,
                  start: int, stop: int) -> np.ndarray:
    counts = np.zeros(plan_n, dtype=np.int64)
    n_dec = len(cond)
    for trial in range(start, stop):
        rng = trial_generator(base_seed, trial)
        outcome = n_dec
        for d in range(n_dec):
            if rng.random() < cond[d]:
                outcome = d
                break
        counts[outcome] += 1
    return counts


def run_trials(problem: TrialProblem, estimator: Estimator, trials: int,
               base_seed: int, workers: int = 1) -> TrialStatistics:
    """Independent randomized solves with per-trial derived seeds.

    The trajectory plan is recorded once; each trial replays only its
    truncation draws (draw-for-draw identical to calling randomized_solve
    with the same per-trial generator). Aggregation is by exact outcome
    counts in fixed chunks, so results are identical for any worker count.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    op = problem.operator()
    maxit = problem.maxit if problem.maxit is not None else 10 * op.n
    plan = build_plan(op, problem.b, problem.x0, problem.method, estimator,
                      problem.tol, maxit)
    n_out = plan.n_outcomes

    bounds = [(s, min(s + CHUNK, trials)) for s in range(0, trials, CHUNK)]
    if workers > 1 and len(bounds) > 1:
        args = [(n_out, plan.cond, base_seed, s, e) for s, e in bounds]
        with ProcessPoolExecutor(max_workers=workers) as ex:
            chunk_counts = list(ex.map(_chunk_counts, *zip(*args)))
    else:
        chunk_counts = [_chunk_counts(n_out, plan.cond, base_seed, s, e)
                        for s, e in bounds]
    counts = np.zeros(n_out, dtype=np.int64)
    for c in chunk_counts:
        counts += c

    x_star = problem.reference_solution()
    if problem.method == "cg":
        a_dense = to_dense(op)
        metrics = np.array([float((x - x_star) @ (a_dense @ (x - x_star)))
                            for x in plan.estimates])
    else:
        metrics = np.array([float(np.sum((problem.b - matvec(op, x)) ** 2))
                            for x in plan.estimates])

    t = float(trials)
    w = counts / t
    est_mat = np.stack(plan.estimates)
    mean_x = w @ est_mat
    mean_xsq = w @ (est_mat * est_mat)
    var_x = np.maximum(mean_xsq - mean_x ** 2, 0.0) * (t / max(t - 1.0, 1.0))
    mean_m = float(w @ metrics)
    var_m = max(float(w @ metrics ** 2) - mean_m ** 2, 0.0) * (t / max(t - 1.0, 1.0))
    iters = plan.iterations.astype(np.float64)
    mean_i = float(w @ iters)
    var_i = max(float(w @ iters ** 2) - mean_i ** 2, 0.0) * (t / max(t - 1.0, 1.0))

    if problem.method == "cg":
        e = mean_x - x_star
        bias_sq = float(e @ matvec(op, e))
    else:
        r = problem.b - matvec(op, mean_x)
        bias_sq = float(r @ r)
    return TrialStatistics(
        trials=trials, mean_estimate=mean_x, std_estimate=np.sqrt(var_x),
        mean_sq_error_metric=mean_m, metric_stderr=math.sqrt(var_m / t),
        strict_variance_metric=max(mean_m - bias_sq, 0.0),
        avg_iterations=mean_i, std_err_iterations=math.sqrt(var_i / t))


@dataclass(frozen=True)
class CurvePoint:
    label: str
    param: str
    avg_iterations: float
    std_err_iterations: float
    mean_sq_error_metric: float
    metric_stderr: float
    strict_variance_metric: float
    trials: int
    seed: int


def variance_curve(problem: TrialProblem, estimators: Sequence[Tuple[str, str, Estimator]],
                   trials: int, base_seed: int, workers: int = 1) -> List[CurvePoint]:
    """One row per (label, param, estimator) grid point, sorted by average cost."""
    if not estimators:
        raise ValueError("estimator grid must be non-empty")
    rows = []
    for label, param, est in estimators:
        st = run_trials(problem, est, trials, base_seed, workers=workers)
        rows.append(CurvePoint(label=label, param=param,
                               avg_iterations=st.avg_iterations,
                               std_err_iterations=st.std_err_iterations,
                               mean_sq_error_metric=st.mean_sq_error_metric,
                               metric_stderr=st.metric_stderr,
                               strict_variance_metric=st.strict_variance_metric,
                               trials=trials, seed=base_seed))
    rows.sort(key=lambda r: (r.avg_iterations, r.label, r.param))
    return rows


def deterministic_telemetry(problem: TrialProblem):
    """Improvements of the deterministic run (for cost calibration)."""
    op = problem.operator()
    maxit = problem.maxit if problem.maxit is not None else 10 * op.n
    det = solve_deterministic(op, problem.b, problem.x0, tol=problem.tol,
                              maxit=maxit, method=problem.method)
    return [rec.improvement for rec in det.history], det
