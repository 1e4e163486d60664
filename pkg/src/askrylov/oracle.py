"""Small-scale ground truth for the variance-versus-cost problem.

For a run with improvements t_0..t_{N-1}, a full truncation distribution P
over j = 0..N (P(j) = truncate before iteration j; P(N) = run everything)
induces the expected squared error

    F(P) = sum_j P(j) ||v_j||^2,
    ||v_j||^2 = sum_{k<j} t_k (1 - 1/s_k)^2 + sum_{k>=j} t_k,
    s_k = 1 - sum_{i<=k} P(i),

which this module minimizes numerically over the simplex intersected with the
cost hyperplane sum_j j P(j) = C, restricted to P(N) >= floor (the objective
blows up as the run-everything mass vanishes while improvements remain). A
projected-gradient method with random restarts plus a KKT residual check
stands in for global optimality at the N <= 30 scale the oracle supports.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .seeds import generator
from .truncation import ASConfig, as_probabilities_finite, expected_cost


class OracleConvergenceError(RuntimeError):
    """The restart budget ran out without a stationary point."""

    def __init__(self, msg, best=None):
        super().__init__(msg)
        self.best = best


@dataclass(frozen=True)
class OptimizationInstance:
    """Improvements plus a cost budget; small by design (N <= 30)."""

    improvements: np.ndarray
    cost: float

    def __post_init__(self):
        t = np.asarray(self.improvements, dtype=np.float64)
        if t.ndim != 1 or len(t) > 30:
            raise ValueError("improvements must be 1-d with N <= 30")
        if np.any(t < 0):
            raise ValueError("improvements must be non-negative")
        if not (0.0 < self.cost <= len(t)):
            raise ValueError(f"cost budget must lie in (0, {len(t)}]")
        object.__setattr__(self, "improvements", t)

    @property
    def n_iterations(self) -> int:
        return len(self.improvements)


@dataclass(frozen=True)
class KKTCertificate:
    """First-order certificate at a candidate optimum.

    multipliers are the nonnegativity duals u_j (zero on the support);
    max_stationarity_residual is the worst violation of
    grad_j = lambda * j + mu over the support.
    """

    lagrange_lambda: float
    lagrange_mu: float
    multipliers: np.ndarray
    max_stationarity_residual: float


def _error_profile(p: np.ndarray, t: np.ndarray):
    """(||v_j||^2 for all j, survival s, distortion d) or None when F = inf."""
    n = len(t)
    s = 1.0 - np.cumsum(p[:n])
    d = np.zeros(n)
    dead = s <= 1e-300
    if np.any(dead):
        k0 = int(np.argmax(dead))
        if np.any(t[k0:] > 0):
            return None
        live = ~dead
    else:
        live = np.ones(n, dtype=bool)
    d[live] = t[live] * (1.0 - 1.0 / s[live]) ** 2
    suffix_t = np.concatenate([np.cumsum(t[::-1])[::-1], [0.0]])
    prefix_d = np.concatenate([[0.0], np.cumsum(d)])
    return prefix_d + suffix_t, s, d


def objective(probabilities: Sequence[float], instance: OptimizationInstance) -> float:
    """F(P); +inf when mass runs out before nonzero improvements do."""
    p = np.asarray(probabilities, dtype=np.float64)
    t = instance.improvements
    if p.shape != (len(t) + 1,):
        raise ValueError(f"expected {len(t) + 1} probabilities")
    if np.any(p < -1e-12):
        raise ValueError("probabilities must be non-negative")
    prof = _error_profile(p, t)
    if prof is None:
        return math.inf
    v_sq, _, _ = prof
    return float(p @ v_sq)


def objective_gradient(probabilities: Sequence[float],
                       instance: OptimizationInstance) -> np.ndarray:
    """Analytic dF/dP(j); matches central finite differences on the interior."""
    p = np.asarray(probabilities, dtype=np.float64)
    t = instance.improvements
    n = len(t)
    prof = _error_profile(p, t)
    if prof is None:
        raise ValueError("gradient undefined where the objective is infinite")
    v_sq, s, _ = prof
    m = -t * (1.0 - 1.0 / s) / s ** 2  # d(d_k)/dP(j) = 2 m_k for j <= k
    m_cum = np.concatenate([[0.0], np.cumsum(m)])  # m_cum[j] = sum_{i<j} m_i
    pm_suffix = np.concatenate([np.cumsum((p * m_cum)[::-1])[::-1], [0.0]])
    p_suffix = np.concatenate([np.cumsum(p[::-1])[::-1], [0.0]])
    grad = v_sq.copy()
    grad[:n + 1] += 2.0 * (pm_suffix[1:n + 2] - m_cum[:n + 1] * p_suffix[1:n + 2])
    return grad


# ---------------------------------------------------------------------------
# Feasible-set projection: simplex (with a floor on the last entry) cut by
# the cost hyperplane, via Dykstra's alternating projections.
# ---------------------------------------------------------------------------

def _project_simplex(v: np.ndarray, total: float = 1.0) -> np.ndarray:
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - total
    idx = np.arange(1, len(v) + 1)
    cond = u - css / idx > 0
    rho = idx[cond][-1]
    theta = css[rho - 1] / rho
    return np.maximum(v - theta, 0.0)


def project_feasible(v: np.ndarray, cost: float, floor_last: float = 1e-6) -> np.ndarray:
    """Euclidean projection onto {p >= lb, sum p = 1, sum j p(j) = cost}.

    The projection has the form p = max(lb, v + alpha + beta j). For fixed
    beta, alpha comes from the exact sorted simplex projection; the realized
    cost is then non-decreasing in beta (Cauchy-Schwarz on the active set),
    so the outer multiplier is found by bisection. Nonnegativity and the
    total are exact; the cost constraint holds to bisection tolerance.
    """
    n1 = len(v)
    lb = np.zeros(n1)
    lb[-1] = floor_last
    j = np.arange(n1, dtype=np.float64)
    budget = 1.0 - lb.sum()

    def inner(beta: float) -> np.ndarray:
        return _project_simplex(v + beta * j - lb, budget) + lb

    def phi(beta: float) -> float:
        return float(j @ inner(beta)) - cost

    lo, hi = -1.0, 1.0
    for _ in range(200):
        if phi(lo) <= 0.0:
            break
        lo *= 2.0
    for _ in range(200):
        if phi(hi) >= 0.0:
            break
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if phi(mid) < 0.0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-14 * max(1.0, abs(hi)):
            break
    return inner(0.5 * (lo + hi))


def _certificate(p: np.ndarray, grad: np.ndarray, support_tol: float = 1e-7) -> KKTCertificate:
    """Fit (lambda, mu) on the support and read off the remaining duals."""
    n1 = len(p)
    j = np.arange(n1, dtype=np.float64)
    support = p > support_tol
    if support.sum() >= 2:
        a = np.stack([j[support], np.ones(support.sum())], axis=1)
        coef, *_ = np.linalg.lstsq(a, grad[support], rcond=None)
        lam, mu = float(coef[0]), float(coef[1])
    else:
        lam, mu = 0.0, float(grad[support][0]) if support.any() else 0.0
    u = grad - lam * j - mu
    resid = float(np.abs(u[support]).max()) if support.any() else 0.0
    u = np.where(support, 0.0, u)
    return KKTCertificate(lagrange_lambda=lam, lagrange_mu=mu, multipliers=u,
                          max_stationarity_residual=resid)


@dataclass
class OracleSolution:
    probabilities: np.ndarray
    objective: float
    certificate: KKTCertificate
    distinct_optima: List[Tuple[float, np.ndarray]] = field(default_factory=list)


def _pgd(p0: np.ndarray, instance: OptimizationInstance, floor_last: float,
         max_iters: int, tol_step: float) -> Tuple[np.ndarray, float]:
    p = p0
    f = objective(p, instance)
    step = 1.0
    for _ in range(max_iters):
        g = objective_gradient(p, instance)
        improved = False
        for _ in range(60):
            cand = project_feasible(p - step * g, instance.cost, floor_last)
            move_sq = float(np.sum((cand - p) ** 2))
            fc = objective(cand, instance)
            if fc <= f - 1e-4 * move_sq / step:
                improved = True
                break
            step *= 0.5
        if not improved:
            break
        p, f = cand, fc
        if math.sqrt(move_sq) < tol_step * (1.0 + float(np.linalg.norm(p))):
            break
        step *= 2.0
    return p, f


def brute_force_optimum(instance: OptimizationInstance, restarts: int = 50,
                        seed: int = 0, max_iters: int = 4000,
                        floor_last: float = 1e-6,
                        residual_tol: float = 1e-3) -> OracleSolution:
    """Minimize F over the cost-constrained simplex; verify KKT at the winner.

    Runs projected gradient descent with backtracking from `restarts` random
    feasible points (plus a uniform start), keeps the best, and reports every
    distinct restart optimum so multi-modality is visible rather than assumed
    away. Raises OracleConvergenceError (carrying the best point found) when
    the winner's scaled stationarity residual exceeds residual_tol.
    """
    t = instance.improvements
    n1 = len(t) + 1
    rng = generator(seed)
    starts = [np.full(n1, 1.0 / n1)]
    for _ in range(max(restarts - 1, 0)):
        starts.append(rng.exponential(size=n1))
    results: List[Tuple[float, np.ndarray]] = []
    for p0 in starts:
        p0 = project_feasible(p0 / p0.sum(), instance.cost, floor_last)
        p, f = _pgd(p0, instance, floor_last, max_iters, tol_step=1e-13)
        results.append((f, p))
    results.sort(key=lambda r: r[0])
    best_f, best_p = results[0]

    distinct: List[Tuple[float, np.ndarray]] = []
    for f, p in results:
        if not any(abs(f - f0) <= 1e-6 * max(1.0, abs(f0))
                   and np.max(np.abs(p - p0)) <= 1e-4 for f0, p0 in distinct):
            distinct.append((f, p))

    grad = objective_gradient(best_p, instance)
    cert = _certificate(best_p, grad)
    scale = max(1.0, float(np.abs(grad).max()))
    sol = OracleSolution(probabilities=best_p, objective=best_f,
                         certificate=cert, distinct_optima=distinct)
    if cert.max_stationarity_residual > residual_tol * scale:
        raise OracleConvergenceError(
            f"stationarity residual {cert.max_stationarity_residual:.3e} "
            f"exceeds {residual_tol:.1e} x scale", best=sol)
    return sol


def as_objective(instance: OptimizationInstance, config: ASConfig) -> float:
    """F evaluated at the offline adaptive schedule for these improvements."""
    sched = as_probabilities_finite(instance.improvements, config)
    n = instance.n_iterations
    p = np.array([sched.prob(j) for j in range(n + 1)])
    return objective(p, instance)


def matched_instance(improvements: Sequence[float], eta: float) -> Tuple[OptimizationInstance, ASConfig]:
    """Instance whose cost budget equals the adaptive schedule's average cost."""
    cfg = ASConfig(eta)
    c = expected_cost(improvements, cfg)
    return OptimizationInstance(np.asarray(improvements, dtype=np.float64), c), cfg


def make_adversarial_instance(n: int, m: int, epsilon: float, N: int) -> OptimizationInstance:
    """Improvement sequence on which no on-the-fly rule can stay optimal.

    The construction: a unit improvement at index n+1, an m-long flat stretch
    just below it (within epsilon), a rebound to exactly 1 + m*epsilon at
    index n+m+2, and enough unit tail mass afterwards. Every inequality is
    re-checked programmatically before returning. The cost budget is the
    adaptive schedule's average cost at eta = n + 0.5.
    """
    if epsilon <= 0.0:
        raise ValueError("epsilon must be strictly positive")
    if not (-1 <= n and m >= 1 and n + m + 3 <= N - 1):
        raise ValueError(f"infeasible parameters: need n+m+3 <= N-1, got {n + m + 3} vs {N - 1}")
    if N > 30:
        raise ValueError("oracle instances are capped at N = 30")
    t = np.empty(N)
    for k in range(n + 1):
        t[k] = 2.0 + (n - k)  # decreasing prefix above the anchor
    t[n + 1] = 1.0
    t[n + 2:n + m + 2] = 1.0 - 0.5 * epsilon
    t[n + m + 2] = 1.0 + m * epsilon
    t[n + m + 3:] = 1.0

    # re-check every constraint of the construction
    if n >= 0:
        assert t[n] ** 1 > t[n + 1]
    assert t[n + 2] + epsilon > t[n + 1] > t[n + 2]
    for k in range(n + 2, n + m + 1):
        assert t[k + 1] == t[k]
    assert abs(t[n + m + 2] - (t[n + 1] + m * epsilon)) < 1e-14
    assert float(np.sum(t[n + m + 2:])) > t[n + 1] + m * epsilon

    cfg = ASConfig.from_n_sigma(n, 0.5)
    c = expected_cost(t, cfg)
    return OptimizationInstance(t, c)
