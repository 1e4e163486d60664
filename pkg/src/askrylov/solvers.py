"""Resumable CG, CR, and GMRES iteration streams with per-iteration telemetry.

Each step function advances a single-owner solver state by one iteration and
emits an IterationRecord carrying the step size, direction norm, the exact
per-iteration improvement, the unweighted solution increment, and the updated
residual norm. The randomized driver consumes these records; the improvements
telescope to the initial error:

    CG:    ||x_j - x*||_A^2   = sum_{k>=j} alpha_k^2 ||p_k||_A^2
    CR:    ||r_j||_2^2        = sum_{k>=j} alpha_k^2 ||A p_k||_2^2
    GMRES: ||r_j||^2 - ||r_{j+1}||^2 emitted per step from the progressive
           Givens least-squares update (equal to ||A dx_j||^2 exactly).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .linop import LinearOperator, matvec

_BREAKDOWN_EPS = 1e-300  # only true breakdowns trip the denominators


class SolverBreakdownError(RuntimeError):
    """A denominator vanished before convergence."""


class NotSPDError(SolverBreakdownError):
    """CG observed (Ap, p) <= 0: the operator is not positive definite."""


@dataclass(frozen=True)
class IterationRecord:
    """Telemetry for one solver iteration (0-based index).

    improvement is the exact reduction the iteration contributes to the
    squared error metric of its method and is always >= 0 up to rounding;
    for CG/CR it factors as alpha^2 * q_norm_sq.
    """

    index: int
    alpha: float
    q_norm_sq: float
    improvement: float
    delta_x: np.ndarray
    residual_norm: float


class CGState:
    """Conjugate gradient recurrence state (single owner)."""

    method = "cg"

    def __init__(self, op: LinearOperator, b: np.ndarray, x0: Optional[np.ndarray] = None):
        if not (op.symmetric and op.spd_asserted):
            raise NotSPDError("CG requires a symmetric operator asserted SPD")
        self.x = np.zeros(op.n) if x0 is None else np.array(x0, dtype=np.float64)
        self.b = np.asarray(b, dtype=np.float64)
        self.r = self.b - matvec(op, self.x)
        self.p = self.r.copy()
        self.rr = float(self.r @ self.r)
        self.j = 0

    @property
    def residual_norm(self) -> float:
        return math.sqrt(max(self.rr, 0.0))


def cg_step(state: CGState, op: LinearOperator) -> IterationRecord:
    """One CG iteration; improvement computed as alpha * (r, r)."""
    ap = matvec(op, state.p)
    pap = float(state.p @ ap)
    if pap <= 0.0:
        if state.rr <= _BREAKDOWN_EPS:
            raise SolverBreakdownError("CG stepped at zero residual")
        raise NotSPDError(f"(Ap, p) = {pap:.3e} <= 0: operator is not SPD")
    alpha = state.rr / pap
    delta = alpha * state.p
    improvement = alpha * state.rr
    state.x = state.x + delta
    state.r = state.r - alpha * ap
    rr_new = float(state.r @ state.r)
    beta = rr_new / state.rr
    state.p = state.r + beta * state.p
    state.rr = rr_new
    rec = IterationRecord(index=state.j, alpha=alpha, q_norm_sq=pap,
                          improvement=improvement, delta_x=delta,
                          residual_norm=math.sqrt(max(rr_new, 0.0)))
    state.j += 1
    return rec


class CRState:
    """Conjugate residual recurrence state.

    Valid for symmetric operators; indefinite systems are supported but may
    hit a genuine breakdown when (r, Ar) vanishes at a nonzero residual.
    """

    method = "cr"

    def __init__(self, op: LinearOperator, b: np.ndarray, x0: Optional[np.ndarray] = None):
        if not op.symmetric:
            raise ValueError("CR requires a symmetric operator")
        self.x = np.zeros(op.n) if x0 is None else np.array(x0, dtype=np.float64)
        self.b = np.asarray(b, dtype=np.float64)
        self.r = self.b - matvec(op, self.x)
        self.p = self.r.copy()
        self.ar = matvec(op, self.r)
        self.ap = self.ar.copy()
        self.rar = float(self.r @ self.ar)
        self.j = 0

    @property
    def residual_norm(self) -> float:
        return float(np.linalg.norm(self.r))


def cr_step(state: CRState, op: LinearOperator) -> IterationRecord:
    """One CR iteration; maintains the Ap recursion (one matvec per step)."""
    apap = float(state.ap @ state.ap)
    if apap <= _BREAKDOWN_EPS:
        raise SolverBreakdownError("CR breakdown: ||Ap|| = 0")
    alpha = state.rar / apap
    delta = alpha * state.p
    improvement = alpha ** 2 * apap
    state.x = state.x + delta
    state.r = state.r - alpha * state.ap
    state.ar = matvec(op, state.r)
    rar_new = float(state.r @ state.ar)
    rnorm = float(np.linalg.norm(state.r))
    if abs(state.rar) <= _BREAKDOWN_EPS:
        raise SolverBreakdownError("CR breakdown: (r, Ar) = 0 at nonzero residual")
    beta = rar_new / state.rar
    state.p = state.r + beta * state.p
    state.ap = state.ar + beta * state.ap
    state.rar = rar_new
    rec = IterationRecord(index=state.j, alpha=alpha, q_norm_sq=apap,
                          improvement=improvement, delta_x=delta,
                          residual_norm=rnorm)
    state.j += 1
    return rec


class GMRESState:
    """Unrestarted GMRES with progressive Givens least squares.

    Intermediate solutions come from the direction recursion
    w_m = (v_m - sum_i R[i,m] w_i) / R[m,m]; each step updates
    x <- x + g_m w_m without re-solving the least-squares problem.
    """

    method = "gmres"

    def __init__(self, op: LinearOperator, b: np.ndarray, x0: Optional[np.ndarray] = None):
        self.x = np.zeros(op.n) if x0 is None else np.array(x0, dtype=np.float64)
        self.b = np.asarray(b, dtype=np.float64)
        r0 = self.b - matvec(op, self.x)
        self.beta = float(np.linalg.norm(r0))
        self.V: List[np.ndarray] = [r0 / self.beta] if self.beta > 0 else []
        self.W: List[np.ndarray] = []  # solution-update directions
        self.cs: List[float] = []
        self.sn: List[float] = []
        self.gamma = self.beta  # current residual norm (transformed rhs tail)
        self.breakdown = False
        self.j = 0

    @property
    def residual_norm(self) -> float:
        return abs(self.gamma)


def gmres_step(state: GMRESState, op: LinearOperator) -> IterationRecord:
    """One Arnoldi step with on-the-fly solution increment.

    On happy breakdown (h_{j+1,j} = 0) the least-squares problem is solved
    exactly; the record carries residual 0 and the state is flagged so that
    further steps raise.
    """
    if state.breakdown:
        raise SolverBreakdownError("GMRES already converged exactly (happy breakdown)")
    if not state.V:
        raise SolverBreakdownError("GMRES started at zero residual")
    j = state.j
    w = matvec(op, state.V[j])
    h = np.empty(j + 2)
    for i in range(j + 1):
        h[i] = float(w @ state.V[i])
        w = w - h[i] * state.V[i]
    h[j + 1] = float(np.linalg.norm(w))

    # previously computed rotations applied to the new column
    for i in range(j):
        ci, si = state.cs[i], state.sn[i]
        h[i], h[i + 1] = ci * h[i] + si * h[i + 1], -si * h[i] + ci * h[i + 1]
    denom = math.hypot(h[j], h[j + 1])
    if denom <= _BREAKDOWN_EPS:
        raise SolverBreakdownError("GMRES stagnated: zero subdiagonal and diagonal")
    cj, sj = h[j] / denom, h[j + 1] / denom
    state.cs.append(cj)
    state.sn.append(sj)
    rjj = cj * h[j] + sj * h[j + 1]
    g_j = cj * state.gamma
    gamma_next = -sj * state.gamma

    wdir = state.V[j].copy()
    for i in range(j):
        if h[i] != 0.0:
            wdir -= h[i] * state.W[i]
    wdir /= rjj
    state.W.append(wdir)

    delta = g_j * wdir
    improvement = state.gamma ** 2 - gamma_next ** 2
    state.x = state.x + delta

    if h[j + 1] <= _BREAKDOWN_EPS:
        state.breakdown = True
        gamma_next = 0.0
    else:
        state.V.append(w / h[j + 1])
    state.gamma = gamma_next
    rec = IterationRecord(index=j, alpha=1.0, q_norm_sq=improvement,
                          improvement=improvement, delta_x=delta,
                          residual_norm=abs(gamma_next))
    state.j += 1
    return rec


_STATE_TYPES = {"cg": CGState, "cr": CRState, "gmres": GMRESState}
_STEP_FNS = {"cg": cg_step, "cr": cr_step, "gmres": gmres_step}


def make_state(method: str, op: LinearOperator, b: np.ndarray,
               x0: Optional[np.ndarray] = None):
    try:
        cls = _STATE_TYPES[method]
    except KeyError:
        raise ValueError(f"unknown method {method!r}; expected cg, cr, or gmres")
    return cls(op, b, x0)


def step(state, op: LinearOperator) -> IterationRecord:
    return _STEP_FNS[state.method](state, op)


@dataclass
class DeterministicResult:
    x: np.ndarray
    iterations: int
    history: List[IterationRecord] = field(repr=False)
    converged: bool


def solve_deterministic(op: LinearOperator, b: np.ndarray,
                        x0: Optional[np.ndarray] = None, tol: float = 1e-8,
                        maxit: Optional[int] = None, method: str = "cg",
                        recompute_every: int = 0) -> DeterministicResult:
    """Iterate until the relative residual ||r|| / ||b|| drops below tol.

    Returns a partial result with converged=False when maxit is exceeded.
    recompute_every > 0 refreshes the recursive residual from b - Ax every
    that many iterations (guard against drift on long runs; off by default).
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    b = np.asarray(b, dtype=np.float64)
    if maxit is None:
        maxit = 10 * op.n
    bnorm = float(np.linalg.norm(b))
    scale = bnorm if bnorm > 0 else 1.0
    state = make_state(method, op, b, x0)
    history: List[IterationRecord] = []
    if state.residual_norm <= tol * scale:
        return DeterministicResult(x=state.x.copy(), iterations=0, history=history,
                                   converged=True)
    converged = False
    for k in range(maxit):
        rec = step(state, op)
        history.append(rec)
        if recompute_every and (k + 1) % recompute_every == 0 and state.method != "gmres":
            state.r = b - matvec(op, state.x)
            if state.method == "cg":
                state.rr = float(state.r @ state.r)
            else:
                state.ar = matvec(op, state.r)
                state.rar = float(state.r @ state.ar)
        if rec.residual_norm <= tol * scale or getattr(state, "breakdown", False):
            converged = rec.residual_norm <= tol * scale or getattr(state, "breakdown", False)
            break
    return DeterministicResult(x=state.x.copy(), iterations=len(history),
                               history=history, converged=converged)
