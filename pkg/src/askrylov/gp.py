"""Gaussian-process hyperparameter training with randomized linear solves.

The marginal-likelihood loss 0.5 y^T K^{-1} y + 0.5 logdet K + (N/2) log 2pi
is minimized over log-parameters (outputscale, lengthscale, noise variance)
of an RBF kernel with Adam. Gradients need tr(K^{-1} dK) and
y^T K^{-1} dK K^{-1} y; the trace is estimated by Hutchinson probing with
Rademacher vectors and all K^{-1} applications are delegated to a pluggable
solver: exact Cholesky, deterministically truncated CG, or the randomized
unbiased CG variants.

The bilinear term multiplies two solves against the same right-hand side;
with a randomized solver the two factors are drawn independently so their
product stays unbiased (a config flag restores the cheaper correlated-solve
variant for comparison).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import scipy.linalg

from .driver import ASEstimator, RREstimator, randomized_solve
from .linop import LinearOperator
from .seeds import generator
from .solvers import solve_deterministic

LOG_2PI = math.log(2.0 * math.pi)
PARAM_NAMES = ("log_gamma", "log_l", "log_sigma2")


@dataclass(frozen=True)
class GPHyperparams:
    """Positive kernel hyperparameters stored as logs."""

    log_gamma: float
    log_l: float
    log_sigma2: float

    @classmethod
    def from_values(cls, gamma: float, l: float, sigma2: float) -> "GPHyperparams":
        if min(gamma, l, sigma2) <= 0:
            raise ValueError("hyperparameters must be positive")
        return cls(math.log(gamma), math.log(l), math.log(sigma2))

    @property
    def gamma(self) -> float:
        return math.exp(self.log_gamma)

    @property
    def l(self) -> float:
        return math.exp(self.log_l)

    @property
    def sigma2(self) -> float:
        return math.exp(self.log_sigma2)

    def as_array(self) -> np.ndarray:
        return np.array([self.log_gamma, self.log_l, self.log_sigma2])

    @classmethod
    def from_array(cls, a) -> "GPHyperparams":
        return cls(float(a[0]), float(a[1]), float(a[2]))


@dataclass(frozen=True)
class GPDataset:
    """Inputs X (N x d) and targets y (N); rows of X must be distinct."""

    X: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.float64)
        if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0]:
            raise ValueError("X must be N x d and y length N")
        d2 = _sq_dists(X)
        off = d2 + np.diag(np.full(len(y), np.inf))
        if off.min() <= 1e-12:
            raise ValueError("duplicate input rows would make the kernel singular")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return len(self.y)


def _sq_dists(X: np.ndarray) -> np.ndarray:
    sq = np.sum(X * X, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (X @ X.T)
    return np.maximum(d2, 0.0)


@dataclass(frozen=True)
class Kernel:
    """Dense SPD kernel matrix and its three log-parameter derivatives."""

    params: GPHyperparams
    K: np.ndarray
    dK: Dict[str, np.ndarray]

    def operator(self) -> LinearOperator:
        return LinearOperator.from_dense(self.K, symmetric=True, spd_asserted=True)

    def partial(self, name: str) -> np.ndarray:
        return self.dK[name]


def kernel_matrix(params: GPHyperparams, X: np.ndarray) -> Kernel:
    """RBF kernel gamma * exp(-||xi-xj||^2 / (2 l^2)) + sigma2 on the diagonal."""
    X = np.asarray(X, dtype=np.float64)
    d2 = _sq_dists(X)
    rbf = params.gamma * np.exp(-0.5 * d2 / params.l ** 2)
    k = rbf + params.sigma2 * np.eye(len(X))
    dk = {
        "log_gamma": rbf,
        "log_l": rbf * (d2 / params.l ** 2),
        "log_sigma2": params.sigma2 * np.eye(len(X)),
    }
    return Kernel(params=params, K=k, dK=dk)


@dataclass(frozen=True)
class ProbeSet:
    """Rademacher probe vectors as columns of Z (entries +-1)."""

    Z: np.ndarray

    def __post_init__(self):
        Z = np.asarray(self.Z, dtype=np.float64)
        if not np.all(np.abs(Z) == 1.0):
            raise ValueError("probe entries must be +-1")
        object.__setattr__(self, "Z", Z)

    @property
    def count(self) -> int:
        return self.Z.shape[1]


def rademacher_probes(n: int, t: int, rng: np.random.Generator) -> ProbeSet:
    return ProbeSet(Z=rng.integers(0, 2, size=(n, t)).astype(np.float64) * 2.0 - 1.0)


def exact_mll_and_grad(params: GPHyperparams, data: GPDataset) -> Tuple[float, np.ndarray]:
    """Cholesky-based loss and gradient over the three log-parameters.

    Retries once with a small diagonal jitter if the factorization fails.
    """
    kern = kernel_matrix(params, data.X)
    k = kern.K
    try:
        cho = scipy.linalg.cho_factor(k, lower=True)
    except scipy.linalg.LinAlgError:
        k = k + 1e-8 * np.mean(np.diag(k)) * np.eye(len(k))
        cho = scipy.linalg.cho_factor(k, lower=True)
    alpha = scipy.linalg.cho_solve(cho, data.y)
    logdet = 2.0 * float(np.sum(np.log(np.diag(cho[0]))))
    loss = 0.5 * float(data.y @ alpha) + 0.5 * logdet + 0.5 * data.n * LOG_2PI
    grad = np.empty(3)
    kinv = scipy.linalg.cho_solve(cho, np.eye(data.n))
    for i, name in enumerate(PARAM_NAMES):
        dk = kern.partial(name)
        # tr(K^{-1} dK) = sum(K^{-1} * dK) since both factors are symmetric
        grad[i] = 0.5 * (float(np.sum(kinv * dk)) - float(alpha @ dk @ alpha))
    return loss, grad


# ---------------------------------------------------------------------------
# Pluggable K^{-1} application
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CholeskySolve:
    """Exact solves; the fully deterministic benchmark."""

    label: str = "cholesky"


@dataclass(frozen=True)
class TruncatedCG:
    """Deterministic CG stopped at a fixed iteration cap (biased)."""

    maxit: int
    label: str = "cg"


@dataclass(frozen=True)
class ASCGSolve:
    """Unbiased adaptively subsampled CG."""

    eta: float
    label: str = "as"


@dataclass(frozen=True)
class RRCGSolve:
    """Unbiased exponential-roulette CG."""

    min_iters: int
    lam: float
    label: str = "rr"


SolverSpec = Union[CholeskySolve, TruncatedCG, ASCGSolve, RRCGSolve]


class _SolveContext:
    """Binds a solver spec to one kernel; shared by all solves at that kernel."""

    def __init__(self, spec: SolverSpec, kern: Kernel, tol: float, maxit: int):
        self.spec = spec
        self.tol = tol
        self.maxit = maxit
        self.iters: List[int] = []
        if isinstance(spec, CholeskySolve):
            self._cho = scipy.linalg.cho_factor(kern.K, lower=True)
            self._op = None
        else:
            self._op = kern.operator()

    def solve(self, b: np.ndarray, x0: Optional[np.ndarray],
              rng: np.random.Generator) -> np.ndarray:
        spec = self.spec
        if isinstance(spec, CholeskySolve):
            self.iters.append(0)
            return scipy.linalg.cho_solve(self._cho, b)
        if isinstance(spec, TruncatedCG):
            # tol below machine range: always runs the full iteration cap
            res = solve_deterministic(self._op, b, x0, tol=1e-300,
                                      maxit=spec.maxit, method="cg")
            self.iters.append(res.iterations)
            return res.x
        if isinstance(spec, ASCGSolve):
            est = ASEstimator(eta=spec.eta)
        else:
            est = RREstimator(min_iters=spec.min_iters, lam=spec.lam)
        res = randomized_solve(self._op, b, x0, "cg", est, self.tol, self.maxit, rng)
        self.iters.append(res.executed_iterations)
        return res.estimate


def stochastic_grad(params: GPHyperparams, data: GPDataset, probes: ProbeSet,
                    solver: SolverSpec, rng: np.random.Generator,
                    tol: float = 1e-8, maxit: Optional[int] = None,
                    warm_start_y: Optional[np.ndarray] = None,
                    single_solve_bilinear: bool = False
                    ) -> Tuple[np.ndarray, Dict[str, object]]:
    """Hutchinson-probed gradient with solver-delegated K^{-1} applications.

    One solve per probe estimates tr(K^{-1} dK) as mean of
    (K^{-1} z_i)^T (dK z_i). The bilinear y-term uses two independent solves
    u, v against y and forms u^T dK v unless single_solve_bilinear is set.
    """
    if probes.count < 1:
        raise ValueError("probe set must be non-empty")
    kern = kernel_matrix(params, data.X)
    ctx = _SolveContext(solver, kern, tol, maxit if maxit is not None else 10 * data.n)
    u = ctx.solve(data.y, warm_start_y, rng)
    v = u if single_solve_bilinear or isinstance(solver, (CholeskySolve, TruncatedCG)) \
        else ctx.solve(data.y, warm_start_y, rng)
    kinv_z = np.empty_like(probes.Z)
    for i in range(probes.count):
        kinv_z[:, i] = ctx.solve(probes.Z[:, i], None, rng)
    grad = np.empty(3)
    for idx, name in enumerate(PARAM_NAMES):
        dk = kern.partial(name)
        trace_est = float(np.mean(np.einsum("ij,ij->j", kinv_z, dk @ probes.Z)))
        quad = float(u @ (dk @ v))
        grad[idx] = 0.5 * (trace_est - quad)
    info = {"avg_iters": float(np.mean(ctx.iters)), "y_solution": u}
    return grad, info


# ---------------------------------------------------------------------------
# Adam and the training loop
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, dim: int) -> "AdamState":
        return cls(m=np.zeros(dim), v=np.zeros(dim))


def adam_step(state: AdamState, theta: np.ndarray, grad: np.ndarray, lr: float,
              beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> np.ndarray:
    state.t += 1
    state.m = beta1 * state.m + (1.0 - beta1) * grad
    state.v = beta2 * state.v + (1.0 - beta2) * grad * grad
    m_hat = state.m / (1.0 - beta1 ** state.t)
    v_hat = state.v / (1.0 - beta2 ** state.t)
    return theta - lr * m_hat / (np.sqrt(v_hat) + eps)


@dataclass(frozen=True)
class TrainConfig:
    solver: SolverSpec = CholeskySolve()
    steps: int = 100
    lr: float = 0.01
    lr_decay_steps: Tuple[int, ...] = (55, 90)
    lr_decay_factor: float = 0.3
    probes: int = 30
    tol: float = 1e-8
    maxit: Optional[int] = None
    seed: int = 0
    init: GPHyperparams = GPHyperparams(0.0, 0.0, math.log(0.1))
    warm_start: bool = True
    single_solve_bilinear: bool = False


@dataclass
class TrainStep:
    step: int
    loss: float
    params: GPHyperparams
    avg_solver_iters: float


@dataclass
class TrainingTrace:
    steps: List[TrainStep] = field(default_factory=list)
    diverged: bool = False

    @property
    def final_params(self) -> GPHyperparams:
        return self.steps[-1].params

    def losses(self) -> np.ndarray:
        return np.array([s.loss for s in self.steps])


def train(data: GPDataset, config: TrainConfig) -> TrainingTrace:
    """Adam loop over the log-hyperparameters; loss monitored by Cholesky.

    Fresh Rademacher probes are drawn every step. With warm_start the y-solve
    starts from the previous step's accumulated solution (independent of the
    current step's truncation randomness, so unbiasedness is preserved).
    Divergence (non-finite monitored loss) aborts with the trace so far.
    """
    rng = generator(config.seed)
    theta = config.init.as_array()
    adam = AdamState.zeros(3)
    trace = TrainingTrace()
    lr = config.lr
    warm: Optional[np.ndarray] = None
    for s in range(config.steps):
        if s in config.lr_decay_steps:
            lr *= config.lr_decay_factor
        params = GPHyperparams.from_array(theta)
        loss, _ = exact_mll_and_grad(params, data)
        if not math.isfinite(loss):
            trace.diverged = True
            return trace
        if isinstance(config.solver, CholeskySolve):
            _, grad = exact_mll_and_grad(params, data)
            avg_iters = 0.0
        else:
            probes = rademacher_probes(data.n, config.probes, rng)
            grad, info = stochastic_grad(
                params, data, probes, config.solver, rng, tol=config.tol,
                maxit=config.maxit, warm_start_y=warm if config.warm_start else None,
                single_solve_bilinear=config.single_solve_bilinear)
            avg_iters = info["avg_iters"]
            warm = info["y_solution"]
        trace.steps.append(TrainStep(step=s, loss=loss, params=params,
                                     avg_solver_iters=avg_iters))
        theta = adam_step(adam, theta, grad, lr)
    return trace


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------

def synthetic_dataset(n: int = 300, d: int = 4, seed: int = 7,
                      params: Optional[GPHyperparams] = None) -> GPDataset:
    """Draw y from the RBF prior at known hyperparameters (default desk data)."""
    if params is None:
        params = GPHyperparams.from_values(1.0, 1.5, 0.05)
    rng = generator(seed)
    X = rng.standard_normal((n, d))
    k = kernel_matrix(params, X).K
    chol = np.linalg.cholesky(k)
    y = chol @ rng.standard_normal(n)
    return GPDataset(X=X, y=y)


def load_csv_dataset(path, target_col: int = -1, standardize: bool = True) -> GPDataset:
    """Headerless numeric CSV; one column is the target, the rest features."""
    raw = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
    cols = raw.shape[1]
    tc = target_col % cols
    y = raw[:, tc]
    X = np.delete(raw, tc, axis=1)
    if standardize:
        X = (X - X.mean(axis=0)) / np.where(X.std(axis=0) > 0, X.std(axis=0), 1.0)
        y = (y - y.mean()) / (y.std() if y.std() > 0 else 1.0)
    return GPDataset(X=X, y=y)
