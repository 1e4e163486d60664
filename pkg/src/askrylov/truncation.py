"""Truncation schedules for unbiased randomized early stopping.

Given the per-iteration improvements t_j >= 0 of a Krylov run (t_j is the
exact reduction of the squared error metric contributed by iteration j), the
adaptive schedule places truncation probability mass so that the survival
level after index j is proportional to sqrt of the remaining improvement
scale. Writing P(j) for the probability of truncating before iteration j and
s_j = 1 - sum_{i<=j} P(i) for the survival level, increments are reweighted
by 1/s_j, which keeps the estimate unbiased for any schedule.

With eta in (-1, N-1), n = floor(eta), sigma = eta - n, the first stochastic
index is n+1 with

    P(n+1) = 1 - sigma                                       if n = -1
    P(n+1) = max{0, (1-sigma) (sqrt t_n - sqrt t_{n+1}) / sqrt t_n}  otherwise

and later mass is assigned per contiguous groups S_k of indices pooled until
the group means g_k are non-increasing (a pool-adjacent-violators sweep over
the improvements). Each group contributes

    (1 - P(n+1)) (sqrt g_{k-1} - sqrt g_k) / sqrt t_{n+1}

placed at the group's smallest index in the offline schedule and at the
group's largest index in the streaming one (same values, strictly later
placement, so strictly less variance at the same cost). The leftover mass is
the probability of running everything.

On strictly decreasing improvements every group is a singleton and both
placements coincide with the per-index closed form; the resulting schedule
solves the variance-versus-cost problem exactly. With plateaus or bumps the
schedule stays valid and unbiased but is provably not cost-optimal (see the
oracle module for the numerical comparison).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np


class ScheduleInconsistencyError(RuntimeError):
    """A conditional truncation probability left [0, 1]."""


class AnchorDegenerateError(ValueError):
    """The improvement anchoring the schedule (t_{n+1}) is zero."""


class DegenerateImprovementError(ValueError):
    """t_n = 0 with n >= 0: the run converged before the deterministic prefix ended."""


@dataclass(frozen=True)
class ASConfig:
    """Adaptive-schedule parameter eta > -1; n = floor(eta), sigma = eta - n.

    In the offline finite setting eta must also stay below N-1. The boundary
    pair (n, sigma=1) is reachable through from_n_sigma for edge cases.
    """

    eta: float
    n: int = field(init=False)
    sigma: float = field(init=False)

    def __post_init__(self):
        if not (self.eta > -1.0) or not math.isfinite(self.eta):
            raise ValueError("eta must be a finite real > -1")
        n = math.floor(self.eta)
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "sigma", self.eta - n)

    @classmethod
    def from_n_sigma(cls, n: int, sigma: float) -> "ASConfig":
        if n < -1 or not (0.0 <= sigma <= 1.0):
            raise ValueError("need n >= -1 and sigma in [0, 1]")
        cfg = cls.__new__(cls)
        object.__setattr__(cfg, "eta", n + sigma)
        object.__setattr__(cfg, "n", n)
        object.__setattr__(cfg, "sigma", sigma)
        return cfg


@dataclass(frozen=True)
class RRConfig:
    """Exponential roulette baseline: survival exp(-lam * (j - min_iters))."""

    min_iters: int = 0
    lam: float = 0.05

    def __post_init__(self):
        if self.min_iters < 0:
            raise ValueError("min_iters must be >= 0")
        if not (self.lam > 0.0 and math.isfinite(self.lam)):
            raise ValueError("lambda must be positive and finite")

    def survival(self, j: int) -> float:
        """Probability that iteration j executes (s_j)."""
        if j <= self.min_iters:
            return 1.0
        return math.exp(-self.lam * (j - self.min_iters))


@dataclass(frozen=True)
class TruncationSchedule:
    """Truncation probabilities P(j) plus the run-everything mass at `horizon`.

    probs holds the emitted entries; indices absent from it have P = 0.
    cumulative sums never exceed 1 and, for a complete schedule, total
    exactly 1 (the entry at `horizon` is the probability of applying all
    `horizon` increments).
    """

    probs: Dict[int, float]
    horizon: int

    def __post_init__(self):
        idx = sorted(self.probs)
        cum = 0.0
        for j in idx:
            p = self.probs[j]
            if p < -1e-12 or p > 1.0 + 1e-12:
                raise ValueError(f"P({j}) = {p} outside [0, 1]")
            cum += p
        if cum > 1.0 + 1e-12:
            raise ValueError(f"cumulative probability {cum} exceeds 1")
        object.__setattr__(self, "_indices", idx)
        object.__setattr__(self, "_cum", np.cumsum([self.probs[j] for j in idx]))

    def prob(self, j: int) -> float:
        return self.probs.get(j, 0.0)

    def cumulative(self, j: int) -> float:
        """sum_{i <= j} P(i)."""
        pos = np.searchsorted(self._indices, j, side="right")
        return float(self._cum[pos - 1]) if pos else 0.0

    def survival(self, j: int) -> float:
        """s_j = 1 - cumulative(j)."""
        return 1.0 - self.cumulative(j)

    def total(self) -> float:
        return float(self._cum[-1]) if len(self._cum) else 0.0

    def expected_iterations(self) -> float:
        return float(sum(j * p for j, p in self.probs.items()))

    def csv_rows(self) -> Iterable[Tuple[int, float, float]]:
        """(j, P(j), s_j) for every emitted index."""
        for j in self._indices:
            yield j, self.probs[j], self.survival(j)


def initial_prob(config: ASConfig, t_n: Optional[float], t_next: float) -> float:
    """P(n+1), the first possibly-nonzero truncation probability.

    t_n must be absent exactly when n = -1. Returns 0 when the improvement
    failed to decrease from t_n to t_next.
    """
    if t_next < 0:
        raise ValueError("improvements must be non-negative")
    if config.n == -1:
        if t_n is not None:
            raise ValueError("t_n must be absent when n = -1")
        return 1.0 - config.sigma
    if t_n is None:
        raise ValueError("t_n is required when n >= 0")
    if t_n <= 0.0:
        raise DegenerateImprovementError(
            "t_n = 0 with n >= 0: run converged before the deterministic prefix")
    return max(0.0, (1.0 - config.sigma) * (math.sqrt(t_n) - math.sqrt(t_next)) / math.sqrt(t_n))


@dataclass(frozen=True)
class Group:
    """Contiguous pooled index range [start, end] and its mean improvement.

    end may exceed the last real index when zero-improvement padding was
    needed to bring the mean down to the previous group's level.
    """

    start: int
    end: int
    mean: float


def _pool_groups(t: np.ndarray, first: int, g0: float, last_real: int) -> List[Group]:
    """Greedy pooling of t[first..last_real] (plus zero padding) against g0.

    Each group is the shortest prefix whose running mean is <= the previous
    group's mean; exact ties close the group. If a group mean reaches 0 while
    positive improvements remain, the remaining mass is 0 and pooling stops
    (later indices keep probability 0 regardless).
    """
    groups: List[Group] = []
    g_prev = g0
    i = first
    while i <= last_real:
        if g_prev <= 0.0:
            break
        start = i
        total = t[i]
        count = 1
        i += 1
        while total > g_prev * count:  # mean > g_prev: keep pooling
            if i <= last_real:
                total += t[i]
            i += 1
            count += 1
        groups.append(Group(start=start, end=start + count - 1, mean=total / count))
        g_prev = total / count
    return groups


def as_schedule_with_groups(improvements: Sequence[float],
                            config: ASConfig) -> Tuple[TruncationSchedule, List[Group]]:
    """Offline schedule over j = 0..N plus the pooled groups that produced it.

    Probability mass lands at each group's smallest index and at N; pooling
    pads zero-improvement dummy iterations past N-1 when needed.
    """
    t = np.asarray(improvements, dtype=np.float64)
    if t.ndim != 1:
        raise ValueError("improvements must be a 1-d sequence")
    if np.any(t < 0):
        raise ValueError("improvements must be non-negative")
    n_iters = len(t)
    if n_iters < 2:
        raise ValueError("need at least two improvements")
    n = config.n
    if n > n_iters - 2:
        raise ValueError(f"eta = {config.eta} needs n <= N-2 = {n_iters - 2}")
    if t[n + 1] <= 0.0:
        raise AnchorDegenerateError("t_{n+1} = 0: schedule anchor is degenerate")
    p1 = initial_prob(config, float(t[n]) if n >= 0 else None, float(t[n + 1]))
    anchor = math.sqrt(t[n + 1])
    rest = 1.0 - p1

    probs: Dict[int, float] = {}
    if n + 1 <= n_iters - 1:
        probs[n + 1] = p1
    groups = _pool_groups(t, n + 2, float(t[n + 1]), n_iters - 1)
    g_prev = float(t[n + 1])
    for grp in groups:
        probs[grp.start] = rest * (math.sqrt(g_prev) - math.sqrt(grp.mean)) / anchor
        g_prev = grp.mean
    g_last = groups[-1].mean if groups else float(t[n + 1])
    if groups and groups[-1].end < n_iters - 1:
        g_last = 0.0  # pooling hit a zero-mean group; no mass remains
    probs[n_iters] = rest * math.sqrt(g_last) / anchor
    schedule = TruncationSchedule(probs=probs, horizon=n_iters)
    total = schedule.total()
    if abs(total - 1.0) > 1e-10:
        raise ScheduleInconsistencyError(f"schedule mass {total} != 1")
    return schedule, groups


def as_probabilities_finite(improvements: Sequence[float],
                            config: ASConfig) -> TruncationSchedule:
    """Offline schedule (mass at group minima); see as_schedule_with_groups."""
    return as_schedule_with_groups(improvements, config)[0]


def expected_cost(improvements: Sequence[float], config: ASConfig) -> float:
    """Average number of applied increments, sum_j j P(j), of the offline schedule."""
    return as_probabilities_finite(improvements, config).expected_iterations()


def expected_cost_closed_form(improvements: Sequence[float], config: ASConfig) -> float:
    """Closed-form average cost; valid only for strictly decreasing improvements."""
    t = np.asarray(improvements, dtype=np.float64)
    root = np.sqrt(t)
    n = config.n
    sigma = config.sigma
    n_iters = len(t)
    tail = float(np.sum(root[n + 2:n_iters])) / root[n + 1]
    if n == -1:
        return sigma + sigma * tail
    ratio = root[n + 1] / root[n]
    return (n + 1) + (sigma + (1.0 - sigma) * ratio) * (1.0 + tail)


# ---------------------------------------------------------------------------
# Streaming pooling (mass at group maxima, one-step lookahead)
# ---------------------------------------------------------------------------

@dataclass
class PoolState:
    """State of the streaming pooling sweep.

    The candidate group covers indices [start_index, next_index); its running
    mean is g_curr and the previous committed group mean is g_prev. anchor is
    sqrt(t_{n+1}) and p_init = P(n+1). Feeding improvement t_i (arriving at
    next_index = i) fixes the probability of index i-1: zero if the candidate
    keeps pooling, the emitted value if it closes.
    """

    anchor: float
    p_init: float
    g_prev: float
    g_curr: float
    count: int
    start_index: int
    next_index: int
    clamped: int = 0

    @classmethod
    def start(cls, p_init: float, t_anchor: float, t_first: float,
              first_index: int) -> "PoolState":
        """Begin pooling: committed group mean t_anchor, candidate {first_index}."""
        if t_anchor <= 0.0:
            raise AnchorDegenerateError("t_{n+1} = 0: schedule anchor is degenerate")
        clamped = 0
        if t_first < 0.0:
            t_first, clamped = 0.0, 1
        return cls(anchor=math.sqrt(t_anchor), p_init=p_init, g_prev=t_anchor,
                   g_curr=t_first, count=1, start_index=first_index,
                   next_index=first_index + 1, clamped=clamped)

    @property
    def pending_indices(self) -> range:
        return range(self.start_index, self.next_index)


def pool_step(state: PoolState, t_i: Optional[float]) -> Tuple[PoolState, Optional[Tuple[int, float]]]:
    """Feed the next improvement (None for end of stream); fixes one index.

    Returns (new state, emitted) where emitted is None when t_i was absorbed
    (index next_index-1 is confirmed interior, probability 0) and the pair
    (index, P) when the candidate closed at its largest index. End of stream
    flushes the open candidate, clamping at 0 if its mean is still above the
    committed level.
    """
    if t_i is None:
        last = state.next_index - 1
        p = (1.0 - state.p_init) * max(0.0, math.sqrt(state.g_prev) - math.sqrt(state.g_curr)) / state.anchor
        return state, (last, p)
    clamped = state.clamped
    if t_i < 0.0:
        t_i, clamped = 0.0, clamped + 1
    if state.g_prev < state.g_curr:
        new = replace(state,
                      g_curr=(state.g_curr * state.count + t_i) / (state.count + 1),
                      count=state.count + 1,
                      next_index=state.next_index + 1,
                      clamped=clamped)
        return new, None
    last = state.next_index - 1
    p = (1.0 - state.p_init) * (math.sqrt(state.g_prev) - math.sqrt(state.g_curr)) / state.anchor
    new = replace(state, g_prev=state.g_curr, g_curr=t_i, count=1,
                  start_index=state.next_index, next_index=state.next_index + 1,
                  clamped=clamped)
    return new, (last, p)


def streaming_schedule(improvements: Sequence[float], config: ASConfig) -> TruncationSchedule:
    """Schedule the streaming sweep realizes on a finished run's improvements.

    Mass lands at group maxima; the open candidate is flushed at the end of
    the stream and the leftover mass (stored at horizon = len(improvements))
    is the probability of applying every computed increment. This is exactly
    the distribution the randomized driver samples from, so its expectation
    is the driver's average executed-iteration count.
    """
    t = [float(v) for v in improvements]
    n = config.n
    L = len(t)
    probs: Dict[int, float] = {}
    if n + 1 >= L:
        probs[L] = 1.0  # wholly deterministic prefix
        return TruncationSchedule(probs=probs, horizon=L)
    p1 = initial_prob(config, t[n] if n >= 0 else None, t[n + 1])
    probs[n + 1] = p1
    if n + 2 >= L:
        probs[L] = 1.0 - p1
        return TruncationSchedule(probs=probs, horizon=L)
    state = PoolState.start(p1, t[n + 1], t[n + 2], n + 2)
    for i in range(n + 3, L):
        state, emitted = pool_step(state, t[i])
        if emitted is not None:
            probs[emitted[0]] = emitted[1]
    _, flushed = pool_step(state, None)
    probs[flushed[0]] = probs.get(flushed[0], 0.0) + flushed[1]
    cum = sum(probs.values())
    probs[L] = max(0.0, 1.0 - cum)
    return TruncationSchedule(probs=probs, horizon=L)


def expected_cost_streaming(improvements: Sequence[float], config: ASConfig) -> float:
    """Average applied increments of the streaming schedule (driver accounting)."""
    return streaming_schedule(improvements, config).expected_iterations()


def calibrate_eta(improvements: Sequence[float], target_cost: float,
                  tol: float = 1e-3) -> float:
    """Bisect eta so the streaming schedule's average cost matches target_cost.

    The cost is monotone increasing in eta; improvements are the telemetry of
    a completed deterministic run on the system of interest.
    """
    L = len(improvements)
    if not (0.0 < target_cost <= L):
        raise ValueError(f"target cost must lie in (0, {L}]")
    lo, hi = -1.0 + 1e-9, float(L)
    cost = lambda e: expected_cost_streaming(improvements, ASConfig(e))
    if cost(hi) < target_cost:
        return hi
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if cost(mid) < target_cost:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-10 or abs(cost(mid) - target_cost) <= tol:
            break
    return 0.5 * (lo + hi)


# ---------------------------------------------------------------------------
# Exponential roulette baseline
# ---------------------------------------------------------------------------

def rr_schedule(config: RRConfig, horizon: int) -> TruncationSchedule:
    """Exponential-survival schedule over j = 0..horizon.

    P(j) = Q(j-1) - Q(j) with Q(j) = exp(-lam (j - min_iters)) past the
    deterministic prefix; the residual survival mass at the horizon is the
    probability of running to convergence.
    """
    if horizon < config.min_iters:
        raise ValueError("horizon must be >= min_iters")
    probs: Dict[int, float] = {}
    q_prev = 1.0
    for j in range(config.min_iters + 1, horizon + 1):
        q = config.survival(j)
        probs[j] = q_prev - q
        q_prev = q
    probs[horizon] = probs.get(horizon, 0.0) + q_prev  # tail: run to convergence
    return TruncationSchedule(probs=probs, horizon=horizon)


def sample_truncation(schedule, j: int, survival_prev: float,
                      rng: np.random.Generator) -> bool:
    """Draw the truncate-before-j decision; consumes exactly one uniform.

    schedule may be a TruncationSchedule or a plain {index: P} mapping.
    True means: stop before applying increment j.
    """
    if survival_prev <= 0.0:
        raise ScheduleInconsistencyError("survival must be positive before sampling")
    p = schedule.prob(j) if isinstance(schedule, TruncationSchedule) else schedule.get(j, 0.0)
    cond = p / survival_prev
    if cond > 1.0 + 1e-12:
        raise ScheduleInconsistencyError(
            f"conditional truncation probability {cond} > 1 at index {j}")
    return rng.random() < cond
