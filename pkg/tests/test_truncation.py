import math

import numpy as np
import pytest

from askrylov.seeds import generator
from askrylov.truncation import (AnchorDegenerateError, ASConfig,
                                 DegenerateImprovementError, PoolState, RRConfig,
                                 ScheduleInconsistencyError, TruncationSchedule,
                                 as_probabilities_finite, as_schedule_with_groups,
                                 calibrate_eta, expected_cost,
                                 expected_cost_closed_form, expected_cost_streaming,
                                 initial_prob, pool_step, rr_schedule,
                                 sample_truncation, streaming_schedule)


def _random_diminishing(rng, n):
    t = np.sort(rng.uniform(0.1, 5.0, size=n))[::-1]
    return t * np.linspace(1.3, 1.0, n)  # strictly decreasing


# ---------------------------------------------------------------------------
# initial probability
# ---------------------------------------------------------------------------

def test_initial_prob_before_first_iteration():
    assert initial_prob(ASConfig(-0.5), None, 3.0) == 0.5


def test_initial_prob_formula():
    assert initial_prob(ASConfig(0.0), 9.0, 1.0) == pytest.approx(2.0 / 3.0)


def test_initial_prob_zero_when_not_decreasing():
    assert initial_prob(ASConfig(0.0), 1.0, 4.0) == 0.0


def test_initial_prob_degenerate():
    with pytest.raises(DegenerateImprovementError):
        initial_prob(ASConfig(0.0), 0.0, 1.0)


def test_config_derivation():
    cfg = ASConfig(3.25)
    assert cfg.n == 3 and cfg.sigma == pytest.approx(0.25)
    cfg = ASConfig(-0.75)
    assert cfg.n == -1 and cfg.sigma == pytest.approx(0.25)
    with pytest.raises(ValueError):
        ASConfig(-1.0)


# ---------------------------------------------------------------------------
# offline schedule
# ---------------------------------------------------------------------------

def test_schedule_two_improvements():
    s = as_probabilities_finite([4.0, 1.0], ASConfig(-0.5))
    assert s.prob(0) == pytest.approx(0.5)
    assert s.prob(1) == pytest.approx(0.25)
    assert s.prob(2) == pytest.approx(0.25)
    assert s.total() == pytest.approx(1.0, abs=1e-12)


def test_schedule_pooling_with_dummies():
    s, groups = as_schedule_with_groups([9.0, 1.0, 4.0], ASConfig(0.0))
    assert s.prob(0) == 0.0
    assert s.prob(1) == pytest.approx(2.0 / 3.0)
    assert s.prob(2) == pytest.approx(0.0, abs=1e-15)
    assert s.prob(3) == pytest.approx(1.0 / 3.0)
    assert len(groups) == 1
    assert (groups[0].start, groups[0].end) == (2, 5)  # 3 dummy iterations
    assert groups[0].mean == pytest.approx(1.0)


def test_schedule_deterministic_limit():
    t = [9.0, 4.0, 1.0]
    s = as_probabilities_finite(t, ASConfig(2.0 - 1e-12))
    assert s.prob(3) >= 1.0 - 1e-9
    assert expected_cost(t, ASConfig(2.0 - 1e-12)) == pytest.approx(3.0, abs=1e-8)


def test_schedule_strictly_diminishing_reduces_to_per_index_form():
    rng = generator(4)
    for _ in range(20):
        n_len = int(rng.integers(3, 12))
        t = _random_diminishing(rng, n_len)
        eta = float(rng.uniform(-0.9, n_len - 1.1))
        cfg = ASConfig(eta)
        s, groups = as_schedule_with_groups(t, cfg)
        assert all(g.start == g.end for g in groups)  # singleton groups
        n, sigma = cfg.n, cfg.sigma
        root = np.sqrt(t)
        p1 = (1 - sigma) if n == -1 else (1 - sigma) * (root[n] - root[n + 1]) / root[n]
        assert s.prob(n + 1) == pytest.approx(p1, abs=1e-14)
        for j in range(n + 2, n_len):
            expect = (root[j - 1] - root[j]) * (1 - p1) / root[n + 1]
            assert s.prob(j) == pytest.approx(expect, rel=1e-12, abs=1e-15)
        assert s.prob(n_len) == pytest.approx(root[-1] * (1 - p1) / root[n + 1], rel=1e-12)


def test_schedule_group_means_non_increasing_property():
    rng = generator(9)
    for _ in range(200):
        n_len = int(rng.integers(2, 20))
        t = rng.uniform(0.0, 3.0, size=n_len)
        t[int(rng.integers(0, n_len))] += 1.0  # keep anchor viable more often
        eta = float(rng.uniform(-0.99, n_len - 1.01))
        cfg = ASConfig(eta)
        if t[cfg.n + 1] <= 0:
            continue
        s, groups = as_schedule_with_groups(t, cfg)
        means = [t[cfg.n + 1]] + [g.mean for g in groups]
        assert all(means[i] >= means[i + 1] - 1e-12 for i in range(len(means) - 1))
        assert all(p >= 0 for p in s.probs.values())
        assert s.total() == pytest.approx(1.0, abs=1e-10)


def test_schedule_survival_proportional_to_group_root():
    rng = generator(12)
    t = _random_diminishing(rng, 8)
    cfg = ASConfig(1.4)
    s, groups = as_schedule_with_groups(t, cfg)
    p1 = s.prob(cfg.n + 1)
    anchor = math.sqrt(t[cfg.n + 1])
    for g in groups:
        for j in range(g.start, min(g.end, len(t) - 1) + 1):
            assert s.survival(j) == pytest.approx((1 - p1) * math.sqrt(g.mean) / anchor,
                                                  rel=1e-10)


def test_schedule_anchor_degenerate():
    with pytest.raises(AnchorDegenerateError):
        as_probabilities_finite([1.0, 0.0, 1.0], ASConfig(0.0))


def test_schedule_zero_tail_after_dead_group():
    # a zero-mean group takes all remaining mass; later positives get zero
    s = as_probabilities_finite([4.0, 0.0, 1.0], ASConfig(-1e-9))
    assert s.prob(1) == pytest.approx(1.0, rel=1e-6)
    assert s.prob(2) == 0.0
    assert s.prob(3) == 0.0
    assert s.total() == pytest.approx(1.0, abs=1e-10)


# ---------------------------------------------------------------------------
# expected cost
# ---------------------------------------------------------------------------

def test_expected_cost_example():
    assert expected_cost([4.0, 1.0], ASConfig(-0.5)) == pytest.approx(0.75)


def test_expected_cost_matches_closed_form_on_diminishing():
    rng = generator(21)
    for _ in range(20):
        n_len = int(rng.integers(3, 10))
        t = _random_diminishing(rng, n_len)
        eta = float(rng.uniform(-0.9, n_len - 1.1))
        assert expected_cost(t, ASConfig(eta)) == pytest.approx(
            expected_cost_closed_form(t, ASConfig(eta)), rel=1e-12)


def test_expected_cost_equals_sum_j_pj():
    t = [9.0, 1.0, 4.0, 2.0, 2.0]
    cfg = ASConfig(0.3)
    s = as_probabilities_finite(t, cfg)
    assert expected_cost(t, cfg) == pytest.approx(
        sum(j * p for j, p in s.probs.items()), abs=1e-12)


# ---------------------------------------------------------------------------
# streaming pooling
# ---------------------------------------------------------------------------

def test_pool_flush_hand_example():
    # t = [4, 1], no initial mass: flush emits P(1) = (2-1)/2 = 0.5
    state = PoolState.start(p_init=0.0, t_anchor=4.0, t_first=1.0, first_index=1)
    _, emitted = pool_step(state, None)
    assert emitted == (1, 0.5)


def test_pool_constant_stream_emits_zeros():
    state = PoolState.start(p_init=0.2, t_anchor=2.0, t_first=2.0, first_index=1)
    for i in range(2, 6):
        state, emitted = pool_step(state, 2.0)
        assert emitted == (i - 1, 0.0)


def test_pool_negative_improvement_clamped():
    state = PoolState.start(p_init=0.0, t_anchor=4.0, t_first=-1e-9, first_index=1)
    assert state.clamped == 1
    state, _ = pool_step(state, -2.0)
    assert state.clamped == 2


def test_pool_group_boundaries_match_offline_on_adversarial_stream():
    from askrylov.oracle import make_adversarial_instance
    inst = make_adversarial_instance(n=-1, m=2, epsilon=0.01, N=10)
    t = inst.improvements
    cfg = ASConfig.from_n_sigma(-1, 0.5)
    _, offline_groups = as_schedule_with_groups(t, cfg)
    # streaming: closes are emitted at group maxima
    state = PoolState.start(p_init=0.5, t_anchor=t[0], t_first=t[1], first_index=1)
    closes = []
    for i in range(2, len(t)):
        state, emitted = pool_step(state, t[i])
        if emitted is not None:
            closes.append(emitted[0])
    # every offline group that closed within the stream ends at a streaming close
    for g in offline_groups:
        if g.end < len(t) - 1:
            assert g.end in closes
    # the final (possibly dummy-padded) offline group corresponds to the open candidate
    assert offline_groups[-1].end >= len(t) - 1


def test_streaming_equals_offline_on_diminishing():
    rng = generator(8)
    for _ in range(20):
        n_len = int(rng.integers(3, 10))
        t = _random_diminishing(rng, n_len)
        eta = float(rng.uniform(-0.9, n_len - 1.1))
        s_off = as_probabilities_finite(t, ASConfig(eta))
        s_str = streaming_schedule(t, ASConfig(eta))
        for j in range(n_len + 1):
            assert s_str.prob(j) == pytest.approx(s_off.prob(j), abs=1e-12)


def test_streaming_schedule_mass_and_cost():
    t = [9.0, 1.0, 4.0, 2.0, 0.5]
    cfg = ASConfig(0.0)
    s = streaming_schedule(t, cfg)
    assert s.total() == pytest.approx(1.0, abs=1e-12)
    assert expected_cost_streaming(t, cfg) == pytest.approx(
        sum(j * p for j, p in s.probs.items()))
    # streaming places mass no earlier than the offline schedule: cost >= offline
    assert expected_cost_streaming(t, cfg) >= expected_cost(t, cfg) - 1e-12


def test_calibrate_eta_hits_target():
    rng = generator(3)
    t = np.sort(rng.uniform(0.01, 4.0, size=60))[::-1]
    for target in [5.0, 20.0, 45.0]:
        eta = calibrate_eta(t, target)
        got = expected_cost_streaming(t, ASConfig(eta))
        assert got == pytest.approx(target, abs=0.01)


# ---------------------------------------------------------------------------
# exponential roulette
# ---------------------------------------------------------------------------

def test_rr_schedule_geometric():
    s = rr_schedule(RRConfig(0, math.log(2.0)), horizon=10)
    assert s.prob(1) == pytest.approx(0.5)
    assert s.prob(2) == pytest.approx(0.25)
    assert s.total() == pytest.approx(1.0, abs=1e-12)


def test_rr_schedule_min_iters_prefix():
    s = rr_schedule(RRConfig(5, 0.3), horizon=12)
    for j in range(6):
        assert s.prob(j) == 0.0
    assert s.prob(6) > 0


def test_rr_lambda_to_zero_is_deterministic():
    s = rr_schedule(RRConfig(0, 1e-12), horizon=50)
    assert s.prob(50) == pytest.approx(1.0, abs=1e-9)
    assert all(s.prob(j) <= 1e-10 for j in range(50))


def test_rr_config_validation():
    with pytest.raises(ValueError):
        RRConfig(-1, 0.1)
    with pytest.raises(ValueError):
        RRConfig(0, 0.0)


# ---------------------------------------------------------------------------
# truncation sampling
# ---------------------------------------------------------------------------

def test_sample_truncation_never_and_always():
    rng = generator(0)
    assert sample_truncation({3: 0.0}, 3, 0.7, rng) is False
    assert sample_truncation({3: 0.7}, 3, 0.7, rng) is True


def test_sample_truncation_consumes_one_uniform():
    rng1, rng2 = generator(42), generator(42)
    sample_truncation({1: 0.3}, 1, 1.0, rng1)
    rng2.random()
    assert rng1.random() == rng2.random()


def test_sample_truncation_monte_carlo_rate():
    rng = generator(77)
    draws = 100_000
    hits = sum(sample_truncation({2: 0.25}, 2, 1.0, rng) for _ in range(draws))
    assert hits / draws == pytest.approx(0.25, abs=0.005)


def test_sample_truncation_inconsistent_schedule():
    with pytest.raises(ScheduleInconsistencyError):
        sample_truncation({1: 0.9}, 1, 0.5, generator(1))


def test_schedule_csv_rows():
    s = as_probabilities_finite([4.0, 1.0], ASConfig(-0.5))
    rows = list(s.csv_rows())
    assert rows[0] == (0, 0.5, 0.5)
    assert rows[-1][0] == 2
