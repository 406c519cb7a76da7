import math
from math import comb

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from backofflab.blocks import build_block_table
from backofflab.engine import RngStream
from backofflab.sequences import binary_exponential, constant, explicit
from backofflab.unsticking import (
    BudgetExceeded,
    RandomUnstickingState,
    ReverseState,
    Trajectory,
    apply_random_unsticking,
    apply_reverse_step,
    departed_trajectories,
    enumerate_trajectories,
    fill_counts,
    fill_membership,
    init_random_unsticking,
    inverse_bijection,
    j_max,
    p_unstick,
    poisson_domination_experiment,
    reverse_bijection,
    run_reverse,
    step_random_unsticking,
    trajectory_mean,
    trajectory_mean_forward,
    trajectory_mean_reverse,
)
from backofflab.jammed import JammedState

TOY = explicit([1.0, 0.5, 0.25, 0.6])


def beb_table(**overrides):
    base = dict(kappa=3, I0=1, zeta=20.0, tau_init=1, C_init=1)
    base.update(overrides)
    return build_block_table(binary_exponential(), 0.5, 0.9, 0.5, overrides=base, cover_tau=64)


def constant_schedule(q):
    return lambda t: q


# p_unstick


def test_p_unstick_is_one_up_to_t0():
    table = beb_table()
    assert all(p_unstick(table, 5, t) == 1.0 for t in range(1, 6))
    assert p_unstick(table, 5, 6) < 1.0


def test_p_unstick_zero_zeta_is_one():
    table = beb_table(zeta=0.0)
    assert all(p_unstick(table, 2, t) == 1.0 for t in range(1, 60))


def test_p_unstick_monotone_in_range():
    table = beb_table(zeta=0.5)
    q = [p_unstick(table, 3, t) for t in range(4, 60)]
    assert all(0 < x <= 1 for x in q)
    assert all(b <= a for a, b in zip(q, q[1:]))


def test_p_unstick_needs_positive_time():
    with pytest.raises(ValueError):
        p_unstick(beb_table(), 0, 0)


# forward process R


def test_every_stuck_sender_unsticks_before_t0():
    stream = RngStream(0, ("R",))
    state = init_random_unsticking(binary_exponential(), 0.5, 8, 50, stream)
    table = beb_table()
    for _ in range(50):
        step_random_unsticking(state, binary_exponential(), table, 50, stream)
        assert state.stuck.sum() == 0
    assert state.unsticks == state.jammed.births


def test_zero_unstick_probability_keeps_everything_stuck():
    stream = RngStream(1, ("R",))
    state = init_random_unsticking(binary_exponential(), 0.5, 8, 0, stream)
    for _ in range(300):
        step_random_unsticking(state, binary_exponential(), constant_schedule(0.0), 0, stream)
    assert state.unsticks == 0
    assert state.stuck.sum() == state.jammed.births


def test_unstick_counts_must_fit_arrivals():
    state = RandomUnstickingState(JammedState(0.5, 0, stuck=np.array([0, 2, 0], dtype=np.int64)), 0)
    with pytest.raises(ValueError):
        apply_random_unsticking(state, 0, [0, 1, 0], np.zeros(1, dtype=np.int64), [0, 0, 2])


def test_unstick_count_is_binomial():
    # All p_j = 1 and no births: exactly k stuck balls send every step.
    k, q, trials = 5, 0.3, 100_000
    seq = constant(1.0)
    stream = RngStream(2, ("R-binomial",))
    out = np.empty(trials, dtype=np.int64)
    for trial in range(trials):
        state = RandomUnstickingState(JammedState(0.0, 0, t=trial, stuck=np.array([0, k, 0], dtype=np.int64)), 0)
        step_random_unsticking(state, seq, constant_schedule(q), 0, stream)
        out[trial] = state.unsticks
    se = math.sqrt(k * q * (1 - q) / trials)
    assert abs(out.mean() - k * q) <= 3 * se
    assert out.max() <= k


# trajectories


def test_trajectory_validation():
    with pytest.raises(ValueError):
        Trajectory("forward", 2, 3, 2, (3,), (0, 0, 0))  # born at t0
    with pytest.raises(ValueError):
        Trajectory("forward", 2, 3, 3, (2, 2), (0,) * 4)  # sojourns sum to 4, expected 3
    with pytest.raises(ValueError):
        Trajectory("reverse", 2, 3, 4, (4,), (0,) * 4)  # leaves after tau_end
    with pytest.raises(ValueError):
        Trajectory("reverse", 2, 3, 2, (1, 1), (0,))  # one flag short
    with pytest.raises(ValueError):
        Trajectory("sideways", 2, 3, 2, (1, 1), (0, 0))


def test_send_sets_and_bijection_example():
    t0 = 4
    B = Trajectory("forward", t0, 3, t0 + 1, (2, 1), (0, 0, 0))
    assert B.send_times() == {t0 + 1, t0 + 3}
    R = reverse_bijection(B)
    assert R.tau_leave == 3 and R.sojourns == (2, 1)
    assert R.send_times() == {3, 1} == {3 - t + t0 + 1 for t in B.send_times()}
    assert inverse_bijection(R) == B


def test_bijection_rejects_deep_bins():
    B = Trajectory("forward", 0, 3, 1, (1, 1, 1), (0, 0, 0))
    with pytest.raises(ValueError):
        reverse_bijection(B, J_max=2)


@st.composite
def forward_trajectories(draw):
    t0 = draw(st.integers(0, 50))
    tau_end = draw(st.integers(1, 40))
    length = draw(st.integers(1, tau_end))
    J = draw(st.integers(1, length))
    cuts = sorted(draw(st.sets(st.integers(1, length - 1), min_size=J - 1, max_size=J - 1))) if J > 1 else []
    edges = [0] + cuts + [length]
    soj = tuple(b - a for a, b in zip(edges, edges[1:]))
    flags = tuple(draw(st.lists(st.integers(0, 1), min_size=length, max_size=length)))
    return Trajectory("forward", t0, tau_end, t0 + tau_end - length + 1, soj, flags)


@settings(max_examples=500, deadline=None)
@given(B=forward_trajectories())
def test_bijection_round_trip(B):
    R = reverse_bijection(B)
    assert inverse_bijection(R) == B
    assert R.tau_leave == B.tau_end - B.t_birth + B.t0 + 1
    assert R.J == B.J and R.sojourns == B.sojourns
    for t in range(B.t_birth, B.t0 + B.tau_end + 1):
        assert R.flag_at(B.tau_end - t + B.t0 + 1) == B.flag_at(t)
    assert R.send_times() == {B.tau_end - t + B.t0 + 1 for t in B.send_times()}


def test_forward_mean_single_step():
    q = 0.3
    B = Trajectory("forward", 5, 1, 6, (1,), (0,))
    assert trajectory_mean_forward(B, TOY, constant_schedule(q), 0.5) == pytest.approx(0.5 * (1 - q))


def test_forward_mean_two_bins():
    seq = explicit([1.0, 0.5, 0.25])
    table = beb_table(zeta=0.5)
    t0 = 3
    B = Trajectory("forward", t0, 3, t0 + 1, (2, 1), (0, 0, 0))
    q = [p_unstick(table, t0, t) for t in range(t0 + 1, t0 + 4)]
    expected = 0.125 * math.prod(1 - x for x in q)
    assert trajectory_mean_forward(B, seq, table, 0.5) == pytest.approx(expected, rel=1e-14)
    assert trajectory_mean_reverse(reverse_bijection(B), seq, table, 0.5) == pytest.approx(expected, rel=1e-14)


def test_reverse_mean_single_step():
    q = 0.3
    R = Trajectory("reverse", 5, 1, 1, (1,), (0,))
    assert trajectory_mean_reverse(R, TOY, constant_schedule(q), 0.5) == pytest.approx(0.5 * (1 - q))
    assert trajectory_mean(R, TOY, constant_schedule(q), 0.5) == trajectory_mean_reverse(R, TOY, constant_schedule(q), 0.5)


@pytest.mark.parametrize("J", [1, 2, 3, 4])
def test_forward_means_match_ball_following(J):
    # Summed over sojourns (flags marginalise to 1 when q = 0), the forward rates
    # give lambda times the chance that a ball born at t0+1 sits in bin J at t0+tau_end.
    lam, t0, tau_end = 0.5, 2, 5
    seq = TOY
    total = sum(
        trajectory_mean_forward(B, seq, constant_schedule(0.0), lam)
        for B in enumerate_trajectories("forward", t0, tau_end, 4)
        if B.t_birth == t0 + 1 and B.J == J and not any(B.flags)
    )
    p = seq.values(8)
    g = RngStream(9, ("ball-following",)).generator
    n = 200_000
    bins = np.ones(n, dtype=np.int64)  # the newborn sends at birth and lands in bin 1
    for _ in range(tau_end - 1):
        bins += g.random(n) < p[bins]
    hit = bins == J
    est, se = hit.mean(), hit.std(ddof=1) / math.sqrt(n)
    assert abs(total / lam - est) <= 3 * se + 1e-12


# enumeration


def test_enumeration_single_step():
    trajs = enumerate_trajectories("forward", 3, 1, 1)
    assert len(trajs) == 2 and {t.flags for t in trajs} == {(0,), (1,)}
    assert all(t.sojourns == (1,) for t in trajs)


@pytest.mark.parametrize("direction", ["forward", "reverse"])
@pytest.mark.parametrize("tau_end,max_bin", [(1, 1), (2, 1), (3, 2), (4, 3), (5, 4)])
def test_enumeration_counts_closed_form(direction, tau_end, max_bin):
    # Stars and bars for the sojourns times 2^L flag patterns, summed over lengths L.
    expected = sum(comb(L - 1, J - 1) * 2**L for L in range(1, tau_end + 1) for J in range(1, min(max_bin, L) + 1))
    assert len(enumerate_trajectories(direction, 2, tau_end, max_bin)) == expected
    if (tau_end, max_bin) == (2, 1):
        assert expected == 6


def test_enumeration_budget():
    with pytest.raises(BudgetExceeded):
        enumerate_trajectories("forward", 0, 7, 2)
    with pytest.raises(BudgetExceeded):
        enumerate_trajectories("forward", 0, 4, 5)


def test_reverse_means_bounded_by_initial_mass():
    lam, t0, tau_end, J = 0.5, 2, 4, 3
    sched = constant_schedule(0.2)
    total = sum(trajectory_mean_reverse(R, TOY, sched, lam) for R in enumerate_trajectories("reverse", t0, tau_end, J))
    p = TOY.values(J + 1)
    assert total <= sum(lam / p[j] for j in range(1, J + 1))


# reverse process


def test_all_ones_reverse_descends_deterministically():
    seq = constant(1.0)
    state = run_reverse(seq, 3.0 * 0.3, constant_schedule(0.1), 0, 5, RngStream(0, ("rev",)), J_max=4, replicas=20)
    assert state.size > 0
    assert np.array_equal(state.leave, state.start)


def test_forced_sends_from_bin_two():
    s = ReverseState(
        t0=0,
        tau_end=3,
        J_max=3,
        replica=np.array([0]),
        start=np.array([2]),
        bin=np.array([2]),
        sojourns=np.zeros((1, 2), dtype=np.int64),
        leave=np.array([0]),
        blocked=np.array([False]),
        flags=np.zeros((1, 3), dtype=np.int8),
    )
    apply_reverse_step(s, [True], [False])
    apply_reverse_step(s, [True], [False])
    assert s.leave[0] == 2 and s.bin[0] == 0
    (_, traj), = departed_trajectories(s)
    assert traj.tau_leave == 2 and traj.sojourns == (1, 1)
    apply_reverse_step(s, [True], [True])  # a departed ball ignores later draws
    assert s.flags[0].tolist() == [0, 0, 0] and not s.blocked[0]
    with pytest.raises(ValueError):
        apply_reverse_step(s, [True], [False])


def test_departure_time_matches_geometric_sum():
    seq, lam, start, horizon = TOY, 0.5, 3, 16
    p = seq.values(start + 1)
    # DP oracle: law of W_start + ... + W_1 with W_j ~ Geometric(p_j) on {1, 2, ...}.
    law = np.zeros(horizon + 1)
    law[0] = 1.0
    for j in range(1, start + 1):
        geo = np.zeros(horizon + 1)
        k = np.arange(1, horizon + 1)
        geo[1:] = p[j] * (1 - p[j]) ** (k - 1)
        law = np.convolve(law, geo)[: horizon + 1]
    cdf = np.cumsum(law)
    state = run_reverse(seq, lam, constant_schedule(0.0), 0, horizon, RngStream(3, ("departure",)),
                        J_max=start, replicas=60_000, init_bins=[start], keep_flags=False)
    leave = state.leave
    n = leave.size
    for tau in (3, 5, 8, 12, 16):
        emp = np.mean((leave > 0) & (leave <= tau))
        se = math.sqrt(max(cdf[tau] * (1 - cdf[tau]), 1.0 / n) / n)
        assert abs(emp - cdf[tau]) <= 3 * se


def test_trajectory_counts_small_mc():
    # A cheap companion of the acceptance-scale check: per-trajectory means.
    from backofflab.unsticking import trajectory_count_experiment

    out = trajectory_count_experiment(TOY, 0.5, constant_schedule(0.5), 3, 2, 3, 20_000, RngStream(8, ("traj",)))
    counts, means = out["counts"], out["means"]
    z = (counts.mean(axis=0) - means) / np.sqrt(means / counts.shape[0])
    assert np.all(np.abs(z) <= 4)


# Fill sets


def test_fill_membership_rules():
    table = beb_table(zeta=0.5)
    t0, tau_end = 3, 4
    B = Trajectory("forward", t0, tau_end, t0 + tau_end, (1,), (0,))
    assert fill_membership(B, table)
    assert not fill_membership(B, table, j=2)
    flagged = Trajectory("forward", t0, tau_end, t0 + tau_end, (1,), (1,))
    assert not fill_membership(flagged, table)
    # A flag away from every send time does not matter.
    quiet = Trajectory("forward", t0, tau_end, t0 + tau_end - 1, (1, 1), (0, 0))
    off_send = Trajectory("forward", t0, tau_end, t0 + 1, (3, 1), (0, 1, 0, 0))
    assert fill_membership(quiet, table) and fill_membership(off_send, table)


def test_fill_sets_correspond_under_bijection():
    table = beb_table(zeta=0.5)
    for tau_end in range(1, 5):
        for B in enumerate_trajectories("forward", 2, tau_end, 3):
            assert fill_membership(B, table) == fill_membership(reverse_bijection(B), table)


def test_degenerate_fill_equals_initial_mass():
    # p_j = 1 and no unsticking: every ball starting in bin j <= tau_end leaves at tau = j unflagged.
    seq = constant(1.0)
    lam, tau_end, replicas = 0.5, 4, 20_000
    table = build_block_table(seq, lam, 0.9, 0.5, overrides=dict(kappa=3, I0=1, zeta=1e6, tau_init=1, C_init=1), cover_tau=8)
    state = run_reverse(seq, lam, table, 0, tau_end, RngStream(5, ("fill",)), J_max=3, replicas=replicas, keep_flags=False)
    counts = fill_counts(state, table, [1, 2, 3], replicas)
    for col in range(3):
        x = counts[:, col]
        assert abs(x.mean() - lam) <= 4 * math.sqrt(lam / replicas)
        assert x.mean() >= lam / 4


def test_fill_experiment_small():
    seq = binary_exponential()
    table = build_block_table(seq, 0.5, 0.9, 0.5, overrides=dict(kappa=3, I0=1, zeta=20.0, tau_init=1, C_init=1), cover_tau=60)
    report = poisson_domination_experiment(seq, 0.5, table, 5, 40, 2000, RngStream(1, ("fill-test",)))
    assert report.passed
    d = report.to_dict()
    assert d["schema"] == "backofflab.fill-report/1" and len(d["rows"]) == len(report.bins)
    assert j_max(table, 40) >= max(report.bins)
