"""Random unsticking, its time reversal, ball trajectories and Fill sets.

The random-unsticking process R(Y, t0) has the dynamics of Y but a different
stuck/unstuck bookkeeping: every stuck sender flips an independent coin with
success probability ``p_unstick(t)`` and unsticks on success.

The reverse process R~(Y, t0, tau_end) starts with Poisson(lambda/p_j) balls in
bins 1..J_max, has no births, and moves senders one bin *down*; a ball sending
from bin 1 leaves.  At step tau every ball present flips an unstick coin with
probability ``p_unstick(t0 + tau_end - tau + 1)``.

A trajectory records a ball's path: for R, birth time, final bin J and the
sojourn lengths N_1..N_J up to t0 + tau_end; for R~, start bin J, leave time and
sojourns.  Both carry one unstick flag per time step in their range.  The
number of balls following a trajectory is Poisson with the mean given by
``trajectory_mean_forward`` / ``trajectory_mean_reverse``; the time-reversal
bijection maps one family onto the other preserving that mean.

R~ is simulated with per-ball arrays because trajectories are its observable.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Union

import numpy as np

from .blocks import BlockTable, I_of_tau, bins_of_tau, bins_size
from .engine import RngStream
from .jammed import JammedState, _extend, _move, draw_jammed_step, init_jammed
from .sequences import SendSequence

ENUMERATION_LIMITS = {"tau_end": 6, "J": 4}

Schedule = Union[BlockTable, Callable[[int], float]]


class BudgetExceeded(ValueError):
    pass


def p_unstick(table: BlockTable, t0: int, t: int) -> float:
    """1 for t <= t0, else exp(-zeta |bins(t - t0)| / 16)."""
    if t < 1:
        raise ValueError("t must be at least 1")
    if t <= t0:
        return 1.0
    return math.exp(-table.zeta * bins_size(table, t - t0) / 16)


def _unstick_fn(schedule: Schedule, t0: int) -> Callable[[int], float]:
    if isinstance(schedule, BlockTable):
        return lambda t: p_unstick(schedule, t0, t)
    return schedule


def j_max(table: BlockTable, tau_end: int) -> int:
    """u(I(tau_end) - 1) + tau_end."""
    return table.upper(I_of_tau(table, tau_end) - 1) + tau_end


# forward process R -----------------------------------------------------------------


@dataclass
class RandomUnstickingState:
    """Y's dynamics with R's stuck/unstuck counts (index = bin)."""

    jammed: JammedState
    t0: int
    unsticks: int = 0

    @property
    def t(self) -> int:
        return self.jammed.t

    @property
    def stuck(self) -> np.ndarray:
        return self.jammed.stuck


def init_random_unsticking(seq: SendSequence, lam: float, J_obs: int, t0: int, stream: RngStream) -> RandomUnstickingState:
    return RandomUnstickingState(init_jammed(seq, lam, J_obs, stream), t0)


def apply_random_unsticking(
    state: RandomUnstickingState, births: int, stuck_senders, unstuck_senders, unstick_counts
) -> RandomUnstickingState:
    """Move all senders, then unstick ``unstick_counts[j]`` of the stuck senders
    that arrived in bin j (index = destination bin)."""
    ss, _ = _move(state.jammed, births, stuck_senders, unstuck_senders)
    k = np.asarray(unstick_counts, dtype=np.int64)
    n = len(state.jammed.stuck)
    if np.any(k[n:] != 0):
        raise ValueError("cannot unstick more balls than stuck senders arrived")
    k = _extend(k[:n], n)
    arrived = np.zeros(n, dtype=np.int64)
    m = min(len(ss), n - 1)
    arrived[1 : m + 1] = ss[:m]
    if np.any(k > arrived) or np.any(k < 0):
        raise ValueError("cannot unstick more balls than stuck senders arrived")
    y = state.jammed
    y.stuck -= k
    inside = min(len(k), y.J_obs + 1)
    y.unstuck[:inside] += k[:inside]
    y.overflow += int(k[inside:].sum())
    state.unsticks += int(k.sum())
    return state


def step_random_unsticking(
    state: RandomUnstickingState, seq: SendSequence, table: Schedule, t0: int, stream: RngStream
) -> RandomUnstickingState:
    """One step of R.  Unsticking draws come from ``at(t, "unstick")``: one binomial
    per bin over the stuck senders that arrived there."""
    y = state.jammed
    p = seq.values(max(len(y.stuck), y.J_obs + 1) + 2)
    births, ss, us = draw_jammed_step(y, p, stream)
    t = y.t + 1
    q = _unstick_fn(table, t0)(t)
    arrived = np.zeros(len(ss) + 1, dtype=np.int64)
    arrived[1:] = ss
    k = stream.at(t, "unstick").binomial(arrived, q)
    return apply_random_unsticking(state, births, ss, us, k)


# trajectories ------------------------------------------------------------------------


@dataclass(frozen=True)
class Trajectory:
    """A ball trajectory of R (``forward``) or R~ (``reverse``).

    ``time`` is t_birth for a forward trajectory and tau_leave for a reverse one.
    ``flags[k]`` is the unstick flag at the k-th step of the trajectory's range:
    t_birth + k forward, k + 1 reverse.
    """

    direction: str
    t0: int
    tau_end: int
    time: int
    sojourns: tuple
    flags: tuple

    def __post_init__(self) -> None:
        if self.direction not in ("forward", "reverse"):
            raise ValueError("direction must be 'forward' or 'reverse'")
        if not self.sojourns or any(n < 1 for n in self.sojourns):
            raise ValueError("sojourns must be positive and nonempty")
        total = sum(self.sojourns)
        if self.direction == "forward":
            if self.time < self.t0 + 1:
                raise ValueError("a forward trajectory is born after t0")
            expected = self.t0 + self.tau_end - self.time + 1
        else:
            if not 1 <= self.time <= self.tau_end:
                raise ValueError("tau_leave must lie in 1..tau_end")
            expected = self.time
        if total != expected:
            raise ValueError(f"sojourns sum to {total}, expected {expected}")
        if len(self.flags) != total or any(f not in (0, 1) for f in self.flags):
            raise ValueError("one 0/1 flag per step of the trajectory's range")

    @property
    def J(self) -> int:
        return len(self.sojourns)

    @property
    def t_birth(self) -> int:
        if self.direction != "forward":
            raise AttributeError("reverse trajectories have no birth time")
        return self.time

    @property
    def tau_leave(self) -> int:
        if self.direction != "reverse":
            raise AttributeError("forward trajectories have no leave time")
        return self.time

    def flag_at(self, t: int) -> int:
        start = self.time if self.direction == "forward" else 1
        return self.flags[t - start]

    def send_times(self) -> frozenset:
        """S(B) forward (birth plus partial sums), S~(B~) reverse (suffix sums)."""
        if self.direction == "forward":
            return frozenset(self.time + s for s in itertools.accumulate((0,) + self.sojourns[:-1]))
        return frozenset(itertools.accumulate(reversed(self.sojourns)))


def _flag_factor(q: float, flag: int) -> float:
    return q if flag else 1.0 - q


def trajectory_mean_forward(B: Trajectory, seq: SendSequence, table: Schedule, lam: float) -> float:
    """mu^R(B) = F1 F2 F3."""
    if B.direction != "forward":
        raise ValueError("expected a forward trajectory")
    p = seq.values(B.J + 1)
    J = B.J
    f1 = lam * (1 - p[J]) ** (B.sojourns[-1] - 1)
    f2 = math.prod(p[j] * (1 - p[j]) ** (B.sojourns[j - 1] - 1) for j in range(1, J))
    q = _unstick_fn(table, B.t0)
    f3 = math.prod(_flag_factor(q(B.time + k), f) for k, f in enumerate(B.flags))
    return f1 * f2 * f3


def trajectory_mean_reverse(B: Trajectory, seq: SendSequence, table: Schedule, lam: float) -> float:
    """mu^R~(B~) = F~1 F~2 F~3 with F~1 = lambda / p_J."""
    if B.direction != "reverse":
        raise ValueError("expected a reverse trajectory")
    p = seq.values(B.J + 1)
    f1 = lam / p[B.J]
    f2 = math.prod(p[j] * (1 - p[j]) ** (B.sojourns[j - 1] - 1) for j in range(1, B.J + 1))
    q = _unstick_fn(table, B.t0)
    f3 = math.prod(_flag_factor(q(B.tau_end - tau + B.t0 + 1), f) for tau, f in enumerate(B.flags, start=1))
    return f1 * f2 * f3


def trajectory_mean(B: Trajectory, seq: SendSequence, table: Schedule, lam: float) -> float:
    fn = trajectory_mean_forward if B.direction == "forward" else trajectory_mean_reverse
    return fn(B, seq, table, lam)


def reverse_bijection(B: Trajectory, J_max: int | None = None) -> Trajectory:
    """pi: forward trajectory born at t maps to the reverse one leaving at
    tau_end - t + t0 + 1 with the same sojourns and time-reversed flags."""
    if B.direction != "forward":
        raise ValueError("pi is defined on forward trajectories")
    if J_max is not None and B.J > J_max:
        raise ValueError(f"J={B.J} exceeds J_max={J_max}")
    return Trajectory("reverse", B.t0, B.tau_end, B.tau_end - B.time + B.t0 + 1, B.sojourns, B.flags[::-1])


def inverse_bijection(B: Trajectory) -> Trajectory:
    if B.direction != "reverse":
        raise ValueError("pi^-1 is defined on reverse trajectories")
    return Trajectory("forward", B.t0, B.tau_end, B.tau_end - B.time + B.t0 + 1, B.sojourns, B.flags[::-1])


def fill_window(table: BlockTable, j: int) -> int:
    """kappa * sum_{k<=i} ceil(W_k) for the block B_i containing bin j."""
    return table.horizon_sum(table.block_of(j))


def fill_membership(B: Trajectory, table: BlockTable, j: int | None = None) -> bool:
    """Does a ball following B belong to Fill_j at tau_end?  ``j`` defaults to J(B)."""
    j = B.J if j is None else j
    if B.J != j:
        return False
    window = fill_window(table, j)
    if B.direction == "forward":
        if B.time < max(B.t0 + 1, B.t0 + B.tau_end - window):
            return False
    elif B.time > min(B.tau_end, 1 + window):
        return False
    return all(B.flag_at(t) == 0 for t in B.send_times())


def _compositions(total: int, parts: int) -> Iterator[tuple]:
    for cuts in itertools.combinations(range(1, total), parts - 1):
        edges = (0,) + cuts + (total,)
        yield tuple(b - a for a, b in zip(edges, edges[1:]))


def enumerate_trajectories(direction: str, t0: int, tau_end: int, max_bin: int) -> list[Trajectory]:
    """Every valid trajectory with J <= max_bin and every flag pattern."""
    if tau_end > ENUMERATION_LIMITS["tau_end"] or max_bin > ENUMERATION_LIMITS["J"]:
        raise BudgetExceeded(f"enumeration is limited to tau_end <= 6 and J <= 4, got {tau_end}, {max_bin}")
    if tau_end < 1 or max_bin < 1:
        raise ValueError("tau_end and max_bin must be positive")
    out = []
    for length in range(1, tau_end + 1):
        time = t0 + tau_end - length + 1 if direction == "forward" else length
        for J in range(1, min(max_bin, length) + 1):
            for soj in _compositions(length, J):
                for flags in itertools.product((0, 1), repeat=length):
                    out.append(Trajectory(direction, t0, tau_end, time, soj, flags))
    return out


# reverse process R~ ----------------------------------------------------------------------


@dataclass
class ReverseState:
    """Per-ball arrays for R~.  ``bin`` is 0 once a ball has left."""

    t0: int
    tau_end: int
    J_max: int
    tau: int = 0
    replica: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    start: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    bin: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    sojourns: np.ndarray = field(default_factory=lambda: np.zeros((0, 1), dtype=np.int64))
    leave: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    blocked: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    flags: np.ndarray | None = None  # (balls, tau_end), kept when requested

    @property
    def size(self) -> int:
        return len(self.start)

    def bin_counts(self, replica: int = 0) -> np.ndarray:
        sel = (self.replica == replica) & (self.bin > 0)
        return np.bincount(self.bin[sel], minlength=self.J_max + 1)


def init_reverse(
    seq: SendSequence,
    lam: float,
    t0: int,
    tau_end: int,
    J_max: int,
    stream: RngStream,
    replicas: int = 1,
    init_bins=None,
    keep_flags: bool = True,
) -> ReverseState:
    """Poisson(lambda/p_j) balls in each bin j of ``init_bins`` (default 1..J_max).

    Restricting ``init_bins`` simulates exactly the sub-population that starts
    there: balls never interact, so the rest of R~ does not affect them.
    """
    bins = np.arange(1, J_max + 1) if init_bins is None else np.asarray(sorted(set(init_bins)), dtype=np.int64)
    if bins.size and (bins.min() < 1 or bins.max() > J_max):
        raise ValueError("initial bins must lie in 1..J_max")
    p = seq.values(J_max + 1)
    counts = stream.at(0, "reverse-init").poisson(lam / p[bins], size=(replicas, len(bins)))
    flat = counts.ravel()
    start = np.repeat(np.tile(bins, replicas), flat)
    replica = np.repeat(np.repeat(np.arange(replicas), len(bins)), flat)
    n = len(start)
    cap = int(bins.max()) if bins.size else 1
    return ReverseState(
        t0,
        tau_end,
        J_max,
        replica=replica,
        start=start,
        bin=start.copy(),
        sojourns=np.zeros((n, cap), dtype=np.int64),
        leave=np.zeros(n, dtype=np.int64),
        blocked=np.zeros(n, dtype=bool),
        flags=np.zeros((n, tau_end), dtype=np.int8) if keep_flags else None,
    )


def apply_reverse_step(state: ReverseState, sends: np.ndarray, flags: np.ndarray) -> ReverseState:
    """Step tau given per-ball send and unstick indicators (ignored for departed balls)."""
    tau = state.tau + 1
    if tau > state.tau_end:
        raise ValueError("the reverse process runs for tau_end steps only")
    alive = state.bin > 0
    sends = np.asarray(sends, dtype=bool) & alive
    flags = np.asarray(flags, dtype=bool) & alive
    idx = np.flatnonzero(alive)
    state.sojourns[idx, state.bin[idx] - 1] += 1
    state.blocked |= sends & flags
    if state.flags is not None:
        state.flags[:, tau - 1] = flags
    state.bin[sends] -= 1
    state.leave[sends & (state.bin == 0)] = tau
    state.tau = tau
    return state


def step_reverse(state: ReverseState, seq: SendSequence, table: Schedule, stream: RngStream) -> ReverseState:
    """Send with p_j, move senders down one bin, flip unstick coins for every ball."""
    tau = state.tau + 1
    p = seq.values(state.J_max + 1)
    q = _unstick_fn(table, state.t0)(state.t0 + state.tau_end - tau + 1)
    g = stream.at(tau, "reverse")
    u = g.random(state.size)
    v = g.random(state.size)
    return apply_reverse_step(state, u < p[state.bin], v < q)


def run_reverse(
    seq: SendSequence,
    lam: float,
    table: Schedule,
    t0: int,
    tau_end: int,
    stream: RngStream,
    J_max: int | None = None,
    replicas: int = 1,
    init_bins=None,
    keep_flags: bool = True,
) -> ReverseState:
    if J_max is None:
        if not isinstance(table, BlockTable):
            raise ValueError("J_max is required when the schedule is not a block table")
        J_max = j_max(table, tau_end)
    state = init_reverse(seq, lam, t0, tau_end, J_max, stream, replicas, init_bins, keep_flags)
    for _ in range(tau_end):
        step_reverse(state, seq, table, stream)
    return state


def departed_trajectories(state: ReverseState) -> Iterator[tuple[int, Trajectory]]:
    """(replica, trajectory) for every ball that left; needs ``keep_flags``."""
    if state.flags is None:
        raise ValueError("flags were not kept")
    for k in np.flatnonzero(state.leave > 0):
        J, tl = int(state.start[k]), int(state.leave[k])
        yield int(state.replica[k]), Trajectory(
            "reverse",
            state.t0,
            state.tau_end,
            tl,
            tuple(int(x) for x in state.sojourns[k, :J]),
            tuple(int(x) for x in state.flags[k, :tl]),
        )


def fill_counts(state: ReverseState, table: BlockTable, bins, replicas: int) -> np.ndarray:
    """|Fill_j^R~(tau_end)| per replica (rows) and bin of ``bins`` (columns)."""
    out = np.zeros((replicas, len(bins)), dtype=np.int64)
    for col, j in enumerate(bins):
        limit = min(state.tau_end, 1 + fill_window(table, j))
        ok = (state.start == j) & (state.leave > 0) & (state.leave <= limit) & ~state.blocked
        out[:, col] = np.bincount(state.replica[ok], minlength=replicas)
    return out


# Fill domination experiment ----------------------------------------------------------------


@dataclass
class FillReport:
    bins: list
    targets: list  # lambda / (4 p_j)
    means: list
    variances: list
    sigmas: list  # standard error of each mean
    mean_pass: list
    tails: list  # per bin: [(threshold, empirical, poisson_tail, se, pass), ...]
    correlations: dict
    correlation_limit: float
    replicas: int
    config: dict

    @property
    def passed(self) -> bool:
        corr_ok = all(abs(r) <= self.correlation_limit for r in self.correlations.values())
        return all(self.mean_pass) and corr_ok

    def to_dict(self) -> dict:
        rows = [
            {
                "j": j,
                "target": tg,
                "mean": m,
                "variance": v,
                "sigma": s,
                "mean_pass": ok,
                "tails": [dict(zip(("threshold", "empirical", "poisson", "se", "pass"), row)) for row in tl],
            }
            for j, tg, m, v, s, ok, tl in zip(
                self.bins, self.targets, self.means, self.variances, self.sigmas, self.mean_pass, self.tails
            )
        ]
        return {
            "schema": "backofflab.fill-report/1",
            "config": self.config,
            "replicas": self.replicas,
            "rows": rows,
            "correlations": {f"{a},{b}": r for (a, b), r in self.correlations.items()},
            "correlation_limit": self.correlation_limit,
            "passed": self.passed,
        }


def poisson_domination_experiment(
    seq: SendSequence,
    lam: float,
    table: BlockTable,
    t0: int,
    tau_end: int,
    replicas: int,
    stream: RngStream,
    sigmas: float = 3.0,
) -> FillReport:
    """Compare |Fill_j^R~(tau_end)| for j in bins(tau_end) with Poisson(lambda/(4 p_j))."""
    from scipy import stats

    lo, hi = bins_of_tau(table, tau_end)
    bins = list(range(lo, hi + 1))
    state = run_reverse(seq, lam, table, t0, tau_end, stream, replicas=replicas, init_bins=bins, keep_flags=False)
    counts = fill_counts(state, table, bins, replicas)
    p = seq.values(hi + 1)
    rows = dict(targets=[], means=[], variances=[], sigmas=[], mean_pass=[], tails=[])
    for col, j in enumerate(bins):
        x = counts[:, col]
        m = lam / (4 * p[j])
        mean, var = float(x.mean()), float(x.var(ddof=1))
        se = math.sqrt(var / replicas) if replicas > 1 else math.inf
        rows["targets"].append(float(m))
        rows["means"].append(mean)
        rows["variances"].append(var)
        rows["sigmas"].append(se)
        rows["mean_pass"].append(bool(mean >= m - sigmas * se))
        tails = []
        for thr in sorted({math.ceil(m / 2), math.ceil(m)}):
            emp = float(np.mean(x >= thr))
            ref = float(stats.poisson.sf(thr - 1, m))
            tse = math.sqrt(max(emp * (1 - emp), 1.0 / replicas) / replicas)
            tails.append((thr, emp, ref, tse, bool(emp >= ref - sigmas * tse)))
        rows["tails"].append(tails)
    corr = {}
    for a, b in itertools.combinations(range(len(bins)), 2):
        xa, xb = counts[:, a], counts[:, b]
        r = float(np.corrcoef(xa, xb)[0, 1]) if xa.std() > 0 and xb.std() > 0 else 0.0
        corr[(bins[a], bins[b])] = r
    config = {
        "sequence": seq.to_dict(),
        "lambda": lam,
        "t0": t0,
        "tau_end": tau_end,
        "table": table.to_dict(),
        "stream": stream.header(),
    }
    return FillReport(bins, correlations=corr, correlation_limit=4 / math.sqrt(replicas), replicas=replicas, config=config, **rows)


def trajectory_count_experiment(
    seq: SendSequence,
    lam: float,
    schedule: Schedule,
    t0: int,
    tau_end: int,
    J_max: int,
    replicas: int,
    stream: RngStream,
) -> dict:
    """Per-trajectory ball counts of R~ over ``replicas`` runs, next to mu^R~.

    Returns the enumerated trajectories, their means, and the (replicas x
    trajectories) count matrix.
    """
    trajs = enumerate_trajectories("reverse", t0, tau_end, min(J_max, tau_end))
    index = {(b.J, b.time, b.sojourns, b.flags): k for k, b in enumerate(trajs)}
    state = run_reverse(seq, lam, schedule, t0, tau_end, stream, J_max=J_max, replicas=replicas)
    counts = np.zeros((replicas, len(trajs)), dtype=np.int64)
    left = np.flatnonzero(state.leave > 0)
    J = state.start[left]
    tl = state.leave[left]
    soj = state.sojourns[left]
    fl = state.flags[left]
    keys = [
        (int(J[k]), int(tl[k]), tuple(int(x) for x in soj[k, : J[k]]), tuple(int(x) for x in fl[k, : tl[k]]))
        for k in range(len(left))
    ]
    cols = np.fromiter((index[key] for key in keys), dtype=np.int64, count=len(keys))
    np.add.at(counts, (state.replica[left], cols), 1)
    means = np.array([trajectory_mean_reverse(b, seq, schedule, lam) for b in trajs])
    return {"trajectories": trajs, "means": means, "counts": counts}
