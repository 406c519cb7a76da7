"""Externally jammed processes and their couplings.

The externally jammed process Y never lets a ball escape.  It starts with
Poisson(lambda/p_j) unstuck balls in every bin j >= 1.  Newborns are stuck, and a
stuck ball becomes unstuck when it is the only stuck ball sending in its step.
Its stuck balls behave exactly like the balls of the backoff process.

The two-stream process T runs two independent copies A and B of rate lambda/2.
A stuck sender can unstick only when the other stream sent no stuck ball.

Counts, not identities: per bin we keep stuck and unstuck counts.  Stuck counts
are uncapped (they occupy few bins); unstuck counts are kept for bins
1..J_obs only.  Balls move upward only, so bins up to J_obs are exact.

Randomness for step t:
  ``at(t, "main")``          newborns, then stuck senders per bin (as in backoff)
  ``at(t, "unstuck-send")``  unstuck senders per bin
  ``at(t, "choose")``        the uniformly chosen ball of the two-stream rule
The two streams of T use ``stream.split("A")`` and ``stream.split("B")``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .backoff import ObserverConfig, RunLog, noise, run_header
from .blocks import BlockTable, bins_size
from .engine import RngStream
from .sequences import SendSequence, from_dict


class ObservationError(LookupError):
    """An observable asked for a bin beyond the observation cap."""


def _extend(a: np.ndarray, n: int) -> np.ndarray:
    if len(a) >= n:
        return a
    out = np.zeros(n, dtype=a.dtype)
    out[: len(a)] = a
    return out


@dataclass
class JammedState:
    """State of one externally jammed process.  Index = bin; index 0 is unused."""

    lam: float
    J_obs: int
    t: int = 0
    stuck: np.ndarray = field(default_factory=lambda: np.zeros(2, dtype=np.int64))
    unstuck: np.ndarray | None = None
    unsticks: int = 0
    births: int = 0
    overflow: int = 0  # unstuck balls that moved past J_obs

    def __post_init__(self) -> None:
        if self.unstuck is None:
            self.unstuck = np.zeros(self.J_obs + 1, dtype=np.int64)

    def copy(self) -> "JammedState":
        return JammedState(
            self.lam, self.J_obs, self.t, self.stuck.copy(), self.unstuck.copy(), self.unsticks, self.births, self.overflow
        )

    def bin_size(self, j: int) -> int:
        if j < 1 or j > self.J_obs:
            raise ObservationError(f"bin {j} is outside the observed window 1..{self.J_obs}")
        s = int(self.stuck[j]) if j < len(self.stuck) else 0
        return s + int(self.unstuck[j])

    def stuck_vector(self) -> np.ndarray:
        return self.stuck


@dataclass(frozen=True)
class JammedEvents:
    t: int
    births: int
    stuck_senders: np.ndarray  # index 0 holds the newborns, all of which send
    unstuck_senders: np.ndarray
    unstick_bin: int | None  # destination bin of the ball that became unstuck

    @property
    def stucksend(self) -> int:
        return int(self.stuck_senders.sum())


def init_jammed(seq: SendSequence, lam: float, J_obs: int, stream: RngStream) -> JammedState:
    """Bins 1..J_obs get Poisson(lambda/p_j) unstuck balls; nothing is stuck."""
    if seq.log_p(0) != 0.0:
        raise ValueError("p_0 must be 1; apply normalize_p0 first")
    if J_obs < 0:
        raise ValueError("J_obs must be nonnegative")
    state = JammedState(lam, J_obs)
    if J_obs and lam > 0:
        p = seq.values(J_obs + 1)
        state.unstuck[1:] = stream.at(0, "init").poisson(lam / p[1:])
    return state


def draw_jammed_step(state: JammedState, p: np.ndarray, stream: RngStream) -> tuple[int, np.ndarray, np.ndarray]:
    t = state.t + 1
    g = stream.at(t, "main")
    births = int(g.poisson(state.lam)) if state.lam > 0 else 0
    ss = np.empty(len(state.stuck), dtype=np.int64)
    ss[0] = births
    ss[1:] = g.binomial(state.stuck[1:], p[1 : len(state.stuck)])
    us = np.zeros(state.J_obs + 1, dtype=np.int64)
    if state.J_obs:
        us[1:] = stream.at(t, "unstuck-send").binomial(state.unstuck[1:], p[1 : state.J_obs + 1])
    return births, ss, us


def _move(state: JammedState, births: int, ss: np.ndarray, us: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Advance every sender one bin (no escapes).  Returns the padded sender arrays."""
    ss = np.asarray(ss, dtype=np.int64)
    if ss[0] != births:
        raise ValueError("newborns always send: stuck_senders[0] must equal births")
    n = max(len(state.stuck), len(ss)) + (1 if ss[-1] > 0 else 0)
    stuck = _extend(state.stuck, n)
    ss = _extend(ss, n)
    stuck[1:] -= ss[1:]
    stuck[1:] += ss[:-1]
    unstuck = state.unstuck
    if state.J_obs:
        us = np.asarray(us, dtype=np.int64)
        unstuck[1:] -= us[1:]
        unstuck[2:] += us[1:-1]
        state.overflow += int(us[-1])
    if stuck.min() < 0 or unstuck.min() < 0:
        raise ValueError("more senders than balls")
    state.stuck = stuck
    state.t += 1
    state.births += int(births)
    return ss, us


def _unstick_at(state: JammedState, dest: int) -> None:
    state.stuck[dest] -= 1
    if dest <= state.J_obs:
        state.unstuck[dest] += 1
    else:
        state.overflow += 1
    state.unsticks += 1


def _lone_destination(ss: np.ndarray) -> int:
    return int(np.flatnonzero(ss)[0]) + 1


def apply_jammed_step(state: JammedState, births: int, stuck_senders, unstuck_senders) -> tuple[JammedState, JammedEvents]:
    """Apply one step of Y given the draws (mutates ``state``)."""
    ss, us = _move(state, births, stuck_senders, unstuck_senders)
    dest = None
    if int(ss.sum()) == 1:
        dest = _lone_destination(ss)
        _unstick_at(state, dest)
    return state, JammedEvents(state.t, int(births), ss, us, dest)


def step_jammed(
    state: JammedState, seq: SendSequence, stream: RngStream, p: np.ndarray | None = None
) -> tuple[JammedState, JammedEvents]:
    n = max(len(state.stuck), state.J_obs + 1) + 1
    if p is None or len(p) < n:
        p = seq.values(2 * n)
    return apply_jammed_step(state, *draw_jammed_step(state, p, stream))


@dataclass
class JammedRun:
    lam: float
    J_obs: int
    header: dict
    stuck: list[np.ndarray] = field(default_factory=list)  # index t = 0..T
    unstuck: list[np.ndarray] = field(default_factory=list)
    events: list[JammedEvents] = field(default_factory=list)
    final: JammedState | None = None


def run_jammed(
    seq: SendSequence,
    lam: float,
    steps: int,
    stream: RngStream,
    J_obs: int = 32,
    record_unstuck: bool = False,
) -> JammedRun:
    state = init_jammed(seq, lam, J_obs, stream)
    run = JammedRun(lam, J_obs, run_header("jammed", seq, lam, steps, stream, J_obs=J_obs))
    run.stuck.append(state.stuck.copy())
    if record_unstuck:
        run.unstuck.append(state.unstuck.copy())
    p = seq.values(max(64, J_obs + 2))
    for _ in range(steps):
        if len(p) < len(state.stuck) + 2:
            p = seq.values(2 * len(p))
        state, ev = apply_jammed_step(state, *draw_jammed_step(state, p, stream))
        run.stuck.append(state.stuck.copy())
        run.events.append(ev)
        if record_unstuck:
            run.unstuck.append(state.unstuck.copy())
    run.final = state
    return run


def derive_backoff_view(run: JammedRun, seq: SendSequence) -> RunLog:
    """The coupled backoff process read off Y: its bin j holds Y's stuck balls of
    bin j, and its escapes are Y's unstick events."""
    header = dict(run.header, process="backoff-view-of-jammed")
    log = RunLog(header)
    p = seq.values(max(len(s) for s in run.stuck) + 1)
    for ev, stuck in zip(run.events, run.stuck[1:]):
        b = int(stuck.sum())
        log.t.append(ev.t)
        log.backlog.append(b)
        log.noise.append(noise(stuck, p, run.lam))
        log.senders.append(ev.stucksend)
        log.escaped.append(ev.unstick_bin is not None)
        log.empty.append(b == 0)
        log.counts.append(stuck.copy())
    return log


# two-stream process ----------------------------------------------------------------


@dataclass
class TwoStreamState:
    A: JammedState
    B: JammedState
    lam: float  # total rate; each stream runs at lam / 2

    @property
    def t(self) -> int:
        return self.A.t

    def stream(self, name: str) -> JammedState:
        return self.A if name == "A" else self.B

    def copy(self) -> "TwoStreamState":
        return TwoStreamState(self.A.copy(), self.B.copy(), self.lam)


@dataclass(frozen=True)
class TwoStreamEvents:
    t: int
    A: JammedEvents
    B: JammedEvents
    unstuck_stream: str | None
    unstick_bin: int | None


def init_two_stream(seq: SendSequence, lam: float, J_obs: int, stream: RngStream) -> TwoStreamState:
    return TwoStreamState(
        init_jammed(seq, lam / 2, J_obs, stream.split("A")),
        init_jammed(seq, lam / 2, J_obs, stream.split("B")),
        lam,
    )


def choose_lone_stream_ball(ss: np.ndarray, g: np.random.Generator) -> int:
    """Destination bin of a uniformly chosen stuck sender (bin weighted by its count)."""
    total = int(ss.sum())
    k = int(g.integers(total)) if total > 1 else 0
    src = int(np.searchsorted(np.cumsum(ss), k, side="right"))
    return src + 1


def apply_two_stream_step(state: TwoStreamState, draws_a, draws_b, g_choose: np.random.Generator | None):
    """Apply one step of T given each stream's (births, stuck senders, unstuck senders)."""
    ssa, usa = _move(state.A, *draws_a)
    ssb, usb = _move(state.B, *draws_b)
    ta, tb = int(ssa.sum()), int(ssb.sum())
    which, dest = None, None
    if (ta > 0) != (tb > 0):
        which = "A" if ta > 0 else "B"
        ss = ssa if ta > 0 else ssb
        if g_choose is None and int(ss.sum()) > 1:
            raise ValueError("a choice generator is needed when several balls are eligible")
        dest = choose_lone_stream_ball(ss, g_choose)
        _unstick_at(state.stream(which), dest)
    ev_a = JammedEvents(state.t, int(draws_a[0]), ssa, usa, dest if which == "A" else None)
    ev_b = JammedEvents(state.t, int(draws_b[0]), ssb, usb, dest if which == "B" else None)
    return state, TwoStreamEvents(state.t, ev_a, ev_b, which, dest)


class _Streams:
    """Per-run cache of the two child streams."""

    def __init__(self, stream: RngStream) -> None:
        self.root = stream
        self.A = stream.split("A")
        self.B = stream.split("B")


def step_two_stream(
    state: TwoStreamState, seq: SendSequence, stream: RngStream | _Streams, p: np.ndarray | None = None
) -> tuple[TwoStreamState, TwoStreamEvents]:
    streams = stream if isinstance(stream, _Streams) else _Streams(stream)
    n = max(len(state.A.stuck), len(state.B.stuck), state.A.J_obs + 1) + 1
    if p is None or len(p) < n:
        p = seq.values(2 * n)
    da = draw_jammed_step(state.A, p, streams.A)
    db = draw_jammed_step(state.B, p, streams.B)
    return apply_two_stream_step(state, da, db, streams.root.at(state.t + 1, "choose"))


@dataclass
class TwoStreamRun:
    lam: float
    J_obs: int
    header: dict
    stuck_A: list[np.ndarray] = field(default_factory=list)  # index t = 0..T
    stuck_B: list[np.ndarray] = field(default_factory=list)
    bins_A: list[np.ndarray] = field(default_factory=list)  # bin sizes 1..J_obs when recorded
    bins_B: list[np.ndarray] = field(default_factory=list)
    unsticks: list[int] = field(default_factory=list)
    final: TwoStreamState | None = None
    stopped_at: int | None = None

    @property
    def steps(self) -> int:
        return len(self.stuck_A) - 1


def _bin_sizes(s: JammedState) -> np.ndarray:
    out = s.unstuck.copy()
    m = min(len(s.stuck), s.J_obs + 1)
    out[:m] += s.stuck[:m]
    return out


def run_two_stream(
    seq: SendSequence,
    lam: float,
    steps: int,
    stream: RngStream,
    J_obs: int = 0,
    record_bins: bool = False,
    stop=None,
    after_stop: int = 0,
) -> TwoStreamRun:
    """Run T for ``steps`` steps.  Once ``stop(state)`` holds the run continues
    for ``after_stop`` more steps and ends; ``run.stopped_at`` records when."""
    streams = _Streams(stream)
    state = init_two_stream(seq, lam, J_obs, stream)
    run = TwoStreamRun(lam, J_obs, run_header("two-stream", seq, lam, steps, stream, J_obs=J_obs))

    def record() -> None:
        run.stuck_A.append(state.A.stuck.copy())
        run.stuck_B.append(state.B.stuck.copy())
        run.unsticks.append(state.A.unsticks + state.B.unsticks)
        if record_bins:
            run.bins_A.append(_bin_sizes(state.A))
            run.bins_B.append(_bin_sizes(state.B))

    record()
    p = seq.values(max(64, J_obs + 2))
    remaining = steps
    while remaining > 0:
        n = max(len(state.A.stuck), len(state.B.stuck)) + 2
        if len(p) < n:
            p = seq.values(2 * n)
        state, _ = step_two_stream(state, seq, streams, p)
        record()
        remaining -= 1
        if run.stopped_at is None and stop is not None and stop(state):
            run.stopped_at = state.t
            remaining = after_stop
    run.final = state
    return run


# Y <-> T coupling -------------------------------------------------------------------


@dataclass
class CoupledYT:
    """Joint per-stream counts of balls by (status in Y, status in T).

    ``ss``: stuck in both; ``su``: stuck in Y, unstuck in T; ``uu``: unstuck in
    both (window 1..J_obs).  Unstuck in Y but stuck in T never happens.
    """

    lam: float
    J_obs: int
    ss: dict
    su: dict
    uu: dict
    t: int = 0
    unsticks_Y: int = 0
    unsticks_T: int = 0

    def y_stuck(self) -> np.ndarray:
        n = max(len(self.ss["A"]), len(self.ss["B"]), len(self.su["A"]), len(self.su["B"]))
        return sum(_extend(d[c], n) for d in (self.ss, self.su) for c in "AB")

    def t_stuck(self, c: str) -> np.ndarray:
        return self.ss[c]

    def bins(self, c: str) -> np.ndarray:
        """Bin sizes 1..J_obs of stream c (shared by both views)."""
        out = self.uu[c].copy()
        for d in (self.ss, self.su):
            m = min(len(d[c]), self.J_obs + 1)
            out[:m] += d[c][:m]
        return out

    def y_unstuck_window(self) -> np.ndarray:
        return self.uu["A"] + self.uu["B"]

    def t_unstuck_window(self, c: str) -> np.ndarray:
        m = min(len(self.su[c]), self.J_obs + 1)
        out = self.uu[c].copy()
        out[:m] += self.su[c][:m]
        return out


@dataclass(frozen=True)
class CoupledEvents:
    t: int
    y_stucksend: int
    t_stucksend: dict
    y_unstick: tuple | None  # (stream, destination bin, category)
    t_unstick: tuple | None  # (stream, destination bin)


def init_coupled_yt(seq: SendSequence, lam: float, J_obs: int, stream: RngStream) -> CoupledYT:
    t_state = init_two_stream(seq, lam, J_obs, stream)
    zero = lambda: np.zeros(2, dtype=np.int64)  # noqa: E731
    return CoupledYT(
        lam,
        J_obs,
        ss={"A": zero(), "B": zero()},
        su={"A": zero(), "B": zero()},
        uu={"A": t_state.A.unstuck.copy(), "B": t_state.B.unstuck.copy()},
    )


def _advance(a: np.ndarray, send: np.ndarray) -> np.ndarray:
    n = max(len(a), len(send)) + (1 if send[-1] > 0 else 0)
    a = _extend(a, n)
    send = _extend(send, n)
    a[1:] -= send[1:]
    a[1:] += send[:-1]
    return a


def step_coupled_yt(state: CoupledYT, p: np.ndarray, streams: _Streams) -> CoupledEvents:
    """One step of the joint process.

    The T view consumes exactly the draws ``step_two_stream`` would make on the
    same stream: unstuck-in-T senders are drawn as one binomial over su+uu and
    split between the two categories by a hypergeometric draw.
    """
    t = state.t + 1
    send_ss, send_su, send_uu = {}, {}, {}
    for c, s in (("A", streams.A), ("B", streams.B)):
        g = s.at(t, "main")
        births = int(g.poisson(state.lam / 2)) if state.lam > 0 else 0
        ss_send = np.empty(len(state.ss[c]), dtype=np.int64)
        ss_send[0] = births
        ss_send[1:] = g.binomial(state.ss[c][1:], p[1 : len(state.ss[c])])
        n = max(len(state.su[c]), state.J_obs + 1)
        su = _extend(state.su[c], n)
        uu = _extend(state.uu[c], n)
        both = np.zeros(n, dtype=np.int64)
        if state.J_obs:
            # T's unstuck window draw, exactly as the standalone process makes it.
            both[1 : state.J_obs + 1] = s.at(t, "unstuck-send").binomial(
                su[1 : state.J_obs + 1] + uu[1 : state.J_obs + 1], p[1 : state.J_obs + 1]
            )
        split = s.at(t, "coupling-split")
        su_send = np.zeros(n, dtype=np.int64)
        win = slice(1, state.J_obs + 1)
        su_send[win] = split.hypergeometric(su[win], uu[win], both[win]) if state.J_obs else 0
        if n > state.J_obs + 1:
            su_send[state.J_obs + 1 :] = split.binomial(su[state.J_obs + 1 :], p[state.J_obs + 1 : n])
        uu_send = both - su_send
        send_ss[c], send_su[c], send_uu[c] = ss_send, su_send, uu_send[: state.J_obs + 1]
        state.su[c] = su

    t_total = {c: int(send_ss[c].sum()) for c in "AB"}
    y_total = sum(t_total.values()) + sum(int(send_su[c].sum()) for c in "AB")
    for c in "AB":
        state.ss[c] = _advance(state.ss[c], send_ss[c])
        state.su[c] = _advance(state.su[c], send_su[c])
        if state.J_obs:
            uu = state.uu[c]
            us = send_uu[c]
            uu[1:] -= us[1:]
            uu[2:] += us[1:-1]
    state.t = t

    t_event = None
    if (t_total["A"] > 0) != (t_total["B"] > 0):
        c = "A" if t_total["A"] > 0 else "B"
        dest = choose_lone_stream_ball(send_ss[c], streams.root.at(t, "choose"))
        state.ss[c][dest] -= 1
        state.su[c] = _extend(state.su[c], dest + 1)
        state.su[c][dest] += 1
        state.unsticks_T += 1
        t_event = (c, dest)

    y_event = None
    if y_total == 1:
        for c in "AB":
            for cat, arr in (("ss", send_ss[c]), ("su", send_su[c])):
                if arr.sum() == 1:
                    dest = _lone_destination(arr)
                    y_event = (c, dest, cat)
        c, dest, cat = y_event
        if cat == "ss" and t_event != (c, dest):
            raise AssertionError("a lone stuck sender must also be T's chosen ball")
        state.su[c][dest] -= 1
        if dest <= state.J_obs:
            state.uu[c][dest] += 1
        state.unsticks_Y += 1
    return CoupledEvents(t, y_total, t_total, y_event, t_event)


@dataclass
class CoupledRun:
    y_stuck: list[np.ndarray] = field(default_factory=list)
    t_stuck_A: list[np.ndarray] = field(default_factory=list)
    t_stuck_B: list[np.ndarray] = field(default_factory=list)
    bins_A: list[np.ndarray] = field(default_factory=list)
    bins_B: list[np.ndarray] = field(default_factory=list)
    y_unstuck: list[np.ndarray] = field(default_factory=list)
    t_unstuck: list[np.ndarray] = field(default_factory=list)
    unsticks_Y: list[int] = field(default_factory=list)
    unsticks_T: list[int] = field(default_factory=list)
    events: list[CoupledEvents] = field(default_factory=list)


def run_coupled_yt(seq: SendSequence, lam: float, steps: int, stream: RngStream, J_obs: int = 16) -> CoupledRun:
    streams = _Streams(stream)
    state = init_coupled_yt(seq, lam, J_obs, stream)
    run = CoupledRun()

    def record() -> None:
        run.y_stuck.append(state.y_stuck())
        run.t_stuck_A.append(state.ss["A"].copy())
        run.t_stuck_B.append(state.ss["B"].copy())
        run.bins_A.append(state.bins("A"))
        run.bins_B.append(state.bins("B"))
        run.y_unstuck.append(state.y_unstuck_window())
        run.t_unstuck.append(state.t_unstuck_window("A") + state.t_unstuck_window("B"))
        run.unsticks_Y.append(state.unsticks_Y)
        run.unsticks_T.append(state.unsticks_T)

    record()
    p = seq.values(max(64, J_obs + 2))
    for _ in range(steps):
        n = max(len(a) for d in (state.ss, state.su) for a in d.values()) + 2
        if len(p) < n:
            p = seq.values(2 * n)
        run.events.append(step_coupled_yt(state, p, streams))
        record()
    return run


# events over two-stream runs ----------------------------------------------------------


def detect_e_init(run: TwoStreamRun, table: BlockTable) -> int | None:
    """Least t >= 1 at which both streams hold at least C_init stuck balls in bin j_min."""
    if table.C_init is None or table.j_min is None:
        raise ValueError("table has no finite C_init or j_min")
    j = table.j_min
    for t in range(1, run.steps + 1):
        a, b = run.stuck_A[t], run.stuck_B[t]
        if _at(a, j) >= table.C_init and _at(b, j) >= table.C_init:
            return t
    return None


def e_init_stop(table: BlockTable):
    """Stop condition for ``run_two_stream`` that ends the run at E_init."""
    j, c = table.j_min, table.C_init

    def stop(state: TwoStreamState) -> bool:
        return _at(state.A.stuck, j) >= c and _at(state.B.stuck, j) >= c

    return stop


def run_until_e_init(
    seq: SendSequence, lam: float, table: BlockTable, horizon: int, stream: RngStream, after: int = 0, J_obs: int = 0
) -> TwoStreamRun:
    """Run T until E_init (at most ``horizon`` steps), then ``after`` more steps."""
    return run_two_stream(seq, lam, horizon, stream, J_obs=J_obs, stop=e_init_stop(table), after_stop=after)


def _at(a: np.ndarray, j: int) -> int:
    return int(a[j]) if j < len(a) else 0


def jammed_for(run: TwoStreamRun, table: BlockTable, c: str, t: int, tau: int, p: np.ndarray | None = None) -> bool:
    """Stream c is (c, t)-jammed for tau: f(stuck(c, t+tau-1)) >= zeta |bins(tau-1)|.

    f uses T's full rate lambda, not the stream's lambda/2.
    """
    stuck = (run.stuck_A if c == "A" else run.stuck_B)[t + tau - 1]
    if p is None or len(p) < len(stuck):
        p = from_dict(run.header["sequence"]).values(len(stuck) + 1)
    return noise(stuck, p, run.lam) >= table.zeta * bins_size(table, tau - 1)


def jam_predicate(run: TwoStreamRun, table: BlockTable, t0: int, tau: int) -> dict:
    """E_jam(t0, tau) per stream: jammed for every tau' in 1..tau."""
    if t0 + tau - 1 > run.steps:
        raise ValueError("run does not cover t0 + tau - 1")
    seq = from_dict(run.header["sequence"])
    longest = max(len(s) for s in run.stuck_A[t0 : t0 + tau] + run.stuck_B[t0 : t0 + tau])
    p = seq.values(longest + 1)
    out: dict = {}
    for c in "AB":
        ok, first_fail = True, None
        for tp in range(1, tau + 1):
            if not jammed_for(run, table, c, t0, tp, p):
                ok, first_fail = False, tp
                break
        out[c] = ok
        out[f"{c}_first_failure"] = first_fail
    out["both"] = out["A"] and out["B"]
    return out


def backoff_log_from_two_stream(run: TwoStreamRun, observer: ObserverConfig | None = None) -> RunLog:
    """Not a coupling: a convenience view of T's merged stuck balls as a RunLog."""
    seq = from_dict(run.header["sequence"])
    log = RunLog(dict(run.header, process="two-stream-stuck"))
    stride = (observer or ObserverConfig()).stride
    for t in range(1, run.steps + 1):
        if t % stride:
            continue
        s = _extend(run.stuck_A[t], len(run.stuck_B[t])) + _extend(run.stuck_B[t], len(run.stuck_A[t]))
        log.t.append(t)
        log.backlog.append(int(s.sum()))
        log.noise.append(noise(s, seq.values(len(s) + 1), run.lam))
        log.senders.append(0)
        log.escaped.append(run.unsticks[t] > run.unsticks[t - 1])
        log.empty.append(int(s.sum()) == 0)
    return log
