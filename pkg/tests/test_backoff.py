import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from backofflab.backoff import (
    BackoffState,
    ObserverConfig,
    RunLog,
    apply_backoff_step,
    draw_backoff_step,
    noise,
    run_backoff,
    run_p0_coupling,
    step_backoff,
)
from backofflab.engine import RngStream
from backofflab.sequences import binary_exponential, constant, explicit, normalize_p0


def state_with(counts, t=0):
    return BackoffState(t=t, counts=np.asarray(counts, dtype=np.int64))


def test_empty_state_no_births_is_unchanged():
    s, ev = apply_backoff_step(state_with([0, 0]), 0, [0, 0])
    assert s.backlog == 0 and not ev.escaped and s.t == 1


def test_single_sender_escapes():
    s, ev = apply_backoff_step(state_with([0, 0, 0, 1]), 0, [0, 0, 0, 1])
    assert ev.escaped and ev.escape_bin == 3
    assert s.backlog == 0 and s.escapes == 1


def test_two_senders_move_up():
    s, ev = apply_backoff_step(state_with([0, 2, 0]), 0, [0, 2, 0])
    assert not ev.escaped
    assert s.counts.tolist()[:3] == [0, 0, 2]


def test_all_ones_forced_steps():
    # p = 1: every ball sends, so the system only delivers when exactly one ball is present.
    s = state_with([0, 0])
    s, ev = apply_backoff_step(s, 2, [2, 0])  # two newborns collide
    assert s.counts.tolist()[:2] == [0, 2] and not ev.escaped
    s, ev = apply_backoff_step(s, 1, [1, 2, 0])  # three senders collide
    assert s.counts.tolist()[:3] == [0, 1, 2] and not ev.escaped
    s, ev = apply_backoff_step(s, 0, [0, 1, 2, 0])
    assert s.counts.tolist()[:4] == [0, 0, 1, 2] and s.escapes == 0


def test_too_many_senders_rejected():
    with pytest.raises(ValueError):
        apply_backoff_step(state_with([0, 1]), 0, [0, 2])


def test_noise_examples():
    seq = binary_exponential()
    assert noise(np.zeros(5), seq, 0.3) == pytest.approx(0.3)
    assert noise(np.array([0, 2, 0, 1]), seq, 0.3) == pytest.approx(1.425)


def test_noise_is_expected_sender_count():
    seq = binary_exponential()
    lam = 0.3
    counts = np.array([0, 2, 3, 1, 4], dtype=np.int64)
    p = seq.values(16)
    stream = RngStream(8, ("noise-mc",))
    trials = 100_000
    totals = np.empty(trials)
    state = state_with(counts)
    for k in range(trials):
        state.t = k
        births, senders = draw_backoff_step(state, lam, p, stream)
        totals[k] = senders.sum()
    f = noise(counts, p, lam)
    assert abs(totals.mean() - f) <= 3 * totals.std(ddof=1) / np.sqrt(trials)


def test_zero_rate_never_fills():
    log = run_backoff(binary_exponential(), 0.0, 500, seed=1)
    assert max(log.backlog) == 0


def test_run_is_deterministic():
    a = run_backoff(binary_exponential(), 0.6, 2000, seed=3, observer=ObserverConfig(keep_counts=True))
    b = run_backoff(binary_exponential(), 0.6, 2000, seed=3, observer=ObserverConfig(keep_counts=True))
    assert a.backlog == b.backlog and a.noise == b.noise
    assert all(np.array_equal(x, y) for x, y in zip(a.counts, b.counts))


def test_step_backoff_matches_run():
    seq = binary_exponential()
    stream = RngStream(5, ("backoff",))
    s = BackoffState()
    for _ in range(300):
        s, _ = step_backoff(s, seq, 0.6, stream)
    log = run_backoff(seq, 0.6, 300, stream=RngStream(5, ("backoff",)))
    assert s.backlog == log.backlog[-1] and s.escapes == log.final.escapes


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6), lam=st.floats(0.05, 0.95), steps=st.integers(1, 400))
def test_ball_conservation(seed, lam, steps):
    seq = binary_exponential()
    stream = RngStream(seed, ("conservation",))
    s = BackoffState()
    p = seq.values(64)
    for _ in range(steps):
        before = s.backlog
        births, senders = draw_backoff_step(s, lam, p, stream)
        s, ev = apply_backoff_step(s, births, senders)
        assert s.backlog == before + births - int(ev.escaped)
        assert ev.escaped == (ev.total_senders == 1)
        assert s.counts.min() >= 0
    assert s.backlog == s.births - s.escapes


def test_strided_log_and_jsonl_round_trip(tmp_path):
    log = run_backoff(binary_exponential(), 0.5, 1000, seed=2, observer=ObserverConfig(stride=10, keep_counts=True))
    assert log.t[:3] == [10, 20, 30] and len(log) == 100
    path = tmp_path / "run.jsonl"
    log.write_jsonl(path)
    back = RunLog.read_jsonl(path)
    assert back.header == log.header
    assert back.backlog == log.backlog and back.noise == log.noise
    assert all(np.array_equal(a, b) for a, b in zip(back.counts, log.counts))
    log.write_summary_csv(tmp_path / "run.csv")
    assert (tmp_path / "run.csv").read_text().startswith("schema,seed,steps")


def test_stride_must_be_positive():
    with pytest.raises(ValueError):
        ObserverConfig(stride=0)


@pytest.mark.parametrize("seq", [constant(0.5), explicit([0.3, 0.5, 0.25])], ids=["const-half", "explicit"])
def test_p0_coupling_dominates_and_matches_standalone(seq):
    lam = 0.6
    stream = RngStream(12, ("p0",))
    res = run_p0_coupling(seq, lam, 3000, stream)
    for orig, norm in zip(res.original, res.normalized):
        assert np.all(orig[1:] >= norm[1:])
    seq1, lam1 = normalize_p0(seq, lam)
    alone = run_backoff(seq1, lam1, 3000, stream=RngStream(12, ("p0",)), observer=ObserverConfig(keep_counts=True))
    for a, b in zip(alone.counts, res.normalized):
        n = max(len(a), len(b))
        assert np.array_equal(np.pad(a, (0, n - len(a))), np.pad(b, (0, n - len(b))))
