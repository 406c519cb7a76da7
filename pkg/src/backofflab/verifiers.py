"""Named end-to-end checks.  Each returns a ``TestReport``; the CLI ``verify``
command and the acceptance suite both run them from ``VERIFIERS``."""

from __future__ import annotations

import math
import time
from typing import Callable

import numpy as np

from . import analysis
from .analysis import TestReport, combine
from .backoff import ObserverConfig, run_backoff
from .blocks import (
    I_of_tau,
    bins_lower_bound,
    bins_size,
    block_lower,
    block_size,
    block_upper,
    build_block_table,
)
from .engine import RngStream
from .jammed import derive_backoff_view, jam_predicate, run_coupled_yt, run_jammed, run_two_stream, run_until_e_init
from .sequences import (
    binary_exponential,
    classify,
    constant,
    doubly_exponential,
    explicit,
    interleaved,
    mu_tau,
    polynomial,
)
from .unsticking import (
    enumerate_trajectories,
    fill_membership,
    inverse_bijection,
    j_max,
    poisson_domination_experiment,
    reverse_bijection,
    trajectory_count_experiment,
    trajectory_mean_forward,
    trajectory_mean_reverse,
)


def _trim(a: np.ndarray) -> list:
    return np.trim_zeros(np.asarray(a), "b").tolist()


def coupling_xy(seeds=range(10), steps: int = 10_000, lam: float = 0.5, J_obs: int = 32) -> TestReport:
    """Backoff bins equal the jammed process's stuck bins at every step."""
    seq = binary_exponential()
    start = time.perf_counter()
    mismatches = 0
    escape_gaps = 0
    for seed in seeds:
        x = run_backoff(seq, lam, steps, observer=ObserverConfig(keep_counts=True), stream=RngStream(seed, ("coupling-xy",)))
        y = derive_backoff_view(run_jammed(seq, lam, steps, RngStream(seed, ("coupling-xy",)), J_obs=J_obs), seq)
        mismatches += sum(_trim(a) != _trim(b) for a, b in zip(x.counts, y.counts))
        escape_gaps += int(np.any(np.cumsum(x.escaped) != np.cumsum(y.escaped)))
    elapsed = time.perf_counter() - start
    return TestReport(
        "coupling-xy",
        len(list(seeds)) * steps,
        float(mismatches + escape_gaps),
        0.0,
        "<=",
        list(seeds),
        {"step_mismatches": mismatches, "escape_mismatches": escape_gaps, "seconds": elapsed},
    )


def coupling_yt(seeds=range(10), steps: int = 1000, lam: float = 0.5, J_obs: int = 16) -> TestReport:
    """T's bin sizes equal the coupled rate-lambda Y's; Y never has more unstuck balls."""
    seq = binary_exponential()
    size_mismatch = unstick_order = unstuck_order = rule = 0
    for seed in seeds:
        c = run_coupled_yt(seq, lam, steps, RngStream(seed, ("coupling-yt",)), J_obs=J_obs)
        t = run_two_stream(seq, lam, steps, RngStream(seed, ("coupling-yt",)), J_obs=J_obs, record_bins=True)
        for k in range(steps + 1):
            y_bins = c.y_unstuck[k].copy()
            m = min(len(c.y_stuck[k]), J_obs + 1)
            y_bins[:m] += c.y_stuck[k][:m]
            size_mismatch += int(np.any(t.bins_A[k] + t.bins_B[k] != y_bins))
            size_mismatch += int(np.any(t.bins_A[k] != c.bins_A[k]) or np.any(t.bins_B[k] != c.bins_B[k]))
            unstick_order += int(c.unsticks_Y[k] > c.unsticks_T[k])
            unstuck_order += int(np.any(c.y_unstuck[k] > c.t_unstuck[k]))
        for ev in c.events:
            rule += int((ev.y_unstick is not None) != (ev.y_stucksend == 1))
    total = size_mismatch + unstick_order + unstuck_order + rule
    return TestReport(
        "coupling-yt",
        len(list(seeds)) * steps,
        float(total),
        0.0,
        "<=",
        list(seeds),
        {
            "bin_size_mismatches": size_mismatch,
            "unstick_count_violations": unstick_order,
            "unstuck_subset_violations": unstuck_order,
            "y_rule_violations": rule,
        },
    )


def _wavy_schedule(t: int) -> float:
    # Distinct value at every step so any time-index slip changes the product.
    return 0.05 + 0.9 * ((t * 0.6180339887498949) % 1.0)


def time_reversal(tau_end_max: int = 4, max_bin: int = 3, t0: int = 2) -> TestReport:
    """pi preserves means and reverses send sets, exhaustively for small bounds."""
    start = time.perf_counter()
    seqs = [binary_exponential(), polynomial(2), explicit([1.0, 0.3, 0.7, 0.2])]
    table = build_block_table(
        binary_exponential(), 0.5, 0.9, 0.5, overrides=dict(kappa=3, I0=1, zeta=20.0, tau_init=1, C_init=1), cover_tau=64
    )
    schedules = [table, _wavy_schedule]
    worst = 0.0
    count = 0
    bad_sets = bad_roundtrip = bad_fill = 0
    for tau_end in range(1, tau_end_max + 1):
        for B in enumerate_trajectories("forward", t0, tau_end, max_bin):
            R = reverse_bijection(B)
            bad_roundtrip += inverse_bijection(R) != B
            bad_sets += R.send_times() != frozenset(tau_end - t + t0 + 1 for t in B.send_times())
            bad_fill += fill_membership(B, table) != fill_membership(R, table)
            for seq in seqs:
                for sched in schedules:
                    a = trajectory_mean_forward(B, seq, sched, 0.5)
                    b = trajectory_mean_reverse(R, seq, sched, 0.5)
                    scale = max(abs(a), abs(b))
                    if scale > 0:
                        worst = max(worst, abs(a - b) / scale)
                    count += 1
    elapsed = time.perf_counter() - start
    parts = [
        TestReport("time-reversal rate equality", count, worst, 1e-12, "<="),
        TestReport("time-reversal send sets", count, float(bad_sets), 0.0, "<="),
        TestReport("time-reversal round trip", count, float(bad_roundtrip), 0.0, "<="),
        TestReport("time-reversal fill correspondence", count, float(bad_fill), 0.0, "<="),
    ]
    report = combine("time-reversal", parts)
    report.details.update(seconds=elapsed, max_relative_error=worst)
    return report


def toy_reverse_config() -> dict:
    """Three bins (J_max = 3 at tau_end = 2) and unstick probability 1/2."""
    seq = explicit([1.0, 0.5, 0.5, 0.5])
    table = build_block_table(seq, 0.5, 0.9, 0.5, overrides=dict(kappa=3, I0=1, zeta=16 * math.log(2), tau_init=1, C_init=1))
    return {"seq": seq, "lam": 0.5, "table": table, "t0": 3, "tau_end": 2, "J_max": j_max(table, 2)}


def trajectory_poisson(replicas: int = 100_000, seed: int = 4, sigmas: float = 3.0) -> TestReport:
    """Per-trajectory counts of the reverse process are independent Poisson(mu~)."""
    cfg = toy_reverse_config()
    out = trajectory_count_experiment(
        cfg["seq"], cfg["lam"], cfg["table"], cfg["t0"], cfg["tau_end"], cfg["J_max"], replicas, RngStream(seed, ("trajectory-poisson",))
    )
    c, mu = out["counts"].astype(float), out["means"]
    n = c.shape[0]
    mean = c.mean(axis=0)
    var = c.var(axis=0, ddof=1)
    z_mean = (mean - mu) / np.sqrt(var / n)
    m4 = ((c - mean) ** 4).mean(axis=0)
    z_var = (var - mu) / np.sqrt((m4 - var**2) / n)
    r = np.corrcoef(c.T)
    iu = np.triu_indices(len(mu), 1)
    parts = [
        TestReport("trajectory mean", n, float(np.abs(z_mean).max()), sigmas, "<=", [seed]),
        TestReport("trajectory variance", n, float(np.abs(z_var).max()), sigmas, "<=", [seed]),
        TestReport("trajectory correlation", n, float(np.abs(r[iu]).max()), 4 / math.sqrt(n), "<="),
    ]
    report = combine("trajectory-poisson", parts)
    report.details.update(
        J_max=cfg["J_max"],
        trajectories=len(mu),
        rows=[
            {"J": b.J, "tau_leave": b.time, "sojourns": list(b.sojourns), "flags": list(b.flags), "mu": float(m), "mean": float(e)}
            for b, m, e in zip(out["trajectories"], mu, mean)
        ],
    )
    return report


def fill_config() -> dict:
    seq = binary_exponential()
    table = build_block_table(
        seq, 0.5, 0.9, 0.5, overrides=dict(kappa=3, I0=1, zeta=20.0, tau_init=1, C_init=1), cover_tau=200
    )
    return {"seq": seq, "lam": 0.5, "table": table, "t0": 5, "tau_end": 100}


def fill_domination(replicas: int = 10_000, seed: int = 1, config: dict | None = None) -> TestReport:
    """Mean |Fill_j| of the reverse process is at least lambda/(4 p_j) - 3 sigma."""
    cfg = config or fill_config()
    start = time.perf_counter()
    rep = poisson_domination_experiment(
        cfg["seq"], cfg["lam"], cfg["table"], cfg["t0"], cfg["tau_end"], replicas, RngStream(seed, ("fill-domination",))
    )
    parts = [
        TestReport(f"fill j={j}", replicas, mean, target - 3 * se, ">=", [seed])
        for j, mean, target, se in zip(rep.bins, rep.means, rep.targets, rep.sigmas)
    ]
    report = combine("fill-domination", parts)
    report.details.update(report=rep.to_dict(), seconds=time.perf_counter() - start)
    return report


def empty_stucksend(trials: int = 100_000, seed: int = 11) -> TestReport:
    """Prepared single-stream states with f = 1, 2, 4 (BEB, lambda = 0.5)."""
    preps = [np.array([0, x1]) for x1 in (1, 3, 7)]
    return analysis.empty_stucksend_bound_test(binary_exponential(), 0.5, preps, trials, seed)


def chernoff() -> TestReport:
    return analysis.chernoff_grid_check()


def mu_tau_check(samples: int = 100_000, seed: int = 3) -> TestReport:
    parts = []
    for name, seq in (("beb", binary_exponential()), ("poly2", polynomial(2))):
        for tau in (16, 64, 256):
            mc, se = analysis.mu_tau_monte_carlo(seq, tau, samples, RngStream(seed, ("mu-tau", name, str(tau))))
            parts.append(TestReport(f"mu_tau {name} tau={tau}", samples, abs(mu_tau(seq, tau) - mc) / se, 3.0, "<=", [seed]))
    ones = constant(1.0)
    exact = sum(mu_tau(ones, tau) != tau for tau in (1, 2, 16, 64, 256))
    parts.append(TestReport("mu_tau all-ones", 5, float(exact), 0.0, "<="))
    return combine("mu-tau", parts)


def stationarity(seeds=range(500), t: int = 1000, J: int = 12, lam: float = 0.5) -> TestReport:
    seq = binary_exponential()
    x = analysis.jammed_bin_snapshot(seq, lam, t, list(seeds), J)
    return analysis.stationarity_test(x, seq, lam, seeds=list(seeds))


CLASSIFIER_GOLDENS = (
    ("doubly-exponential", doubly_exponential, "killer"),
    ("polynomial-2", lambda: polynomial(2), "kelly-macphee"),
    ("binary-exponential", binary_exponential, "suitable"),
    ("interleaved", lambda: interleaved(0.3, "doubly-exponential", 0.5), "lced-undecided"),
)


def classifier(lam: float = 0.5) -> TestReport:
    parts = []
    for name, make, expected in CLASSIFIER_GOLDENS:
        v = classify(make(), lam)
        ok = v.case == expected
        if expected == "suitable":
            ok = ok and v.witness.get("eta") == 0.5 and v.witness.get("nu") == 0.4
        parts.append(TestReport(f"classify {name}", 1, float(not ok), 0.0, "<=", details={"case": v.case, "witness": v.witness}))
    return combine("classifier", parts)


def instability(seeds=range(20), steps: int = 100_000, lam: float = 0.6) -> TestReport:
    seq = binary_exponential()
    logs = [run_backoff(seq, lam, steps, observer=ObserverConfig(stride=100), stream=RngStream(s, ("instability",))) for s in seeds]
    return analysis.instability_evidence(logs, lam, growth=5.0, quorum=18)


def _tau_direct(kappa: int, I0: int, ceilw: list[int], i: int) -> int:
    m = I0 + i
    return kappa * sum((m - k + 1) * ceilw[k - 1] for k in range(1, m + 1))


def block_identities(kappas=range(3, 13), blocks: int = 8) -> TestReport:
    bad = 0
    checks = 0
    for kappa in kappas:
        for i in range(1, blocks + 1):
            checks += 3
            bad += block_upper(kappa, i) != kappa ** (i - 1)
            bad += block_size(kappa, i) != (1 if i == 1 else kappa ** (i - 2) * (kappa - 1))
            bad += i > 1 and block_lower(kappa, i) != block_upper(kappa, i - 1) + 1
        ones = build_block_table(constant(1.0), 0.5, 0.9, 0.5, overrides=dict(kappa=kappa, I0=1, tau_init=1, C_init=1), max_block=6)
        ceilw = [block_size(kappa, k) for k in range(1, ones.max_block + 1)]
        for i in range(1, len(ones.tau)):
            checks += 2
            bad += ones.tau[i] != _tau_direct(kappa, 1, ceilw, i)
            if i >= 2:
                bad += ones.tau[i] - ones.tau[i - 1] != kappa * sum(ceilw[: 1 + i])
    seq = polynomial(1)
    toy = build_block_table(seq, 0.5, 0.9, 0.5, overrides=dict(kappa=3, I0=1), max_block=16)
    bound_fail = 0
    # Every tabulated tau_i >= tau_init, the step just before each, and tau_init itself.
    tabulated = [t for t in toy.tau[:-1] if t >= toy.tau_init]
    probes = sorted(set(tabulated + [t - 1 for t in toy.tau[1:] if t - 1 >= toy.tau_init] + [toy.tau_init]))
    for t in probes:
        checks += 1
        bound_fail += not bins_size(toy, t) > bins_lower_bound(toy, t)
    return TestReport(
        "block-identities",
        checks,
        float(bad + bound_fail),
        0.0,
        "<=",
        details={"identity_failures": int(bad), "bins_bound_failures": bound_fail, "tau_init": toy.tau_init, "probes": probes,
                 "I_of_tau_init": I_of_tau(toy, toy.tau_init)},
    )


def e_init_detection(seeds=range(200), horizon: int = 10_000, C_init: int = 3, lam: float = 0.9) -> TestReport:
    """Both streams reach C_init stuck balls in bin j_min within the horizon for >= 95% of seeds."""
    seq = explicit([1.0, 0.5])
    table = build_block_table(seq, lam, 0.9, 0.5, overrides=dict(kappa=3, I0=1, tau_init=1, C_init=C_init, zeta=1.0), cover_tau=50)
    times = [run_until_e_init(seq, lam, table, horizon, RngStream(s, ("e-init",))).stopped_at for s in seeds]
    found = [t for t in times if t is not None]
    return TestReport("e-init-detection", len(times), len(found) / len(times), 0.95, ">=", list(seeds),
                      details={"median_time": float(np.median(found)) if found else None})


def jam_trend_config() -> dict:
    """Three-bin toy where bin 1 is slow, so stuck noise builds up behind a crowded j_min."""
    return dict(seq=explicit([1.0, 0.02, 0.5]), lam=0.9, eta=0.9, nu=0.5, zeta=1.0, tau_max=30, horizon=3000)


def jam_trend(seeds=range(200), c_inits=(1, 4, 16)) -> TestReport:
    """Conditional on E_init, the fraction of seeds jammed for tau_max grows with C_init."""
    cfg = jam_trend_config()
    fractions = []
    detected = []
    for c in c_inits:
        table = build_block_table(cfg["seq"], cfg["lam"], cfg["eta"], cfg["nu"], cover_tau=cfg["tau_max"] + 10,
                                  overrides=dict(kappa=3, I0=1, tau_init=1, C_init=c, zeta=cfg["zeta"]))
        n = jammed = 0
        for s in seeds:
            run = run_until_e_init(cfg["seq"], cfg["lam"], table, cfg["horizon"], RngStream(s, ("jam-trend", str(c))), after=cfg["tau_max"])
            if run.stopped_at is None:
                continue
            n += 1
            jammed += bool(jam_predicate(run, table, run.stopped_at, cfg["tau_max"])["both"])
        detected.append(n)
        fractions.append(jammed / n if n else float("nan"))
    drops = sum(b < a for a, b in zip(fractions, fractions[1:]))
    strict = fractions[-1] > fractions[0]
    return TestReport("jam-trend", sum(detected), float(drops + (not strict)), 0.0, "<=", list(seeds),
                      details={"c_init": list(c_inits), "fraction_jammed": fractions, "detected": detected})


VERIFIERS: dict[str, Callable[..., TestReport]] = {
    "coupling-xy": coupling_xy,
    "coupling-yt": coupling_yt,
    "time-reversal": time_reversal,
    "trajectory-poisson": trajectory_poisson,
    "fill-domination": fill_domination,
    "empty-stucksend": empty_stucksend,
    "chernoff": chernoff,
    "mu-tau": mu_tau_check,
    "stationarity": stationarity,
    "classifier": classifier,
    "instability": instability,
    "block-identities": block_identities,
    "e-init": e_init_detection,
    "jam-trend": jam_trend,
}
