import math

import numpy as np
import pytest
from scipy import stats

from backofflab.analysis import (
    TestReport,
    chernoff_grid_check,
    chernoff_lower_bound,
    chernoff_upper_bound,
    combine,
    empty_stucksend_bound_test,
    empty_stucksend_probability,
    exact_lower_tail,
    exact_upper_tail,
    instability_evidence,
    jammed_bin_snapshot,
    quiet_period_scan,
    quiet_trend,
    stationarity_test,
    stream_noise,
)
from backofflab.backoff import ObserverConfig, run_backoff
from backofflab.engine import RngStream
from backofflab.sequences import binary_exponential, interleaved

BEB = binary_exponential()


# Chernoff bounds


def test_lower_bound_example():
    assert chernoff_lower_bound(8, 0.5) == pytest.approx(math.exp(-1))
    exact = stats.poisson.cdf(4, 8)
    assert exact_lower_tail(8, 0.5) == pytest.approx(exact)
    assert exact == pytest.approx(0.0996, abs=1e-4)
    assert exact <= chernoff_lower_bound(8, 0.5)


def test_upper_bound_is_trivial_at_e():
    assert chernoff_upper_bound(3.0, math.e) == pytest.approx(1.0)


def test_upper_bound_covers_binomial():
    exact = stats.binom.sf(39, 40, 0.1)
    assert exact_upper_tail(4, 10, "binomial", 40) == pytest.approx(exact)
    assert exact <= chernoff_upper_bound(4, 10)


def test_upper_bound_decreases_past_e():
    xs = np.linspace(math.e + 0.01, 20, 50)
    b = [chernoff_upper_bound(2.0, x) for x in xs]
    assert all(y < x for x, y in zip(b, b[1:]))


@pytest.mark.parametrize("call", [
    lambda: chernoff_lower_bound(0, 0.5),
    lambda: chernoff_lower_bound(1, 0),
    lambda: chernoff_lower_bound(1, 1),
    lambda: chernoff_upper_bound(-1, 2),
    lambda: chernoff_upper_bound(1, 1),
    lambda: exact_upper_tail(4, 2, "binomial", 2),
    lambda: exact_upper_tail(4, 2, "negbin"),
])
def test_bad_bound_arguments(call):
    with pytest.raises(ValueError):
        call()


def test_grid_has_no_violations():
    report = chernoff_grid_check()
    assert report.passed and report.sample_size == len(report.details["rows"])


# quiet periods


def test_zero_rate_is_quiet_everywhere():
    log = run_backoff(BEB, 0.0, 200, seed=0)
    scan = quiet_period_scan(log)
    assert scan.intervals == [(1, 200)] and scan.quiet_fraction == 1.0
    assert scan.quiet_after_noisy() == 0


def test_quiet_scan_needs_every_step():
    log = run_backoff(BEB, 0.5, 100, seed=0, observer=ObserverConfig(stride=2))
    with pytest.raises(ValueError):
        quiet_period_scan(log)


def test_beb_quiet_periods_die_out():
    log = run_backoff(BEB, 0.6, 20_000, stream=RngStream(1, ("q",)))
    scan = quiet_period_scan(log)
    assert scan.quiet_fraction < 0.01
    assert quiet_trend(log)["spearman"] < 0


def test_interleaved_keeps_returning_to_quiet():
    seq = interleaved(0.1, "doubly-exponential", 0.5)
    counts = [quiet_period_scan(run_backoff(seq, 0.5, 3000, stream=RngStream(s, ("q",)))).quiet_after_noisy() for s in range(5)]
    assert sum(c > 0 for c in counts) >= 3


# stationarity


def test_stationarity_holds_at_time_zero():
    x = jammed_bin_snapshot(BEB, 0.5, 0, list(range(300)), 6)
    assert stationarity_test(x, BEB, 0.5).passed


def test_stationarity_detects_missing_births():
    x = jammed_bin_snapshot(BEB, 0.5, 200, list(range(300)), 6, skip_births=True)
    report = stationarity_test(x, BEB, 0.5)
    assert not report.passed


def test_stationarity_needs_replicas():
    with pytest.raises(ValueError):
        stationarity_test(np.zeros((10, 3)), BEB, 0.5)


# single-step bound


def test_empty_stucksend_closed_form():
    p = BEB.values(4)
    empty = np.array([0, 0])
    assert empty_stucksend_probability(empty, p, 0.5) == pytest.approx(math.exp(-0.25))
    assert empty_stucksend_probability(empty, p, 0.5) <= math.exp(-stream_noise(empty, p, 0.5) / 3)
    stuck = np.array([0, 3, 1])
    assert empty_stucksend_probability(stuck, p, 0.5) == pytest.approx(math.exp(-0.25) * 0.5**3 * 0.75)
    assert stream_noise(stuck, p, 0.5) == pytest.approx(0.5 + 1.5 + 0.25)


def test_empty_stucksend_at_f_four():
    report = empty_stucksend_bound_test(BEB, 0.5, [np.array([0, 7])], 20_000, seed=2)
    assert report.passed
    part = report.details["parts"][0]
    assert part["details"]["f"] == pytest.approx(4.0)
    assert abs(part["statistic"] - part["details"]["exact"]) <= 4 * part["details"]["se"]


# reports


def test_report_pass_flag_is_recomputable():
    r = TestReport("x", 10, 1.5, 2.0, "<=", [1, 2])
    d = r.to_dict()
    assert d["passed"] and d["schema"] == "backofflab.report/1"
    assert TestReport("y", 1, -3.0, 2.0, "abs<=").passed is False
    assert r.line().startswith("PASS x:")
    with pytest.raises(ValueError):
        TestReport("z", 1, 0.0, 0.0, "==")


def test_combine_counts_failures():
    ok = TestReport("a", 5, 0.0, 1.0, "<=", [1])
    bad = TestReport("b", 7, 2.0, 1.0, "<=", [2])
    c = combine("both", [ok, bad])
    assert c.statistic == 1.0 and not c.passed
    assert c.sample_size == 12 and c.seeds == [1, 2]


def test_reports_are_reproducible():
    a = empty_stucksend_bound_test(BEB, 0.5, [np.array([0, 1])], 2000, seed=5)
    b = empty_stucksend_bound_test(BEB, 0.5, [np.array([0, 1])], 2000, seed=5)
    assert a.to_dict() == b.to_dict()


def test_instability_evidence_on_stable_toy_fails():
    logs = [run_backoff(BEB, 0.05, 2000, stream=RngStream(s, ("inst",)), observer=ObserverConfig(stride=10)) for s in range(4)]
    assert not instability_evidence(logs, 0.05).passed
