"""Statistical checks and bound calculators used by the verifiers.

Tolerances are in standard errors computed from the samples (or from the
reference distribution when it is fully specified).  Every report carries the
seeds and the comparison, so its pass flag can be recomputed.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import stats

from .backoff import RunLog
from .engine import RngStream
from .jammed import JammedState, draw_jammed_step, apply_jammed_step, init_jammed
from .sequences import SendSequence

REPORT_SCHEMA = "backofflab.report/1"
_COMPARE = {
    "<=": lambda s, r: s <= r,
    ">=": lambda s, r: s >= r,
    "abs<=": lambda s, r: abs(s) <= r,
}


@dataclass
class TestReport:
    """Outcome of one statistical or exact check.  ``passed`` is ``statistic <comparison> reference``."""

    __test__ = False  # not a pytest class

    name: str
    sample_size: int
    statistic: float
    reference: float
    comparison: str
    seeds: list = field(default_factory=list)
    details: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.comparison not in _COMPARE:
            raise ValueError(f"unknown comparison {self.comparison!r}")

    @property
    def passed(self) -> bool:
        return bool(_COMPARE[self.comparison](self.statistic, self.reference))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["passed"] = self.passed
        d["schema"] = REPORT_SCHEMA
        return d

    def line(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return f"{verdict} {self.name}: {self.statistic:.6g} {self.comparison} {self.reference:.6g} (n={self.sample_size})"


def combine(name: str, reports: Sequence[TestReport]) -> TestReport:
    """One report that passes when all parts pass; statistic = number of failures."""
    fails = sum(not r.passed for r in reports)
    return TestReport(
        name,
        sum(r.sample_size for r in reports),
        float(fails),
        0.0,
        "<=",
        sorted({s for r in reports for s in r.seeds}),
        {"parts": [r.to_dict() for r in reports]},
    )


# Chernoff bounds --------------------------------------------------------------------


def chernoff_lower_bound(mu: float, delta: float) -> float:
    """Bound on P(X <= (1 - delta) mu): exp(-delta^2 mu / 2)."""
    if mu <= 0:
        raise ValueError("mu must be positive")
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    return math.exp(-(delta**2) * mu / 2)


def chernoff_upper_bound(mu: float, x: float) -> float:
    """Bound on P(X >= x mu) for x > 1: exp(-mu x (log x - 1))."""
    if mu <= 0:
        raise ValueError("mu must be positive")
    if x <= 1:
        raise ValueError("x must exceed 1")
    return math.exp(-mu * x * (math.log(x) - 1))


def _family(mu: float, family: str, n: int | None):
    if family == "poisson":
        return stats.poisson(mu)
    if family == "binomial":
        if n is None or n < mu:
            raise ValueError("binomial family needs n >= mu")
        return stats.binom(n, mu / n)
    raise ValueError(f"unknown family {family!r}")


def exact_lower_tail(mu: float, delta: float, family: str = "poisson", n: int | None = None) -> float:
    """P(X <= (1 - delta) mu) for a Poisson or a binomial with mean mu."""
    return float(_family(mu, family, n).cdf(math.floor((1 - delta) * mu + 1e-12)))


def exact_upper_tail(mu: float, x: float, family: str = "poisson", n: int | None = None) -> float:
    """P(X >= x mu) for a Poisson or a binomial with mean mu."""
    k = math.ceil(x * mu - 1e-12)
    return float(_family(mu, family, n).sf(k - 1))


def chernoff_grid_check(
    mus: Iterable[float] = (1, 8, 64),
    deltas: Iterable[float] = (0.25, 0.5, 0.9),
    xs: Iterable[float] = (1.5, 2.0, math.e, 4.0, 10.0),
) -> TestReport:
    """Both bounds against exact Poisson and binomial tails on a grid."""
    rows = []
    for mu in mus:
        for family, n in (("poisson", None), ("binomial", 20 * math.ceil(mu)), ("binomial", math.ceil(10 * mu))):
            for d in deltas:
                rows.append(("lower", mu, d, family, n, exact_lower_tail(mu, d, family, n), chernoff_lower_bound(mu, d)))
            for x in xs:
                rows.append(("upper", mu, x, family, n, exact_upper_tail(mu, x, family, n), chernoff_upper_bound(mu, x)))
    violations = [r for r in rows if r[5] > r[6] * (1 + 1e-12)]
    return TestReport(
        "chernoff-bounds",
        len(rows),
        float(len(violations)),
        0.0,
        "<=",
        details={"rows": [dict(zip(("kind", "mu", "param", "family", "n", "exact", "bound"), r)) for r in rows]},
    )


# mu_tau Monte Carlo -------------------------------------------------------------------------


def mu_tau_monte_carlo(seq: SendSequence, tau: int, samples: int, stream: RngStream) -> tuple[float, float]:
    """(mean, standard error) of #{j : W_0 + ... + W_j <= tau} with W_j ~ Geometric(p_j)."""
    p = seq.values(tau + 1)
    g = stream.generator
    elapsed = np.zeros(samples, dtype=np.int64)
    count = np.zeros(samples, dtype=np.int64)
    alive = np.ones(samples, dtype=bool)
    for j in range(tau + 1):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        elapsed[idx] += g.geometric(p[j], size=idx.size)
        hit = elapsed[idx] <= tau
        count[idx[hit]] += 1
        alive[idx[~hit]] = False
    return float(count.mean()), float(count.std(ddof=1) / math.sqrt(samples))


# quiet periods ---------------------------------------------------------------------------------


@dataclass
class QuietScan:
    intervals: list  # maximal (first, last) step ranges with noise < 1
    steps: int
    quiet_steps: int
    first_step: int = 1

    @property
    def lengths(self) -> list:
        return [b - a + 1 for a, b in self.intervals]

    @property
    def quiet_fraction(self) -> float:
        return self.quiet_steps / self.steps if self.steps else 0.0

    def quiet_after_noisy(self) -> int:
        """Number of quiet intervals that start after at least one noisy step."""
        return sum(1 for a, _ in self.intervals if a > self.first_step)

    def summary(self) -> dict:
        return {
            "intervals": len(self.intervals),
            "quiet_steps": self.quiet_steps,
            "quiet_fraction": self.quiet_fraction,
            "longest": max(self.lengths, default=0),
            "quiet_after_noisy": self.quiet_after_noisy(),
        }


def quiet_period_scan(log: RunLog) -> QuietScan:
    """Maximal intervals of consecutive steps whose noise is below 1.  Needs stride 1."""
    t = np.asarray(log.t, dtype=np.int64)
    if t.size and np.any(np.diff(t) != 1):
        raise ValueError("quiet periods need every step logged (observer stride 1)")
    quiet = np.asarray(log.noise) < 1.0
    intervals = []
    start = None
    for k, q in enumerate(quiet):
        if q and start is None:
            start = k
        elif not q and start is not None:
            intervals.append((int(t[start]), int(t[k - 1])))
            start = None
    if start is not None:
        intervals.append((int(t[start]), int(t[-1])))
    return QuietScan(intervals, len(t), int(quiet.sum()), first_step=int(t[0]) if t.size else 1)


def quiet_trend(log: RunLog, windows: int = 10) -> dict:
    """Quiet fraction per equal window and the Spearman correlation with time."""
    quiet = np.asarray(log.noise) < 1.0
    parts = np.array_split(quiet, windows)
    frac = [float(p.mean()) if p.size else 0.0 for p in parts]
    rho = stats.spearmanr(np.arange(windows), frac).statistic if np.ptp(frac) > 0 else 0.0
    return {"fractions": frac, "spearman": float(rho)}


# stationarity of the externally jammed process ------------------------------------------------


def jammed_bin_snapshot(
    seq: SendSequence,
    lam: float,
    t: int,
    seeds: Sequence[int],
    J_obs: int,
    skip_births: bool = False,
) -> np.ndarray:
    """Bin sizes 1..J_obs of Y at time t, one row per seed.

    ``skip_births`` is a negative control: the initial state is stationary but
    no ball is ever born.
    """
    p = seq.values(J_obs + 64)
    rows = np.zeros((len(seeds), J_obs), dtype=np.int64)
    for r, seed in enumerate(seeds):
        stream = RngStream(seed, ("stationarity",))
        state = init_jammed(seq, lam, J_obs, stream)
        if skip_births:
            state.lam = 0.0
        for _ in range(t):
            if len(p) < len(state.stuck) + 2:
                p = seq.values(2 * len(p))
            apply_jammed_step(state, *draw_jammed_step(state, p, stream))
        rows[r] = [state.bin_size(j) for j in range(1, J_obs + 1)]
    return rows


def _poisson_categories(m: float, k: int = 6) -> np.ndarray:
    """Cut points splitting Poisson(m) into about k categories of similar mass."""
    cuts = np.unique(stats.poisson.ppf(np.linspace(0, 1, k + 1)[1:-1], m).astype(np.int64))
    return cuts


def stationarity_test(samples: np.ndarray, seq: SendSequence, lam: float, sigmas: float = 4.0, alpha: float = 1e-3, seeds=()) -> TestReport:
    """Rows are replicas, column j-1 is bin j.  Checks each bin's mean (and variance)
    against lambda/p_j within ``sigmas`` standard errors, and a chi-square fit of
    the Poisson(lambda/p_j) laws pooled over bins at level ``alpha``."""
    n, J = samples.shape
    if n < 100:
        raise ValueError("need at least 100 replicas")
    p = seq.values(J + 1)
    per_bin = []
    chi2, dof = 0.0, 0
    for j in range(1, J + 1):
        x = samples[:, j - 1]
        m = lam / p[j]
        z_mean = (x.mean() - m) / math.sqrt(m / n)
        z_var = (x.var(ddof=1) - m) / math.sqrt((m + 2 * m * m) / n)
        cuts = _poisson_categories(m)
        edges = np.concatenate(([-1], cuts, [np.iinfo(np.int64).max]))
        observed = np.histogram(x, bins=edges + 0.5)[0]
        cdf = stats.poisson.cdf(edges[1:-1], m)
        probs = np.diff(np.concatenate(([0.0], cdf, [1.0])))
        expected = n * probs
        keep = expected > 0
        chi2 += float(((observed[keep] - expected[keep]) ** 2 / expected[keep]).sum())
        dof += int(keep.sum()) - 1
        per_bin.append({"j": j, "target": float(m), "mean": float(x.mean()), "z_mean": float(z_mean), "z_var": float(z_var)})
    pval = float(stats.chi2.sf(chi2, dof)) if dof > 0 else 1.0
    worst = max(abs(b["z_mean"]) for b in per_bin)
    means_ok = worst <= sigmas
    return TestReport(
        "stationarity",
        n,
        pval if means_ok else 0.0,
        alpha,
        ">=",
        list(seeds),
        {"per_bin": per_bin, "chi2": chi2, "dof": dof, "p_value": pval, "max_abs_z_mean": worst, "sigmas": sigmas},
    )


# single-step empty stucksend bound ------------------------------------------------------------


def stream_noise(stuck: np.ndarray, p: np.ndarray, lam: float) -> float:
    """f(x) = lambda + sum_j x_j p_j (full rate, as for each stream of T)."""
    return lam + float(np.dot(stuck[1:], p[1 : len(stuck)]))


def empty_stucksend_probability(stuck: np.ndarray, p: np.ndarray, lam: float) -> float:
    """Exact P(no stuck sender) for one rate-lambda/2 stream: e^{-lambda/2} prod (1-p_j)^{x_j}."""
    return math.exp(-lam / 2) * math.prod((1 - p[j]) ** int(stuck[j]) for j in range(1, len(stuck)))


def empty_stucksend_bound_test(
    seq: SendSequence,
    lam: float,
    preparations: Sequence[np.ndarray],
    trials: int,
    seed: int,
    sigmas: float = 3.0,
) -> TestReport:
    """For each prepared stuck vector, step one stream of T (rate lambda/2) ``trials``
    times and compare the empty-stucksend frequency with exp(-f/3) + 3 sigma."""
    parts = []
    for k, stuck in enumerate(preparations):
        stuck = np.asarray(stuck, dtype=np.int64)
        p = seq.values(len(stuck) + 2)
        f = stream_noise(stuck, p, lam)
        stream = RngStream(seed, ("empty-stucksend", str(k)))
        empty = 0
        state = JammedState(lam / 2, 0)
        for trial in range(trials):
            state.t = trial
            state.stuck = stuck
            births, ss, _ = draw_jammed_step(state, p, stream)
            empty += int(ss.sum()) == 0
        freq = empty / trials
        se = math.sqrt(max(freq * (1 - freq), 1.0 / trials) / trials)
        bound = math.exp(-f / 3)
        parts.append(
            TestReport(
                f"empty-stucksend f={f:g}",
                trials,
                freq,
                bound + sigmas * se,
                "<=",
                [seed],
                {"f": f, "bound": bound, "se": se, "exact": empty_stucksend_probability(stuck, p, lam)},
            )
        )
    return combine("empty-stucksend-bound", parts)


# drift evidence ----------------------------------------------------------------------------------


def instability_evidence(logs: Sequence[RunLog], lam: float, growth: float = 5.0, quorum: int | None = None) -> TestReport:
    """Median backlog at T against T/10, and how many runs deliver less than lambda."""
    late = []
    early = []
    below = 0
    for log in logs:
        t = np.asarray(log.t)
        T = int(t[-1])
        k = int(np.searchsorted(t, T // 10))
        early.append(log.backlog[k])
        late.append(log.backlog[-1])
        below += log.summary()["success_rate"] < lam
    quorum = quorum if quorum is not None else math.ceil(0.9 * len(logs))
    med_late, med_early = float(np.median(late)), float(np.median(early))
    ratio = med_late / med_early if med_early > 0 else math.inf
    growth_ok = ratio >= growth
    return TestReport(
        "instability-evidence",
        len(logs),
        float(below) if growth_ok else -1.0,
        float(quorum),
        ">=",
        details={"median_early": med_early, "median_late": med_late, "ratio": ratio, "below_lambda": below},
    )
