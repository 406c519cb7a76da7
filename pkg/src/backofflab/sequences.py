"""Send sequences: construction, evaluation, and finite-prefix classification.

Every sequence is evaluated in log space first (``log_values``), so kinds that
decay faster than floating point can represent (for example ``2**-(2**j)``) still
compare correctly against thresholds.  ``values`` clamps at the smallest positive
double so that every returned probability stays in (0, 1].
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Mapping, Sequence

import numpy as np
from scipy.signal import lfilter

KINDS = (
    "constant",
    "geometric",
    "binary-exponential",
    "polynomial",
    "doubly-exponential",
    "interleaved",
    "explicit",
)
CASES = ("killer", "kelly-macphee", "suitable", "lced-undecided")
TINY = 5e-324
GRID = tuple(round(0.1 * k, 1) for k in range(1, 10))
# Suitability search order: eta from the middle outwards, nu from large to small.
ETA_ORDER = (0.5, 0.4, 0.6, 0.3, 0.7, 0.2, 0.8, 0.1, 0.9)
NU_ORDER = tuple(reversed(GRID))


class SequenceError(ValueError):
    """Raised for parameters that do not define probabilities in (0, 1]."""


def _check_prob(name: str, value: float, allow_one: bool = True) -> float:
    value = float(value)
    hi_ok = value <= 1.0 if allow_one else value < 1.0
    if not (value > 0.0 and hi_ok):
        bound = "(0, 1]" if allow_one else "(0, 1)"
        raise SequenceError(f"{name}={value} must lie in {bound}")
    return value


def doubly_exponential_splices(limit: int) -> tuple[int, ...]:
    """Splice points 0, 2**2, 2**4, 2**8, ... up to the first one exceeding ``limit``."""
    out = [0]
    k = 1
    while out[-1] <= limit:
        out.append(2 ** (2**k))
        k += 1
    return tuple(out)


def _tail_log(tail: Mapping[str, Any], j: np.ndarray) -> np.ndarray:
    name = tail["name"]
    if name == "constant":
        return np.full(j.shape, math.log(tail["value"]))
    if name == "inv-loglog":
        # 1/log(log j), capped at 1 where it is not a probability.
        jf = np.maximum(j.astype(float), 3.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            ll = np.log(np.log(jf))
            out = np.where(ll > 1.0, -np.log(ll), 0.0)
        return out
    raise SequenceError(f"unknown tail function {name!r}")


@dataclass(frozen=True, eq=False)
class SendSequence:
    """A send sequence p_0, p_1, ... evaluated lazily.

    ``params`` holds the kind-specific parameters; ``p0`` optionally replaces p_0.
    Construct through the helper functions (``constant``, ``geometric``, ...) or
    ``from_dict``.
    """

    kind: str
    params: Mapping[str, Any] = field(default_factory=dict)
    p0: float | None = None

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise SequenceError(f"unknown kind {self.kind!r}")
        prm = dict(self.params)
        k = self.kind
        if k == "constant":
            _check_prob("c", prm["c"])
        elif k == "geometric":
            _check_prob("rho", prm["rho"], allow_one=False)
        elif k == "polynomial":
            if not float(prm["alpha"]) > 0:
                raise SequenceError("alpha must be positive")
        elif k == "doubly-exponential":
            if not float(prm.get("base", 2.0)) > 1:
                raise SequenceError("base must exceed 1")
        elif k == "interleaved":
            _check_prob("rho", prm["rho"], allow_one=False)
            spl = prm["splices"]
            if spl != "doubly-exponential":
                spl = tuple(int(a) for a in spl)
                if not spl or spl[0] != 0 or any(b <= a for a, b in zip(spl, spl[1:])):
                    raise SequenceError("splices must be strictly increasing and start at 0")
                prm["splices"] = spl
            tail = dict(prm["g"])
            if tail["name"] == "constant":
                _check_prob("g", tail["value"])
            prm["g"] = tail
        elif k == "explicit":
            prefix = tuple(float(v) for v in prm["prefix"])
            if not prefix:
                raise SequenceError("explicit prefix must be nonempty")
            for i, v in enumerate(prefix):
                _check_prob(f"p_{i}", v)
            prm["prefix"] = prefix
            tail = dict(prm.get("tail", {"name": "repeat-last"}))
            if tail["name"] == "geometric":
                _check_prob("tail rho", tail["rho"], allow_one=False)
            elif tail["name"] == "constant":
                _check_prob("tail value", tail["value"])
            elif tail["name"] not in ("repeat-last", "cycle"):
                raise SequenceError(f"unknown tail rule {tail['name']!r}")
            prm["tail"] = tail
        if self.p0 is not None:
            _check_prob("p0", self.p0)
        object.__setattr__(self, "params", prm)

    # evaluation -------------------------------------------------------------

    def log_values(self, n: int) -> np.ndarray:
        """log p_j for j = 0..n-1 (may contain -inf for underflowing kinds)."""
        j = np.arange(n, dtype=np.int64)
        prm = self.params
        k = self.kind
        with np.errstate(over="ignore", invalid="ignore"):
            if k == "constant":
                out = np.full(n, math.log(prm["c"]))
            elif k == "geometric":
                out = j * math.log(prm["rho"])
            elif k == "binary-exponential":
                out = -j * math.log(2.0)
            elif k == "polynomial":
                out = -float(prm["alpha"]) * np.log1p(j.astype(float))
            elif k == "doubly-exponential":
                b = float(prm.get("base", 2.0))
                out = -np.power(b, j.astype(float)) * math.log(b)
            elif k == "interleaved":
                out = self._interleaved_log(j)
            else:
                out = self._explicit_log(j)
        out = np.asarray(out, dtype=float)
        if self.p0 is not None and n > 0:
            out[0] = math.log(self.p0)
        return out

    def _interleaved_log(self, j: np.ndarray) -> np.ndarray:
        prm = self.params
        spl = prm["splices"]
        if spl == "doubly-exponential":
            spl = doubly_exponential_splices(int(j[-1]) if len(j) else 0)
        idx = np.searchsorted(np.asarray(spl, dtype=np.int64), j, side="right") - 1
        geo = j * math.log(prm["rho"])
        return np.where(idx % 2 == 0, geo, _tail_log(prm["g"], j))

    def _explicit_log(self, j: np.ndarray) -> np.ndarray:
        prefix = np.log(np.asarray(self.params["prefix"]))
        m = len(prefix)
        tail = self.params["tail"]
        out = np.empty(j.shape, dtype=float)
        inside = j < m
        out[inside] = prefix[j[inside]]
        rest = j[~inside]
        name = tail["name"]
        if name == "repeat-last":
            out[~inside] = prefix[-1]
        elif name == "cycle":
            out[~inside] = prefix[rest % m]
        elif name == "constant":
            out[~inside] = math.log(tail["value"])
        else:
            out[~inside] = prefix[-1] + (rest - m + 1) * math.log(tail["rho"])
        return out

    def values(self, n: int) -> np.ndarray:
        """p_j for j = 0..n-1, clamped below at the smallest positive double."""
        if self.kind == "binary-exponential":
            # Powers of two are exact; exp(-j log 2) is not.
            out = np.ldexp(1.0, -np.arange(n))
            if self.p0 is not None and n > 0:
                out[0] = self.p0
            return np.maximum(out, TINY)
        return np.maximum(np.exp(self.log_values(n)), TINY)

    def log_p(self, j: int) -> float:
        if j < 0:
            raise ValueError("bin index must be nonnegative")
        return float(self.log_values(j + 1)[j])

    def __call__(self, j: int) -> float:
        return eval_p(self, j)

    # serialization ----------------------------------------------------------

    def to_dict(self) -> dict:
        out: dict[str, Any] = {"kind": self.kind}
        for key, value in self.params.items():
            out[key] = list(value) if isinstance(value, tuple) else value
        if self.p0 is not None:
            out["p0"] = self.p0
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, SendSequence) and self.to_dict() == other.to_dict()

    def __hash__(self) -> int:
        return hash(self.to_json())


def from_dict(data: Mapping[str, Any]) -> SendSequence:
    data = dict(data)
    kind = data.pop("kind")
    p0 = data.pop("p0", None)
    return SendSequence(kind, data, p0)


def from_json(text: str) -> SendSequence:
    return from_dict(json.loads(text))


def constant(c: float) -> SendSequence:
    return SendSequence("constant", {"c": c})


def geometric(rho: float) -> SendSequence:
    return SendSequence("geometric", {"rho": rho})


def binary_exponential() -> SendSequence:
    return SendSequence("binary-exponential")


def polynomial(alpha: float) -> SendSequence:
    return SendSequence("polynomial", {"alpha": alpha})


def doubly_exponential(base: float = 2.0) -> SendSequence:
    return SendSequence("doubly-exponential", {"base": base})


def interleaved(rho: float, splices: Sequence[int] | str, g: Mapping[str, Any] | float) -> SendSequence:
    tail = {"name": "constant", "value": float(g)} if isinstance(g, (int, float)) else dict(g)
    return SendSequence("interleaved", {"rho": rho, "splices": splices, "g": tail})


def explicit(prefix: Sequence[float], tail: Mapping[str, Any] | None = None) -> SendSequence:
    return SendSequence("explicit", {"prefix": prefix, "tail": dict(tail or {"name": "repeat-last"})})


def parse_sequence(text: str) -> SendSequence:
    """Parse a CLI shorthand (``beb``, ``const:0.5``, ``geom:0.3``, ``poly:2``,
    ``doubly-exp``, ``interleaved:rho=0.3,g=0.5``) or a JSON object."""
    text = text.strip()
    if text.startswith("{"):
        return from_json(text)
    name, _, arg = text.partition(":")
    name = name.lower()
    try:
        if name in ("beb", "binary-exponential"):
            return binary_exponential()
        if name in ("const", "constant"):
            return constant(float(arg))
        if name in ("geom", "geometric"):
            return geometric(float(arg))
        if name in ("poly", "polynomial"):
            return polynomial(float(arg))
        if name in ("doubly-exp", "doubly-exponential"):
            return doubly_exponential(float(arg) if arg else 2.0)
        if name == "interleaved":
            opts = dict(item.split("=", 1) for item in arg.split(",") if item)
            g_text = opts.get("g", "0.5")
            g: Any = {"name": "inv-loglog"} if g_text == "inv-loglog" else float(g_text)
            splices: Any = opts.get("splices", "doubly-exponential")
            if splices != "doubly-exponential":
                splices = [int(a) for a in splices.split("/")]
            return interleaved(float(opts.get("rho", "0.3")), splices, g)
    except (KeyError, ValueError) as exc:
        raise SequenceError(f"cannot parse sequence {text!r}: {exc}") from exc
    raise SequenceError(f"unknown sequence shorthand {text!r}")


# basic operations -----------------------------------------------------------


def eval_p(seq: SendSequence, j: int) -> float:
    """p_j, in (0, 1]."""
    if seq.kind == "binary-exponential" and (j > 0 or seq.p0 is None):
        return max(math.ldexp(1.0, -j), TINY)
    return max(math.exp(seq.log_p(j)), TINY)


def normalize_p0(seq: SendSequence, lam: float) -> tuple[SendSequence, float]:
    """Replace p_0 by 1 and scale the arrival rate by the old p_0."""
    if not 0 < lam < 1:
        raise ValueError("arrival rate must lie in (0, 1)")
    p0 = eval_p(seq, 0)
    return replace(seq, p0=None if p0 == 1.0 else 1.0), lam * p0


def _ceil_tolerant(x: float) -> int:
    # 3/0.1 evaluates to 30.000000000000004; treat near-integers as integers.
    r = round(x)
    return int(r) if abs(x - r) <= 1e-9 * max(1.0, abs(x)) else math.ceil(x)


def suitability_constants(lam: float, eta: float, nu: float) -> tuple[int, float]:
    """Return ``(kappa, p_star)``."""
    for name, v in (("lambda", lam), ("eta", eta), ("nu", nu)):
        if not 0 < v < 1:
            raise ValueError(f"{name} must lie in (0, 1)")
    kappa = _ceil_tolerant(3.0 / eta)
    p_star = min(lam / 200.0, lam * eta / (1800.0 * kappa**2 * math.log(1.0 / nu)))
    return kappa, p_star


@dataclass(frozen=True)
class ClassifierVerdict:
    case: str
    holds: bool
    witness: dict
    horizon: int
    caveat: bool = True

    def __post_init__(self) -> None:
        if self.case not in CASES:
            raise ValueError(f"unknown case {self.case!r}")

    def to_dict(self) -> dict:
        return {
            "case": self.case,
            "holds": self.holds,
            "witness": self.witness,
            "horizon": self.horizon,
            "caveat": self.caveat,
        }


def _suitable_from_logs(logp: np.ndarray, lam: float, eta: float, nu: float) -> dict:
    horizon = len(logp) - 1
    kappa, p_star = suitability_constants(lam, eta, nu)
    n = np.arange(1, horizon + 1)
    small = np.cumsum(logp[1:] <= math.log(p_star))
    ok = (small > eta * n) & (n * math.log(nu) < logp[1:])
    bad = np.flatnonzero(~ok)
    out = {"eta": eta, "nu": nu, "kappa": kappa, "p_star": p_star}
    if bad.size == 0:
        out["n0"] = 1
    elif bad[-1] == horizon - 1:
        out["first_violation"] = int(bad[0] + 1)
    else:
        out["n0"] = int(bad[-1] + 2)
    return out


def check_suitable(seq: SendSequence, lam: float, eta: float, nu: float, horizon: int) -> ClassifierVerdict:
    """Prefix check of the two suitability conditions; finds the least n0."""
    if horizon < 10:
        raise ValueError("horizon must be at least 10")
    if eval_p(seq, 0) != 1.0:
        raise ValueError("p_0 must be 1; apply normalize_p0 first")
    w = _suitable_from_logs(seq.log_values(horizon + 1), lam, eta, nu)
    return ClassifierVerdict("suitable", "n0" in w, w, horizon)


def killer_hits(seq: SendSequence, lam: float, horizon: int) -> np.ndarray:
    """All j <= horizon with p_j <= (lam * p_0 / 2)**j."""
    logp = seq.log_values(horizon + 1)
    j = np.arange(horizon + 1)
    rhs = j * math.log(lam * math.exp(logp[0]) / 2.0)
    return np.flatnonzero(logp <= rhs + 1e-12 * np.maximum(1.0, np.abs(rhs)))


def check_killer(seq: SendSequence, lam: float, horizon: int) -> ClassifierVerdict:
    if not 0 < lam < 1:
        raise ValueError("arrival rate must lie in (0, 1)")
    hits = killer_hits(seq, lam, horizon)
    lo = horizon // 2
    upper = int(np.count_nonzero(hits >= lo))
    density = upper / (horizon - lo + 1)
    witness = {
        "hit_count": int(hits.size),
        "hits_head": [int(h) for h in hits[:50]],
        "upper_density": density,
    }
    return ClassifierVerdict("killer", bool(hits.size and density > 0), witness, horizon)


# Kelly-MacPhee quantities -----------------------------------------------------


def mu_tau_curve(seq: SendSequence, tau_max: int) -> np.ndarray:
    """mu_tau for tau = 0..tau_max, where mu_tau = sum_j P(W_0 + ... + W_j <= tau)."""
    if tau_max < 0:
        raise ValueError("tau must be nonnegative")
    mu = np.zeros(tau_max + 1)
    if tau_max == 0:
        return mu
    p = seq.values(tau_max)
    # mass[s] = P(partial sum == s), s = 0..tau_max; starts at the empty sum.
    mass = np.zeros(tau_max + 1)
    mass[0] = 1.0
    for j in range(tau_max):
        pj = p[j]
        mass = lfilter([0.0, pj], [1.0, -(1.0 - pj)], mass)
        cdf = np.cumsum(mass)
        mu += cdf
        if cdf[-1] < 1e-30:
            break
    return mu


def mu_tau(seq: SendSequence, tau: int) -> float:
    return float(mu_tau_curve(seq, tau)[-1])


def km_partial_sum(seq: SendSequence, lam: float, tau_max: int) -> tuple[float, str]:
    """Partial sum of mu_tau * exp(-lam * mu_tau) with a convergence trend flag.

    The flag fits the log-log slope of the summands over the last decade of tau:
    ``converging`` when it is below -1 (or summands vanish), else ``diverging``.
    """
    mu = mu_tau_curve(seq, max(tau_max, 0))
    terms = mu * np.exp(-lam * mu)
    total = float(terms.sum())
    lo = max(1, tau_max // 10)
    if tau_max - lo < 2:
        return total, "undetermined"
    tail = terms[lo : tau_max + 1]
    if np.any(tail <= 0):
        return total, "converging"
    x = np.log(np.arange(lo, tau_max + 1))
    slope = np.polyfit(x, np.log(tail), 1)[0]
    return total, "converging" if slope < -1 else "diverging"


# classification -------------------------------------------------------------------


def _slope(y: np.ndarray, lo: int, hi: int) -> float:
    x = np.arange(lo, hi + 1, dtype=float)
    return float(np.polyfit(x, y[lo : hi + 1], 1)[0])


def oj_evidence(seq: SendSequence, horizon: int) -> dict:
    """Evidence that log(1/p_j) = o(j) on the prefix.

    Compares least-squares slopes of log(1/p_j) over [h/4, h/2] and [h/2, h]; a
    ratio below 0.9 counts as evidence.  Windows where the fitted change is
    negligible count only if log(1/p_j) never exceeds its tail level by more
    than one nat anywhere on the prefix (bounded, hence o(j)).
    """
    y = -seq.log_values(horizon + 1)
    q, h2 = horizon // 4, horizon // 2
    if not np.all(np.isfinite(y[q:])):
        return {"evidence": False, "reason": "super-exponential decay"}
    s1, s2 = _slope(y, q, h2), _slope(y, h2, horizon)
    flat1 = abs(s1) * (h2 - q) < 0.05
    flat2 = abs(s2) * (horizon - h2) < 0.05
    out = {"slope_early": s1, "slope_late": s2}
    if flat1 and flat2:
        bounded = bool(np.max(y) <= np.max(y[q:]) + 1.0)
        out.update(evidence=bounded, reason="flat windows, bounded prefix" if bounded else "flat windows after an excursion")
    elif s1 > 0 and not flat1:
        ratio = s2 / s1
        out.update(evidence=bool(ratio < 0.9), ratio=ratio, reason="slope ratio")
    else:
        out.update(evidence=False, reason="no decreasing slope")
    return out


def median_prefix(seq: SendSequence, n: int) -> float:
    """Lower median of p_0..p_n."""
    if n < 0:
        raise ValueError("n must be nonnegative")
    v = np.sort(seq.values(n + 1))
    return float(v[n // 2])


def _dyadic_windows(horizon: int, smallest: float) -> list[tuple[int, int]]:
    """Windows (hi/2, hi] with hi = horizon, horizon/2, ... while hi >= smallest (ascending)."""
    out = []
    hi = horizon
    while hi >= smallest and hi >= 2:
        out.append((hi // 2 + 1, hi))
        hi //= 2
    return out[::-1]


def best_c_curves(seq: SendSequence, horizon: int, etas: Sequence[float] = GRID, samples: int = 8) -> dict:
    """For each eta, the best c per dyadic window (largest c such that more than
    (1-eta) n of p_0..p_n exceed it, maximised over sampled n in the window)."""
    vals = seq.values(horizon + 1)
    windows = _dyadic_windows(horizon, math.sqrt(horizon))
    curves: dict[float, list[tuple[int, float]]] = {eta: [] for eta in etas}
    for lo, hi in windows:
        ns = np.unique(np.linspace(lo, hi, samples).astype(int))
        best = {eta: 0.0 for eta in etas}
        for n in ns:
            desc = np.sort(vals[: n + 1])[::-1]
            for eta in etas:
                rank = max(1, math.ceil((1 - eta) * n - 1e-9))
                best[eta] = max(best[eta], float(desc[rank - 1]))
        for eta in etas:
            curves[eta].append((hi, best[eta]))
    return curves


def check_lced_prefix(seq: SendSequence, horizon: int) -> ClassifierVerdict:
    """Finite-prefix proxies for the three LCED items.

    (i) for every eta the best-c curve must not decline across dyadic scales
        (last window at least 0.9 of the maximum over windows above sqrt(h));
    (ii) two consecutive dyadic windows whose largest log(1/p_j)/j agree within
        a factor 0.9 (a subsequence with log(1/p_j) = Theta(j));
    (iii) the largest log(1/p_j)/j in the last window is at most 1.1 times the
        largest on the earlier prefix (no super-exponential decay).
    ``holds`` is True when all three proxies pass.
    """
    if horizon < 100:
        raise ValueError("horizon must be at least 100")
    curves = best_c_curves(seq, horizon)
    item1 = {}
    for eta, curve in curves.items():
        cs = [c for _, c in curve]
        item1[eta] = bool(cs[-1] > 0 and cs[-1] >= 0.9 * max(cs))
    j = np.arange(1, horizon + 1)
    with np.errstate(invalid="ignore"):
        r = -seq.log_values(horizon + 1)[1:] / j
    wins = _dyadic_windows(horizon, 16)
    maxima = [float(np.max(r[lo - 1 : hi])) for lo, hi in wins]
    item2 = any(b > 0 and a > 0 and min(a, b) >= 0.9 * max(a, b) for a, b in zip(maxima, maxima[1:]))
    last_lo = wins[-1][0]
    earlier = float(np.max(r[: last_lo - 1])) if last_lo > 1 else 0.0
    fitted_c = float(np.max(r))
    item3 = bool(np.isfinite(maxima[-1]) and maxima[-1] <= 1.1 * earlier)
    witness = {
        "item_i": all(item1.values()),
        "item_i_by_eta": {str(k): v for k, v in item1.items()},
        "best_c_curves": {str(k): v for k, v in curves.items()},
        "item_ii": bool(item2),
        "window_max_rate": maxima,
        "item_iii": item3,
        "fitted_C": fitted_c,
    }
    holds = witness["item_i"] and witness["item_ii"] and witness["item_iii"]
    return ClassifierVerdict("lced-undecided", bool(holds), witness, horizon)


def classify(seq: SendSequence, lam: float, horizon: int = 10_000) -> ClassifierVerdict:
    """First applicable instability case on the prefix: killer, Kelly-MacPhee, suitable."""
    seq1, lam1 = normalize_p0(seq, lam)
    killer = check_killer(seq1, lam1, horizon)
    if killer.holds:
        return killer
    oj = oj_evidence(seq1, horizon)
    if oj["evidence"]:
        return ClassifierVerdict("kelly-macphee", True, oj, horizon)
    logp = seq1.log_values(horizon + 1)
    for eta in ETA_ORDER:
        for nu in NU_ORDER:
            w = _suitable_from_logs(logp, lam1, eta, nu)
            if "n0" in w:
                w["normalized_lambda"] = lam1
                return ClassifierVerdict("suitable", True, w, horizon)
    lced = check_lced_prefix(seq1, horizon)
    witness = {"lced_proxies_pass": lced.holds, **lced.witness, "oj": oj}
    return ClassifierVerdict("lced-undecided", lced.holds, witness, horizon)
