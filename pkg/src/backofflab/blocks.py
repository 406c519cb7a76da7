"""Block construction and the derived constants used by the jammedness machinery.

Blocks partition bins 1, 2, ... into B_1 = {1} and B_i = {u(i-1)+1, ..., u(i)}
with u(i) = kappa**(i-1).  Block weights W_i sum 1/p_j over the block (the
expected time to walk through it).  The cumulative times tau_i pace the growth of
bins(tau) = B_{I(tau)-1}.

The literal constants are astronomically large for every admissible parameter
choice, so every derived constant can be overridden.  Overrides are recorded on
the table and travel with every artifact built from it.
"""

from __future__ import annotations

import bisect
import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np

from .sequences import SendSequence, _ceil_tolerant, _suitable_from_logs, suitability_constants

OVERRIDE_KEYS = ("kappa", "zeta", "I0", "tau_init", "C_init")
BIN_BUDGET = 50_000_000
BLOCK_BUDGET = 400
WEIGHT_BITS = 100_000


class ConstantsInfeasible(RuntimeError):
    """The requested constants need more blocks or bins than the budget allows."""


class TableExhausted(LookupError):
    """A lookup needs a tau beyond the last tabulated tau_i."""


def block_upper(kappa: int, i: int) -> int:
    """u(i); u(0) = 0."""
    return 0 if i == 0 else kappa ** (i - 1)


def block_lower(kappa: int, i: int) -> int:
    return 1 if i == 1 else block_upper(kappa, i - 1) + 1


def block_size(kappa: int, i: int) -> int:
    return block_upper(kappa, i) - block_upper(kappa, i - 1)


def block_weight(seq: SendSequence, lo: int, hi: int, budget: int = BIN_BUDGET):
    """Sum of 1/p_j over lo..hi: exact ints where the kind allows, floats otherwise."""
    kind, prm = seq.kind, seq.params
    size = hi - lo + 1
    if kind == "constant":
        return size if prm["c"] == 1.0 else size / prm["c"]
    if kind == "binary-exponential":
        if hi > WEIGHT_BITS:
            raise ConstantsInfeasible(f"block {lo}..{hi} weight has more than {WEIGHT_BITS} bits")
        return 2 ** (hi + 1) - 2**lo
    if kind == "geometric":
        r = 1.0 / prm["rho"]
        try:
            return r**lo * (r**size - 1.0) / (r - 1.0)
        except OverflowError:
            return math.inf
    if size > budget:
        raise ConstantsInfeasible(f"block {lo}..{hi} has {size} bins, over the budget of {budget}")
    total = 0.0
    step = 1_000_000
    for start in range(lo, hi + 1, step):
        stop = min(hi, start + step - 1)
        logp = seq.log_values(stop + 1)[start:]
        with np.errstate(over="ignore"):
            total += float(np.sum(np.exp(-logp)))
    return total


def _ceil_weight(w) -> int:
    if isinstance(w, int):
        return w
    if not math.isfinite(w):
        raise ConstantsInfeasible("block weight overflows floating point")
    return _ceil_tolerant(w)


@dataclass(frozen=True)
class BlockTable:
    lam: float
    eta: float
    nu: float
    kappa: int
    zeta: float
    p_star: float
    j_min: int | None
    j0: int | None
    I0: int
    weights: tuple  # W_1, W_2, ... (index 0 is block 1)
    tau: tuple  # tau_0 = 0, tau_1, ...
    tau_init: int | None
    C_init: int | None
    C_init_log: float | None
    Q: int
    horizon: int
    overrides: Mapping[str, Any] = field(default_factory=dict)

    @property
    def max_block(self) -> int:
        return len(self.weights)

    def upper(self, i: int) -> int:
        return block_upper(self.kappa, i)

    def lower(self, i: int) -> int:
        return block_lower(self.kappa, i)

    def size(self, i: int) -> int:
        return block_size(self.kappa, i)

    def ceil_weight(self, i: int) -> int:
        return _ceil_weight(self.weights[i - 1])

    def horizon_sum(self, i: int) -> int:
        """kappa * sum_{k<=i} ceil(W_k): the time budget for walking down from block i."""
        return self.kappa * sum(self.ceil_weight(k) for k in range(1, i + 1))

    def block_of(self, j: int) -> int:
        """Index i with j in B_i."""
        if j < 1:
            raise ValueError("blocks start at bin 1")
        i = 1
        while self.upper(i) < j:
            i += 1
        return i

    def to_dict(self) -> dict:
        return {
            "schema": "backofflab.blocktable/1",
            "lam": self.lam,
            "eta": self.eta,
            "nu": self.nu,
            "kappa": self.kappa,
            "zeta": self.zeta,
            "p_star": self.p_star,
            "j_min": self.j_min,
            "j0": self.j0,
            "I0": self.I0,
            "weights": list(self.weights),
            "tau": list(self.tau),
            "tau_init": self.tau_init,
            "C_init": self.C_init,
            "C_init_log": self.C_init_log,
            "Q": self.Q,
            "horizon": self.horizon,
            "overrides": dict(self.overrides),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "BlockTable":
        data = {k: v for k, v in data.items() if k != "schema"}
        data["weights"] = tuple(data["weights"])
        data["tau"] = tuple(data["tau"])
        return cls(**data)

    def to_csv(self) -> str:
        buf = io.StringIO()
        out = csv.writer(buf, lineterminator="\n")
        out.writerow(["i", "lower", "upper", "W_i", "tau_i"])
        for i in range(1, self.max_block + 1):
            tau_i = self.tau[i] if i < len(self.tau) else ""
            out.writerow([i, self.lower(i), self.upper(i), self.weights[i - 1], tau_i])
        return buf.getvalue()


def _tau_list(kappa: int, I0: int, ceilw: list[int]) -> list[int]:
    """tau_i = kappa * sum_{k=1}^{I0+i} (I0+i-k+1) ceil(W_k) for every i the weights allow."""
    out = [0]
    for i in range(1, len(ceilw) - I0 + 1):
        m = I0 + i
        out.append(kappa * sum((m - k + 1) * ceilw[k - 1] for k in range(1, m + 1)))
    return out


def _i0_lower_bound(zeta: float, kappa: int) -> int:
    """Smallest I with I >= log(4/c)/c and exp(I c) >= 4 I, where c = zeta(kappa-1)/(16 kappa^2)."""
    c = zeta * (kappa - 1) / (16 * kappa**2)
    if c <= 0:
        raise ConstantsInfeasible("zeta must be positive to derive I0")
    i = max(1, math.ceil(math.log(4 / c) / c))
    while i * c < math.log(4 * i):
        i += 1
    return i


def build_block_table(
    seq: SendSequence,
    lam: float,
    eta: float,
    nu: float,
    overrides: Mapping[str, Any] | None = None,
    max_block: int | None = None,
    horizon: int = 10_000,
    bin_budget: int = BIN_BUDGET,
    cover_tau: int | None = None,
) -> BlockTable:
    """Build the block table; any key of ``OVERRIDE_KEYS`` in ``overrides`` replaces
    the derived value.  ``cover_tau`` extends the table until I(cover_tau) is
    tabulated.  Raises ``ConstantsInfeasible`` when derived constants
    exceed the block/bin budget."""
    overrides = dict(overrides or {})
    unknown = set(overrides) - set(OVERRIDE_KEYS)
    if unknown:
        raise ValueError(f"unknown overrides {sorted(unknown)}")
    logp = seq.log_values(horizon + 1)
    if logp[0] != 0.0:
        raise ValueError("p_0 must be 1; apply normalize_p0 first")
    kappa, p_star = suitability_constants(lam, eta, nu)
    kappa = int(overrides.get("kappa", kappa))
    if kappa < 2:
        raise ValueError("kappa must be at least 2")
    zeta = float(overrides.get("zeta", eta * lam / 24))

    below_one = np.flatnonzero(logp[1:] < 0.0)
    j_min = int(below_one[0] + 1) if below_one.size else None
    j = np.arange(horizon + 1)
    bad = np.flatnonzero(~(logp > j * math.log(nu)))
    j0 = int(bad[-1] + 1) if bad.size == 0 or bad[-1] < horizon else None

    if "I0" in overrides:
        I0 = int(overrides["I0"])
    else:
        I0 = _derive_i0(logp, lam, eta, nu, kappa, zeta, j_min, bin_budget)

    weights: list = []
    ceilw: list[int] = []

    def add_block() -> None:
        i = len(weights) + 1
        if i > BLOCK_BUDGET:
            raise ConstantsInfeasible(f"more than {BLOCK_BUDGET} blocks requested")
        w = block_weight(seq, block_lower(kappa, i), block_upper(kappa, i), bin_budget)
        weights.append(w)
        ceilw.append(_ceil_weight(w))

    while len(weights) < max(I0 + 1, max_block or 0):
        add_block()
    Q = max(ceilw[:I0]) if I0 >= 1 else 0

    tau_init: int | None
    if "tau_init" in overrides:
        tau_init = int(overrides["tau_init"])
    else:
        floor = max(1e7 / lam**2, 20.0, (2 * kappa / (1 - nu)) ** 4)
        target = max(I0 + 3, 2 * I0 * (2 * Q + 1))
        if target > BLOCK_BUDGET:
            raise ConstantsInfeasible(f"tau_init needs I(tau_init) >= {target}, over {BLOCK_BUDGET} blocks")
        # I(tau) >= target iff tau >= tau_{target-I0-1}.
        while len(weights) < target - 1:
            add_block()
        tau_needed = _tau_list(kappa, I0, ceilw)[target - I0 - 1]
        tau_init = max(math.ceil(floor), tau_needed)
    # Make I(tau) and bins(tau) answerable up to tau_init and cover_tau.
    reach = max(tau_init or 0, cover_tau or 0)
    while _tau_list(kappa, I0, ceilw)[-1] <= reach:
        add_block()
    tau = _tau_list(kappa, I0, ceilw)

    C_init: int | None = None
    C_log: float | None = None
    if "C_init" in overrides:
        C_init = int(overrides["C_init"])
        C_log = math.log(C_init) if C_init > 0 else -math.inf
    elif j_min is not None and tau_init is not None:
        C_init, C_log = _c_init(seq, zeta, I0, kappa, j_min, tau_init, tau)

    return BlockTable(
        lam=lam,
        eta=eta,
        nu=nu,
        kappa=kappa,
        zeta=zeta,
        p_star=p_star,
        j_min=j_min,
        j0=j0,
        I0=I0,
        weights=tuple(weights),
        tau=tuple(tau),
        tau_init=tau_init,
        C_init=C_init,
        C_init_log=C_log,
        Q=Q,
        horizon=horizon,
        overrides=overrides,
    )


def _derive_i0(logp, lam, eta, nu, kappa, zeta, j_min, bin_budget) -> int:
    if j_min is None:
        raise ConstantsInfeasible("no bin with p_j < 1 on the prefix, so j_min is undefined")
    suit = _suitable_from_logs(logp, lam, eta, nu)
    if "n0" not in suit:
        raise ConstantsInfeasible("sequence is not suitable on the checked prefix")
    i = max(j_min, _i0_lower_bound(zeta, kappa), 1)
    while i <= BLOCK_BUDGET and (zeta * block_size(kappa, i) < 4 or block_lower(kappa, i) < suit["n0"]):
        i += 1
    if i > BLOCK_BUDGET or block_upper(kappa, i + 1) > bin_budget:
        raise ConstantsInfeasible(
            f"I0 = {i} needs blocks up to u({i + 1}) = kappa^{i}, over the bin budget {bin_budget}"
        )
    return i


def _c_init(seq, zeta, I0, kappa, j_min, tau_init, tau) -> tuple[int | None, float]:
    p = math.exp(seq.log_p(j_min))
    bins_size = block_size(kappa, _lookup(tau, I0, tau_init) - 1)
    log_q = tau_init * math.log1p(-p)  # log (1-p)^tau_init
    logs = [
        math.log(zeta * block_size(kappa, I0) / p),
        math.log(12 * math.log(100 * tau_init)) - log_q,
        math.log(2 * zeta * bins_size / p) - log_q,
    ]
    top = max(logs)
    if top < 700:
        terms = [
            zeta * block_size(kappa, I0) / p,
            12 * math.log(100 * tau_init) / math.exp(log_q),
            2 * zeta * bins_size / (p * math.exp(log_q)),
        ]
        return math.ceil(max(terms)), top
    return None, top


def _lookup(tau: tuple | list, I0: int, t: int) -> int:
    if t < 0:
        raise ValueError("tau must be nonnegative")
    if t >= tau[-1]:
        raise TableExhausted(f"tau={t} is beyond the last tabulated tau_i={tau[-1]}")
    return I0 + bisect.bisect_right(tau, t)


def I_of_tau(table: BlockTable, t: int) -> int:
    """I(tau): I0+1 at 0, else the I with tau_{I-I0-1} <= tau < tau_{I-I0}."""
    return _lookup(table.tau, table.I0, t)


def bins_of_tau(table: BlockTable, t: int) -> tuple[int, int]:
    """bins(tau) = B_{I(tau)-1} as an inclusive (lower, upper) bin range."""
    i = I_of_tau(table, t) - 1
    return table.lower(i), table.upper(i)


def bins_size(table: BlockTable, t: int) -> int:
    lo, hi = bins_of_tau(table, t)
    return hi - lo + 1


def bins_lower_bound(table: BlockTable, t: int) -> float:
    """log(tau) / (2 kappa^2 log(1/nu)), the guaranteed lower bound on |bins(tau)|."""
    return math.log(t) / (2 * table.kappa**2 * math.log(1 / table.nu))


def suitable_fraction(table: BlockTable, seq: SendSequence, i: int) -> tuple[int, float]:
    """(#{j in B_i : p_j <= p_*}, 2 eta |B_i| / 3)."""
    lo, hi = table.lower(i), table.upper(i)
    logp = seq.log_values(hi + 1)[lo:]
    return int(np.count_nonzero(logp <= math.log(table.p_star))), 2 * table.eta * (hi - lo + 1) / 3


def verify_table(table: BlockTable, seq: SendSequence) -> dict[str, bool]:
    """Re-check by substitution every defining condition of the constants that
    were derived rather than overridden."""
    out: dict[str, bool] = {}
    kappa, I0, zeta = table.kappa, table.I0, table.zeta
    if "I0" not in table.overrides:
        c = zeta * (kappa - 1) / (16 * kappa**2)
        logp = seq.log_values(table.horizon + 1)
        suit = _suitable_from_logs(logp, table.lam, table.eta, table.nu)
        out["I0>=j_min"] = table.j_min is not None and I0 >= table.j_min
        out["I0 suitable from lower(I0)"] = "n0" in suit and suit["n0"] <= table.lower(I0)
        out["zeta|B_I0|>=4"] = zeta * table.size(I0) >= 4
        out["I0>=log(4/c)/c"] = I0 >= math.log(4 / c) / c
        out["exp(I0 c)>=4 I0"] = math.exp(I0 * c) >= 4 * I0
    if "tau_init" not in table.overrides and table.tau_init is not None:
        t = table.tau_init
        floor = max(1e7 / table.lam**2, 20.0, (2 * kappa / (1 - table.nu)) ** 4)
        target = max(I0 + 3, 2 * I0 * (2 * table.Q + 1))
        out["tau_init>=floor"] = t >= floor
        out["I(tau_init)>=target"] = I_of_tau(table, t) >= target
        smaller_ok = t - 1 >= floor and I_of_tau(table, t - 1) >= target
        out["tau_init minimal"] = not smaller_ok
    if "C_init" not in table.overrides and table.C_init is not None:
        p = math.exp(seq.log_p(table.j_min))
        t = table.tau_init
        q = (1 - p) ** t
        m = max(
            zeta * table.size(I0) / p,
            12 * math.log(100 * t) / q,
            2 * zeta * bins_size(table, t) / (p * q),
        )
        # Past 2**53 the two float routes to the ceiling differ in the last digits.
        out["C_init formula"] = math.isclose(table.C_init, math.ceil(m), rel_tol=1e-12, abs_tol=0)
    return out
