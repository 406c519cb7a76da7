"""The queue-free backoff process.

Each step: Poisson(lambda) newborns join bin 0; every ball in bin j sends with
probability p_j; a lone sender escapes, otherwise every sender moves up one bin.
Balls in a bin are exchangeable, so the state is a vector of bin counts and the
sender counts are binomial draws.

Randomness for step t comes from ``stream.at(t, "main")``: first the newborn
count, then one vectorised binomial over bins 1, 2, ... in order.  The
externally jammed process draws its stuck-ball senders the same way, which makes
the two processes agree ball for ball when they share a stream.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .engine import STREAM_DERIVATION, RngStream
from .sequences import SendSequence

RUNLOG_SCHEMA = "backofflab.runlog/1"


@dataclass
class BackoffState:
    """Bin counts (index = bin) plus cumulative bookkeeping."""

    t: int = 0
    counts: np.ndarray = field(default_factory=lambda: np.zeros(1, dtype=np.int64))
    escapes: int = 0
    births: int = 0
    empty_steps: int = 0
    last_empty: int | None = 0

    @property
    def backlog(self) -> int:
        return int(self.counts.sum())

    def copy(self) -> "BackoffState":
        return BackoffState(self.t, self.counts.copy(), self.escapes, self.births, self.empty_steps, self.last_empty)


@dataclass(frozen=True)
class StepEvents:
    t: int
    births: int
    senders: np.ndarray  # per bin, index 0 counts bin-0 senders including newborns
    escaped: bool
    escape_bin: int | None

    @property
    def total_senders(self) -> int:
        return int(self.senders.sum())


def _extend(a: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros(n, dtype=a.dtype)
    out[: len(a)] = a
    return out


def probabilities(seq: SendSequence, n: int) -> np.ndarray:
    return seq.values(max(n, 1))


def noise(counts: np.ndarray, seq: SendSequence | np.ndarray, lam: float) -> float:
    """lambda * p_0 + sum_j p_j x_j; with p_0 = 1 and x_0 = 0 this is lambda + sum_{j>=1} p_j x_j."""
    counts = np.asarray(counts)
    p = seq if isinstance(seq, np.ndarray) else seq.values(len(counts))
    return float(lam * p[0] + np.dot(counts, p[: len(counts)]))


def apply_backoff_step(state: BackoffState, births: int, senders: np.ndarray) -> tuple[BackoffState, StepEvents]:
    """Apply one step given the draws.  ``senders[0]`` counts bin-0 senders out of
    the old bin-0 balls plus the newborns; ``senders[j]`` for j >= 1 counts
    senders in bin j.  Mutates and returns ``state``."""
    senders = np.asarray(senders, dtype=np.int64)
    counts = state.counts
    if len(senders) != len(counts):
        n = max(len(counts), len(senders))
        counts = _extend(counts, n)
        senders = _extend(senders, n)
    t = state.t + 1
    counts[0] += births
    total = int(senders.sum())
    escape_bin = None
    if total == 1:
        escape_bin = int(np.flatnonzero(senders)[0])
        counts[escape_bin] -= 1
        state.escapes += 1
    elif total >= 2:
        if senders[-1] > 0:
            counts = _extend(counts, len(counts) + 1)
            senders = _extend(senders, len(senders) + 1)
        counts -= senders
        counts[1:] += senders[:-1]
    if counts.min() < 0:
        raise ValueError("more senders than balls")
    state.counts = counts
    state.t = t
    state.births += int(births)
    if not counts.any():
        state.empty_steps += 1
        state.last_empty = t
    return state, StepEvents(t, int(births), senders, escape_bin is not None, escape_bin)


def draw_backoff_step(state: BackoffState, lam: float, p: np.ndarray, stream: RngStream) -> tuple[int, np.ndarray]:
    """Draw the newborn count and per-bin sender counts for step ``state.t + 1``."""
    t = state.t + 1
    counts = state.counts
    g = stream.at(t, "main")
    births = int(g.poisson(lam)) if lam > 0 else 0
    senders = np.empty(len(counts), dtype=np.int64)
    senders[1:] = g.binomial(counts[1:], p[1 : len(counts)])
    if p[0] == 1.0:
        senders[0] = counts[0] + births
    else:
        senders[0] = stream.at(t, "bin0").binomial(counts[0] + births, p[0])
    return births, senders


def step_backoff(
    state: BackoffState, seq: SendSequence, lam: float, stream: RngStream, p: np.ndarray | None = None
) -> tuple[BackoffState, StepEvents]:
    """One step of the process (mutates ``state``).  ``p`` may carry precomputed
    probabilities covering at least ``len(state.counts) + 1`` bins."""
    if p is None or len(p) < len(state.counts) + 1:
        p = probabilities(seq, 2 * len(state.counts) + 8)
    births, senders = draw_backoff_step(state, lam, p, stream)
    return apply_backoff_step(state, births, senders)


@dataclass
class ObserverConfig:
    stride: int = 1
    keep_counts: bool = False

    def __post_init__(self) -> None:
        if self.stride < 1:
            raise ValueError("stride must be at least 1")


@dataclass
class RunLog:
    """Per-step observables in columns, plus the header needed to reproduce them."""

    header: dict
    t: list[int] = field(default_factory=list)
    backlog: list[int] = field(default_factory=list)
    noise: list[float] = field(default_factory=list)
    senders: list[int] = field(default_factory=list)
    escaped: list[bool] = field(default_factory=list)
    empty: list[bool] = field(default_factory=list)
    counts: list[np.ndarray] = field(default_factory=list)
    final: BackoffState | None = None

    def append(self, state: BackoffState, ev: StepEvents, f: float, keep_counts: bool) -> None:
        b = state.backlog
        self.t.append(ev.t)
        self.backlog.append(b)
        self.noise.append(f)
        self.senders.append(ev.total_senders)
        self.escaped.append(ev.escaped)
        self.empty.append(b == 0)
        if keep_counts:
            self.counts.append(state.counts.copy())

    def __len__(self) -> int:
        return len(self.t)

    def records(self) -> Iterator[dict]:
        for i in range(len(self.t)):
            rec = {
                "t": self.t[i],
                "backlog": self.backlog[i],
                "noise": self.noise[i],
                "senders": self.senders[i],
                "escaped": self.escaped[i],
                "empty": self.empty[i],
            }
            if self.counts:
                rec["counts"] = self.counts[i].tolist()
            yield rec

    def summary(self) -> dict:
        final = self.final
        steps = final.t if final else (self.t[-1] if self.t else 0)
        out = {
            "steps": steps,
            "births": final.births if final else None,
            "escapes": final.escapes if final else int(sum(self.escaped)),
            "success_rate": (final.escapes / steps) if final and steps else 0.0,
            "final_backlog": final.backlog if final else (self.backlog[-1] if self.backlog else 0),
            "empty_steps": final.empty_steps if final else int(sum(self.empty)),
            "last_empty": final.last_empty if final else None,
        }
        if len(self.t) >= 2:
            slope = np.polyfit(np.asarray(self.t, dtype=float), np.asarray(self.backlog, dtype=float), 1)[0]
            out["backlog_drift_per_step"] = float(slope)
        return out

    def write_jsonl(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps({"header": self.header}) + "\n")
            for rec in self.records():
                fh.write(json.dumps(rec) + "\n")

    def write_summary_csv(self, path: str | Path) -> None:
        summ = {"schema": RUNLOG_SCHEMA, "seed": self.header.get("seed"), **self.summary()}
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=list(summ))
            w.writeheader()
            w.writerow(summ)

    @classmethod
    def read_jsonl(cls, path: str | Path) -> "RunLog":
        with open(path, encoding="utf-8") as fh:
            log = cls(json.loads(fh.readline())["header"])
            for line in fh:
                rec = json.loads(line)
                log.t.append(rec["t"])
                log.backlog.append(rec["backlog"])
                log.noise.append(rec["noise"])
                log.senders.append(rec["senders"])
                log.escaped.append(rec["escaped"])
                log.empty.append(rec["empty"])
                if "counts" in rec:
                    log.counts.append(np.asarray(rec["counts"], dtype=np.int64))
        return log


def run_header(kind: str, seq: SendSequence, lam: float, steps: int, stream: RngStream, **extra) -> dict:
    return {
        "schema": RUNLOG_SCHEMA,
        "process": kind,
        "sequence": seq.to_dict(),
        "lambda": lam,
        "steps": steps,
        "seed": stream.seed,
        "stream_path": list(stream.path),
        "rng": STREAM_DERIVATION,
        **extra,
    }


def run_backoff(
    seq: SendSequence,
    lam: float,
    steps: int,
    seed: int | None = None,
    observer: ObserverConfig | None = None,
    stream: RngStream | None = None,
) -> RunLog:
    """Run ``steps`` steps from the empty state.  Either ``seed`` or ``stream``."""
    if steps < 1:
        raise ValueError("steps must be at least 1")
    if stream is None:
        if seed is None:
            raise ValueError("give a seed or a stream")
        stream = RngStream(seed, ("backoff",))
    observer = observer or ObserverConfig()
    log = RunLog(run_header("backoff", seq, lam, steps, stream, stride=observer.stride))
    state = BackoffState()
    p = probabilities(seq, 64)
    for _ in range(steps):
        if len(p) < len(state.counts) + 1:
            p = probabilities(seq, 2 * len(p))
        state, ev = apply_backoff_step(state, *draw_backoff_step(state, lam, p, stream))
        if ev.t % observer.stride == 0:
            log.append(state, ev, noise(state.counts, p, lam), observer.keep_counts)
    log.final = state
    return log


@dataclass
class P0CouplingResult:
    """Bin counts of the original process and of the normalised one, per step."""

    original: list[np.ndarray]
    normalized: list[np.ndarray]


def run_p0_coupling(seq: SendSequence, lam: float, steps: int, stream: RngStream) -> P0CouplingResult:
    """Run the process with (p, lam) and its p_0-normalised version (p_0 := 1,
    rate lam * p_0) on one probability space.

    The normalised process's newborns are exactly the original process's
    newborns that send at birth, so every ball of the normalised process is a
    ball of the original one in the same bin.  Its draws come from
    ``stream.at(t, "main")`` exactly as ``run_backoff`` would make them, so the
    normalised marginal coincides with a standalone run on the same stream.
    """
    p = seq.values(64)
    p0 = float(p[0])
    shared = np.zeros(2, dtype=np.int64)  # balls present in both processes
    extra = np.zeros(2, dtype=np.int64)  # balls present only in the original
    orig_hist, norm_hist = [], []
    for t in range(1, steps + 1):
        n = max(len(shared), len(extra)) + 1
        if len(p) < n + 1:
            p = seq.values(2 * n)
        shared = np.pad(shared, (0, n - len(shared)))
        extra = np.pad(extra, (0, n - len(extra)))
        g = stream.at(t, "main")
        newborn_send = int(g.poisson(lam * p0))
        sh = np.zeros(n, dtype=np.int64)
        sh[0] = newborn_send
        sh[1:] = g.binomial(shared[1:], p[1:n])
        g2 = stream.at(t, "extra")
        newborn_quiet = int(g2.poisson(lam * (1.0 - p0))) if p0 < 1 else 0
        ex = np.zeros(n, dtype=np.int64)
        ex[0] = g2.binomial(extra[0], p0)
        ex[1:] = g2.binomial(extra[1:], p[1:n])
        tot_norm = int(sh.sum())
        tot = tot_norm + int(ex.sum())
        extra[0] += newborn_quiet
        if tot_norm == 1:
            b = int(np.flatnonzero(sh)[0])
            if b > 0:
                shared[b] -= 1
            if tot >= 2:
                extra[b + 1] += 1  # escaped the normalised process, moved on in the original
        elif tot_norm >= 2:
            shared[1:] -= sh[1:]
            shared[1:] += sh[:-1]
        if tot == 1 and tot_norm == 0:
            b = int(np.flatnonzero(ex)[0])
            extra[b] -= 1
        elif tot >= 2:
            extra -= ex
            extra[1:] += ex[:-1]
        norm_hist.append(shared.copy())
        orig_hist.append(shared + extra)
    return P0CouplingResult(orig_hist, norm_hist)
