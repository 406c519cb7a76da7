"""Command line entry point: ``backofflab <command> ...``.

Commands: simulate (backoff | jammed | two-stream), classify, blocks dump,
verify <name>, experiment fill-domination.  Outputs go to ``--out`` or to
``$BACKOFFLAB_OUT`` (default ``./runs``).  Every output file carries a schema
version and the resolved configuration, so ``simulate --config <output>``
reruns it bit for bit.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np

from .backoff import ObserverConfig, run_backoff
from .blocks import OVERRIDE_KEYS, BlockTable, ConstantsInfeasible, build_block_table
from .engine import RngStream
from .jammed import run_jammed, run_two_stream
from .sequences import SendSequence, SequenceError, classify, from_dict, normalize_p0, parse_sequence
from .unsticking import poisson_domination_experiment

CONFIG_SCHEMA = "backofflab.config/1"
OUT_ENV = "BACKOFFLAB_OUT"
PROCESSES = ("backoff", "jammed", "two-stream")

log = logging.getLogger("backofflab")


class ConfigError(ValueError):
    """A configuration that cannot be run; the message says what to change."""


@dataclass
class ExperimentConfig:
    sequence: Any = "beb"  # shorthand string or sequence dict
    lam: float = 0.5
    process: str = "backoff"
    steps: int = 10_000
    seed: int = 0
    replicas: int = 1
    stride: int = 1
    keep_counts: bool = False
    J_obs: int = 32
    eta: float = 0.5
    nu: float = 0.5
    overrides: dict = field(default_factory=dict)
    t0: int = 1
    tau_end: int | None = None
    out: str | None = None

    def seq(self) -> SendSequence:
        if isinstance(self.sequence, dict):
            return from_dict(self.sequence)
        return parse_sequence(str(self.sequence))

    def validate(self) -> "ExperimentConfig":
        if not (0 < self.lam < 1):
            raise ConfigError(f"lambda must lie in (0, 1), got {self.lam}; rates of 1 or more need no analysis")
        try:
            seq = self.seq()
        except (SequenceError, ValueError, KeyError) as exc:
            raise ConfigError(f"invalid send sequence: {exc}") from exc
        p = seq.values(64)
        if np.any(p <= 0) or np.any(p > 1):
            raise ConfigError("every p_j must lie in (0, 1]")
        if self.process not in PROCESSES:
            raise ConfigError(f"process must be one of {PROCESSES}")
        for name in ("steps", "replicas", "stride"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1")
        if self.J_obs < 0:
            raise ConfigError("J_obs must be nonnegative")
        unknown = set(self.overrides) - set(OVERRIDE_KEYS)
        if unknown:
            raise ConfigError(f"unknown table overrides {sorted(unknown)}; allowed: {OVERRIDE_KEYS}")
        return self

    def resolved(self) -> dict:
        d = asdict(self)
        d["sequence"] = self.seq().to_dict()
        d["schema"] = CONFIG_SCHEMA
        d.pop("out")
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        names = {f.name for f in fields(cls)}
        data = dict(data)
        if "lambda" in data:
            data["lam"] = data.pop("lambda")
        unknown = set(data) - names - {"schema"}
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        return cls(**{k: v for k, v in data.items() if k in names})


def load_config(path: str) -> dict:
    """A config JSON file, or a run output whose header embeds one."""
    text = Path(path).read_text(encoding="utf-8")
    try:
        first = json.loads(text.splitlines()[0])
    except (json.JSONDecodeError, IndexError):
        first = None
    if isinstance(first, dict) and "header" in first:
        return first["header"]["config"]
    data = json.loads(text)
    return data.get("config", data)


def out_dir(cfg_out: str | None) -> Path:
    path = Path(cfg_out or os.environ.get(OUT_ENV, "runs"))
    path.mkdir(parents=True, exist_ok=True)
    return path


def _json_default(o):
    if isinstance(o, np.bool_):
        return bool(o)
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


def dumps(obj) -> str:
    return json.dumps(obj, default=_json_default, sort_keys=True)


# simulate ------------------------------------------------------------------------------


def simulate(cfg: ExperimentConfig) -> list[Path]:
    seq, lam = cfg.seq(), cfg.lam
    if cfg.process != "backoff":
        seq, lam = normalize_p0(seq, lam)
    out = out_dir(cfg.out)
    stem = f"{cfg.process}-seed{cfg.seed}"
    stream = RngStream(cfg.seed, (cfg.process,))
    resolved = cfg.resolved()
    if cfg.process == "backoff":
        run = run_backoff(seq, lam, cfg.steps, observer=ObserverConfig(cfg.stride, cfg.keep_counts), stream=stream)
        run.header["config"] = resolved
        jsonl, csv_path = out / f"{stem}.jsonl", out / f"{stem}.csv"
        run.write_jsonl(jsonl)
        run.write_summary_csv(csv_path)
        return [jsonl, csv_path]
    if cfg.process == "jammed":
        run = run_jammed(seq, lam, cfg.steps, stream, J_obs=cfg.J_obs, record_unstuck=True)
        header = dict(run.header, config=resolved)
        records = (
            {
                "t": ev.t,
                "births": ev.births,
                "stuck": run.stuck[ev.t].tolist(),
                "unstuck": run.unstuck[ev.t].tolist(),
                "unstick_bin": ev.unstick_bin,
            }
            for ev in run.events
            if ev.t % cfg.stride == 0
        )
        summary = {"steps": cfg.steps, "unsticks": run.final.unsticks, "births": run.final.births, "overflow": run.final.overflow}
    else:
        run = run_two_stream(seq, lam, cfg.steps, stream, J_obs=cfg.J_obs)
        header = dict(run.header, config=resolved)
        records = (
            {"t": t, "stuck_A": run.stuck_A[t].tolist(), "stuck_B": run.stuck_B[t].tolist(), "unsticks": run.unsticks[t]}
            for t in range(1, run.steps + 1)
            if t % cfg.stride == 0
        )
        final = run.final
        summary = {"steps": cfg.steps, "unsticks": run.unsticks[-1], "births": final.A.births + final.B.births}
    jsonl, csv_path = out / f"{stem}.jsonl", out / f"{stem}.csv"
    with open(jsonl, "w", encoding="utf-8") as fh:
        fh.write(dumps({"header": header}) + "\n")
        for rec in records:
            fh.write(dumps(rec) + "\n")
    row = {"schema": header["schema"], "seed": cfg.seed, **summary}
    csv_path.write_text(",".join(row) + "\n" + ",".join(str(v) for v in row.values()) + "\n", encoding="utf-8")
    return [jsonl, csv_path]


# commands ----------------------------------------------------------------------------------


def _config_from_args(args) -> ExperimentConfig:
    base = load_config(args.config) if getattr(args, "config", None) else {}
    cfg = ExperimentConfig.from_dict(base)
    for name in ("sequence", "lam", "steps", "seed", "stride", "J_obs", "out", "process"):
        value = getattr(args, name, None)
        if value is not None:
            setattr(cfg, name, value)
    if getattr(args, "keep_counts", False):
        cfg.keep_counts = True
    return cfg.validate()


def cmd_simulate(args) -> int:
    cfg = _config_from_args(args)
    for path in simulate(cfg):
        print(path)
    return 0


def cmd_classify(args) -> int:
    cfg = ExperimentConfig(sequence=args.sequence, lam=args.lam).validate()
    verdict = classify(cfg.seq(), cfg.lam, horizon=args.horizon)
    print(dumps({"schema": "backofflab.verdict/1", "lambda": cfg.lam, "sequence": cfg.seq().to_dict(), **verdict.to_dict()}))
    return 0


def _parse_overrides(items) -> dict:
    out = {}
    for item in items or ():
        key, _, value = item.partition("=")
        if key not in OVERRIDE_KEYS or not value:
            raise ConfigError(f"override must be KEY=VALUE with KEY in {OVERRIDE_KEYS}, got {item!r}")
        out[key] = float(value) if key == "zeta" else int(value)
    return out


def build_table_for(cfg: ExperimentConfig, cover_tau: int | None = None, max_block: int | None = None) -> BlockTable:
    seq, lam = normalize_p0(cfg.seq(), cfg.lam)
    try:
        return build_block_table(seq, lam, cfg.eta, cfg.nu, overrides=cfg.overrides, cover_tau=cover_tau, max_block=max_block)
    except ConstantsInfeasible as exc:
        raise ConfigError(f"{exc}; pass scaled-down overrides such as I0=..., tau_init=..., C_init=...") from exc


def cmd_blocks(args) -> int:
    cfg = ExperimentConfig(sequence=args.sequence, lam=args.lam, eta=args.eta, nu=args.nu, overrides=_parse_overrides(args.override))
    table = build_table_for(cfg.validate(), cover_tau=args.cover_tau, max_block=args.max_block)
    print(table.to_csv() if args.format == "csv" else table.to_json(), end="" if args.format == "csv" else "\n")
    return 0


def cmd_verify(args) -> int:
    from .verifiers import VERIFIERS

    names = list(VERIFIERS) if args.name == "all" else [args.name]
    kwargs = {}
    if args.tau_end is not None:
        kwargs["tau_end_max"] = args.tau_end
    if args.max_bin is not None:
        kwargs["max_bin"] = args.max_bin
    failed = False
    reports = []
    for name in names:
        report = VERIFIERS[name](**kwargs) if name == "time-reversal" else VERIFIERS[name]()
        print(report.line())
        reports.append(report.to_dict())
        failed |= not report.passed
    if args.out:
        path = out_dir(args.out) / f"verify-{args.name}.json"
        path.write_text(dumps(reports), encoding="utf-8")
        print(path)
    return 1 if failed else 0


def cmd_experiment(args) -> int:
    data = load_config(args.config) if args.config else {}
    fill_keys = ("t0", "tau_end", "replicas", "seed", "sequence", "lam", "lambda", "eta", "nu", "overrides", "out")
    cfg = ExperimentConfig.from_dict({k: v for k, v in data.items() if k in fill_keys})
    if cfg.tau_end is None:
        raise ConfigError("fill-domination needs tau_end (the table horizon)")
    if args.replicas is not None:
        cfg.replicas = args.replicas
    cfg.validate()
    seq, lam = normalize_p0(cfg.seq(), cfg.lam)
    table = build_table_for(cfg, cover_tau=cfg.tau_end + 1)
    report = poisson_domination_experiment(seq, lam, table, cfg.t0, cfg.tau_end, cfg.replicas, RngStream(cfg.seed, ("fill-domination",)))
    result = report.to_dict()
    result["config"]["experiment"] = cfg.resolved()
    path = out_dir(cfg.out or args.out) / f"fill-domination-seed{cfg.seed}.json"
    path.write_text(dumps(result), encoding="utf-8")
    for row in result["rows"]:
        verdict = "PASS" if row["mean_pass"] else "FAIL"
        print(f"{verdict} j={row['j']}: mean {row['mean']:.4f} vs lambda/(4 p_j) = {row['target']:.4f} (se {row['sigma']:.4f})")
    print(path)
    return 0 if report.passed else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="backofflab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run a process and write JSONL + CSV")
    sim.add_argument("process", choices=PROCESSES)
    sim.add_argument("--seq", dest="sequence")
    sim.add_argument("--lambda", dest="lam", type=float)
    sim.add_argument("--steps", type=int)
    sim.add_argument("--seed", type=int)
    sim.add_argument("--stride", type=int)
    sim.add_argument("--J-obs", dest="J_obs", type=int)
    sim.add_argument("--keep-counts", action="store_true")
    sim.add_argument("--config", help="config JSON or a previous run's JSONL")
    sim.add_argument("--out")
    sim.set_defaults(func=cmd_simulate)

    cl = sub.add_parser("classify", help="classify a send sequence")
    cl.add_argument("--seq", dest="sequence", required=True)
    cl.add_argument("--lambda", dest="lam", type=float, required=True)
    cl.add_argument("--horizon", type=int, default=10_000)
    cl.set_defaults(func=cmd_classify)

    bl = sub.add_parser("blocks", help="block table tools")
    bl.add_argument("action", choices=("dump",))
    bl.add_argument("--seq", dest="sequence", required=True)
    bl.add_argument("--lambda", dest="lam", type=float, required=True)
    bl.add_argument("--eta", type=float, default=0.5)
    bl.add_argument("--nu", type=float, default=0.5)
    bl.add_argument("--override", action="append", metavar="KEY=VALUE")
    bl.add_argument("--cover-tau", type=int)
    bl.add_argument("--max-block", type=int)
    bl.add_argument("--format", choices=("csv", "json"), default="csv")
    bl.set_defaults(func=cmd_blocks)

    from .verifiers import VERIFIERS

    ve = sub.add_parser("verify", help="run a named verification")
    ve.add_argument("name", choices=sorted(VERIFIERS) + ["all"])
    ve.add_argument("--tau-end", type=int)
    ve.add_argument("--max-bin", type=int)
    ve.add_argument("--out")
    ve.set_defaults(func=cmd_verify)

    ex = sub.add_parser("experiment", help="run an experiment suite")
    ex.add_argument("suite", choices=("fill-domination",))
    ex.add_argument("--config")
    ex.add_argument("--replicas", type=int)
    ex.add_argument("--out")
    ex.set_defaults(func=cmd_experiment)
    return parser


def run_command(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
