"""``cpplan`` command line: mask, plan, simulate, pack, sweep."""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

from . import __version__
from .errors import ConfigError, ConstraintViolation, InvariantError, MaskError, PlannerError
from .mask import Counting, build_named_mask, mask_area, mask_from_dict, render_ascii
from .packing import OnlinePacker, PackingConfig, lognormal_stream, read_stream
from .pipeline import (
    SCHEMA_VERSION,
    PlanArtifacts,
    build_plan,
    load_config,
    parse_scenario,
    run_sweep,
    simulate,
    config_hash,
)
from .sim import SCHEDULES

EXIT_OK, EXIT_USAGE, EXIT_CONSTRAINT, EXIT_INVARIANT = 0, 2, 3, 4
PLAN_FILES = ("plan.json", "transfer_tables.json", "stage_plans.json", "summary.json")

log = logging.getLogger("cpplan")


# -- output -----------------------------------------------------------------------


def dumps(record: Any) -> str:
    return json.dumps(record, sort_keys=True, separators=(",", ":"))


def _flat(value: Any) -> Any:
    return dumps(value) if isinstance(value, (dict, list)) else value


def render(records: Sequence[dict[str, Any]], fmt: str, columns: Sequence[str] | None = None) -> str:
    if fmt == "json":
        return "".join(dumps(r) + "\n" for r in records)
    if fmt == "csv":
        keys = sorted({k for r in records for k in r})
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=keys, lineterminator="\n")
        w.writeheader()
        for r in records:
            w.writerow({k: _flat(v) for k, v in r.items()})
        return buf.getvalue()
    cols = list(columns or sorted({k for r in records for k in r}))
    rows = [[_text(r.get(c, "")) for c in cols] for r in records]
    widths = [max([len(c)] + [len(row[i]) for row in rows]) for i, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths)).rstrip()]
    lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip() for row in rows]
    return "\n".join(lines) + "\n"


def _text(v: Any) -> str:
    if isinstance(v, float):
        return f"{v:.4g}"
    return str(_flat(v))


def emit(args: argparse.Namespace, name: str, text: str) -> None:
    """Single writer: stdout, or ``<out>/<name>.<ext>`` when --out is given."""
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        ext = {"json": "jsonl", "csv": "csv", "text": "txt"}[args.format]
        path = out / f"{name}.{ext}"
        path.write_text(text)
        print(f"wrote {path}", file=sys.stderr)
    else:
        sys.stdout.write(text)


def _scenario(args: argparse.Namespace):
    if not args.config:
        raise ConfigError(f"{args.command} needs --config")
    return parse_scenario(load_config(args.config), args.seed)


# -- commands ---------------------------------------------------------------------


def cmd_mask(args: argparse.Namespace) -> int:
    if args.config:
        cfg = load_config(args.config)
        mask = mask_from_dict(cfg.get("mask", cfg))
        h = config_hash(cfg)
    elif args.pattern:
        params: dict[str, Any] = {}
        if args.seqlen is not None:
            params["seqlen"] = args.seqlen
        if args.lengths:
            params["lengths"] = [int(x) for x in args.lengths.split(",")]
        for key in ("block", "window"):
            if getattr(args, key) is not None:
                params[key] = getattr(args, key)
        mask = build_named_mask(args.pattern, params)
        h = config_hash({"pattern": args.pattern, "params": params})
    else:
        raise ConfigError("mask needs --config or --pattern")
    rec = {
        "schema_version": SCHEMA_VERSION,
        "config_hash": h,
        "seed": args.seed or 0,
        "seqlen_q": mask.seqlen_q,
        "seqlen_k": mask.seqlen_k,
        "num_slices": len(mask.slices),
        "union_area": mask_area(mask, Counting.UNION),
        "multiplicity_area": mask_area(mask, Counting.MULTIPLICITY),
    }
    small = max(mask.seqlen_q, mask.seqlen_k) <= 128
    if args.format == "text":
        lines = [f"{k}: {rec[k]}" for k in ("seqlen_q", "seqlen_k", "num_slices", "union_area", "multiplicity_area")]
        if small:
            lines.append(render_ascii(mask))
        emit(args, "mask", "\n".join(lines) + "\n")
    else:
        if small:
            rec["grid"] = render_ascii(mask).split("\n")
        emit(args, "mask", render([rec], args.format))
    return EXIT_OK


def cmd_plan(args: argparse.Namespace) -> int:
    sc = _scenario(args)
    art = build_plan(sc)
    out = Path(args.out or "plan_artifacts")
    out.mkdir(parents=True, exist_ok=True)
    for name, doc in art.files(sc).items():
        (out / name).write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")
    summary = art.summary(sc)
    if args.format == "text":
        red = summary["redundancy"]
        print(
            f"plan {sc.name}: seqlen {summary['seqlen']} cp {summary['cp_size']} chunk {summary['chunk_size']}\n"
            f"  max workload {summary['balance']['max_workload']} imbalance {summary['balance']['imbalance']:.4f}\n"
            f"  ring {red['sent_ring']} / needed {red['needed']} / group-cast {red['sent_group']} chunk-transfers, "
            f"redundancy ratio {red['redundancy_ratio']:.4f}\n"
            f"  stages fwd {summary['num_stages_fwd']} bwd {summary['num_stages_bwd']}, "
            f"est cost fwd {summary['est_cost_fwd']} bwd {summary['est_cost_bwd']}"
        )
    else:
        sys.stdout.write(render([summary], args.format))
    print(f"wrote {out}/", file=sys.stderr)
    return EXIT_OK


SIM_COLUMNS = (
    "schedule", "pass", "cp_size", "seqlen", "makespan", "exposed_comm", "exposed_comm_fraction", "tflops_per_gpu",
)


def cmd_simulate(args: argparse.Namespace) -> int:
    sc = _scenario(args)
    if args.schedule:
        bad = [s for s in args.schedule if s not in SCHEDULES]
        if bad:
            raise ConfigError(f"unknown schedule {bad[0]!r}; valid schedules: {', '.join(SCHEDULES)}")
        sc.schedules = tuple(args.schedule)
    artifacts = None
    if args.plan_dir:
        docs = {}
        for name in PLAN_FILES[:3]:
            path = Path(args.plan_dir) / name
            if not path.exists():
                raise ConfigError(f"plan artifact {path} not found")
            docs[name] = json.loads(path.read_text())
        artifacts = PlanArtifacts.from_files(docs)
    records = simulate(sc, artifacts)
    emit(args, "simulate", render(records, args.format, SIM_COLUMNS))
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    sc = _scenario(args)
    if sc.sweep is None:
        raise ConfigError("sweep needs a 'sweep' section in the config")
    records = run_sweep(sc, args.jobs)
    emit(args, "sweep", render(records, args.format, SIM_COLUMNS))
    return EXIT_OK


def _stream_from(args: argparse.Namespace, cfg: dict[str, Any]) -> Iterable[tuple[str, int]]:
    if args.input:
        fh = sys.stdin if args.input == "-" else open(args.input)
        return read_stream(fh)
    stream = dict(cfg.get("stream", {}))
    if not stream:
        return iter(())
    if "path" in stream:
        path = Path(stream["path"])
        if not path.is_absolute() and args.config:
            path = Path(args.config).parent / path
        if not path.exists():
            raise ConfigError(f"stream.path {stream['path']} does not exist")
        return read_stream(open(path))
    if stream.get("generator", "lognormal") != "lognormal":
        raise ConfigError(f"unknown stream generator {stream['generator']!r}")
    seed = args.seed if args.seed is not None else int(stream.get("seed", cfg.get("seed", 0)))
    return lognormal_stream(int(stream["count"]), float(stream["median"]), float(stream["sigma"]), seed)


def cmd_pack(args: argparse.Namespace) -> int:
    cfg = load_config(args.config) if args.config else {}
    pk = dict(cfg.get("packing", {}))
    for key in ("max_length", "bins_per_iteration", "pool_capacity", "dp_size"):
        if getattr(args, key, None) is not None:
            pk[key] = getattr(args, key)
    config = PackingConfig.from_dict(pk)
    packer = OnlinePacker(config)
    meta = {
        "schema_version": SCHEMA_VERSION,
        "config_hash": config_hash({"config": cfg, "packing": config.to_dict()}),
        "seed": args.seed if args.seed is not None else int(cfg.get("seed", 0)),
    }
    records: list[dict[str, Any]] = []
    for i, batch in enumerate(packer.run(_stream_from(args, cfg))):
        rec = {**meta, "record": "batch", "iteration": i, "utilization": batch.utilization, "fills": batch.fills}
        if not args.no_bins:
            rec["bins"] = [[sid for sid, _ in b] for b in batch.bins]
        records.append(rec)
    for sid, length in packer.skipped:
        records.append({**meta, "record": "skipped", "sample": sid, "length": length})
    stats = packer.stats()
    summary = {
        **meta,
        "record": "summary",
        **(stats.to_dict() if stats else {"batches": 0, "mean": 0.0, "min": 0.0, "dp_spread": 0.0}),
        "skipped": len(packer.skipped),
        "remaining": len(packer.pool),
        "capacity_violations": sum(f > config.max_length for b in packer.history for f in b.fills),
    }
    records.append(summary)
    if args.format == "text":
        lines = [f"iteration {r['iteration']}: utilization {r['utilization']:.4f}" for r in records if r["record"] == "batch"]
        lines.append(
            f"batches {summary['batches']}  mean {summary['mean']:.4f}  min {summary['min']:.4f}  "
            f"dp_spread {summary['dp_spread']:.4f}  skipped {summary['skipped']}  remaining {summary['remaining']}"
        )
        emit(args, "pack", "\n".join(lines) + "\n")
    else:
        emit(args, "pack", render(records, args.format))
    return EXIT_OK


# -- parser -----------------------------------------------------------------------


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", default=argparse.SUPPRESS, help="scenario file (YAML or JSON)")
    p.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    p.add_argument("--format", choices=("json", "csv", "text"), default=argparse.SUPPRESS)
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    p.add_argument("--jobs", type=int, default=argparse.SUPPRESS, help="worker processes for sweeps")
    return p


GLOBAL_DEFAULTS = {"config": None, "out": None, "format": "json", "seed": None, "jobs": 1}


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(
        prog="cpplan", description="Context-parallel attention planner and simulator.", parents=[common]
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("mask", parents=[common], help="mask areas and ASCII rendering")
    p.add_argument("--pattern")
    p.add_argument("--seqlen", type=int)
    p.add_argument("--lengths", help="comma-separated sample lengths")
    p.add_argument("--block", type=int)
    p.add_argument("--window", type=int)
    p.set_defaults(func=cmd_mask)

    p = sub.add_parser("plan", parents=[common], help="dispatch, transfer tables and stage plans")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("simulate", parents=[common], help="simulate schedules")
    p.add_argument("--schedule", action="append", help=f"one of {', '.join(SCHEDULES)}; repeatable")
    p.add_argument("--plan-dir", help="reuse artifacts written by 'plan'")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("pack", parents=[common], help="online sequence packing")
    p.add_argument("--input", help="line-delimited 'id length' records; '-' for stdin")
    p.add_argument("--max-length", type=int)
    p.add_argument("--bins-per-iteration", type=int)
    p.add_argument("--pool-capacity", type=int)
    p.add_argument("--dp-size", type=int)
    p.add_argument("--no-bins", action="store_true", help="omit per-bin sample ids")
    p.set_defaults(func=cmd_pack)

    p = sub.add_parser("sweep", parents=[common], help="scaling sweep over cp sizes")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for key, value in GLOBAL_DEFAULTS.items():
        if not hasattr(args, key):
            setattr(args, key, value)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s: %(message)s")
    if args.jobs < 1:
        parser.error("--jobs must be >= 1")
    handler: Callable[[argparse.Namespace], int] = args.func
    try:
        return handler(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConstraintViolation, MaskError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONSTRAINT
    except InvariantError as exc:
        print(f"internal invariant failed: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except PlannerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONSTRAINT


if __name__ == "__main__":
    sys.exit(main())
