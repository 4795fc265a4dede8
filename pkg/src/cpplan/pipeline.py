"""Scenario parsing and the mask -> dispatch -> comm -> overlap -> simulate chain."""
from __future__ import annotations

import hashlib
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import yaml

from .comm import TransferTable, build_transfer_tables, compute_kv_demands, redundancy_report
from .dispatch import (
    DISPATCHERS,
    DispatchPlan,
    check_divisibility,
    default_chunk_size,
    shard_into_chunks,
)
from .errors import ConfigError
from .mask import AttnMask, build_named_mask, mask_from_dict, mask_to_dict
from .metrics import WorkloadSpec, balance_summary
from .overlap import CostModel, OverlapParams, SolverResult, rank_work, solve_stages
from .sim import SCHEDULES, SimReport, simulate_cso, simulate_magi, simulate_ring, simulate_ulysses

__all__ = [
    "SCHEMA_VERSION",
    "Scenario",
    "PlanArtifacts",
    "load_config",
    "config_hash",
    "parse_scenario",
    "build_plan",
    "simulate",
    "sweep_points",
    "run_sweep",
    "document_lengths",
]

SCHEMA_VERSION = 1

SCENARIO_KEYS = {
    "name", "seed", "mask", "cp_size", "tp_size", "dp_size", "dispatch", "cost_model",
    "overlap", "workload", "schedules", "schedule", "passes", "ring", "cso", "sweep",
    "packing", "stream", "format",
}
SWEEP_KEYS = {"cp_sizes", "per_rank_seqlen", "pattern", "doc_length", "docs", "block", "window", "chunks_per_rank"}


def load_config(path: str | Path) -> dict[str, Any]:
    """Read a YAML (or JSON) scenario file; relative file references resolve beside it."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" at line {mark.line + 1}, column {mark.column + 1}" if mark else ""
        raise ConfigError(f"{path}: parse error{where}") from None
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    cm = data.get("cost_model")
    if isinstance(cm, str):
        ref = (path.parent / cm).resolve()
        if not ref.exists():
            raise ConfigError(f"cost_model: referenced file {cm} does not exist")
        data["cost_model"] = load_config(ref)
    return data


def config_hash(config: Mapping[str, Any]) -> str:
    canon = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


@dataclass
class Scenario:
    raw: dict[str, Any]
    name: str = "scenario"
    seed: int = 0
    mask_spec: dict[str, Any] | None = None
    cp_size: int = 1
    tp_size: int = 1
    dp_size: int = 1
    chunk_size: int | None = None
    algorithm: str = "greedy"
    model: CostModel = field(default_factory=CostModel)
    overlap: OverlapParams = field(default_factory=OverlapParams)
    workload: WorkloadSpec = field(default_factory=WorkloadSpec)
    schedules: tuple[str, ...] = ("magi",)
    passes: tuple[str, ...] = ("fwd", "bwd")
    ring_overlap: bool = True
    ring_dispatch: str = "zigzag"
    cso_chunks: int = 5
    sweep: dict[str, Any] | None = None

    @property
    def hash(self) -> str:
        return config_hash(self.raw)

    def mask(self) -> AttnMask:
        if self.mask_spec is None:
            raise ConfigError("scenario has no 'mask' section")
        return mask_from_dict(self.mask_spec)


def _as_tuple(value: Any) -> tuple[str, ...]:
    return tuple(str(v) for v in (value if isinstance(value, (list, tuple)) else [value]))


def parse_scenario(config: Mapping[str, Any], seed: int | None = None) -> Scenario:
    """Validate a config mapping; raises ConfigError before any planning work."""
    raw = dict(config)
    unknown = set(raw) - SCENARIO_KEYS
    if unknown:
        raise ConfigError(f"unknown scenario keys: {sorted(unknown)}")
    sc = Scenario(raw=raw)
    sc.name = str(raw.get("name", sc.name))
    sc.seed = int(seed if seed is not None else raw.get("seed", 0))
    if "mask" in raw:
        if not isinstance(raw["mask"], dict):
            raise ConfigError("mask: expected a mapping")
        sc.mask_spec = dict(raw["mask"])
    for key in ("cp_size", "tp_size", "dp_size"):
        v = int(raw.get(key, 1))
        if v < 1:
            raise ConfigError(f"{key} must be >= 1")
        setattr(sc, key, v)
    disp = dict(raw.get("dispatch", {}))
    if disp.get("chunk_size") is not None:
        sc.chunk_size = int(disp["chunk_size"])
    sc.algorithm = str(disp.get("algorithm", sc.algorithm))
    if sc.algorithm not in DISPATCHERS:
        raise ConfigError(f"dispatch.algorithm {sc.algorithm!r} unknown; expected one of {sorted(DISPATCHERS)}")
    sc.model = CostModel.from_dict(raw.get("cost_model", {}) or {})
    sc.overlap = OverlapParams.from_dict({"seed": sc.seed, **dict(raw.get("overlap", {}))})
    sc.workload = WorkloadSpec.from_dict(raw.get("workload", {}) or {})
    if "schedules" in raw or "schedule" in raw:
        sc.schedules = _as_tuple(raw.get("schedules", raw.get("schedule")))
    bad = [s for s in sc.schedules if s not in SCHEDULES]
    if bad:
        raise ConfigError(f"unknown schedule {bad[0]!r}; valid schedules: {', '.join(SCHEDULES)}")
    if "passes" in raw:
        sc.passes = _as_tuple(raw["passes"])
    if any(p not in ("fwd", "bwd") for p in sc.passes):
        raise ConfigError("passes must be drawn from fwd, bwd")
    ring = dict(raw.get("ring", {}))
    sc.ring_overlap = bool(ring.get("overlap", True))
    sc.ring_dispatch = str(ring.get("dispatch", sc.ring_dispatch))
    if sc.ring_dispatch not in DISPATCHERS:
        raise ConfigError(f"ring.dispatch {sc.ring_dispatch!r} unknown")
    sc.cso_chunks = int(dict(raw.get("cso", {})).get("num_chunks", 5))
    if sc.cso_chunks < 2:
        raise ConfigError("cso.num_chunks must be >= 2")
    if "sweep" in raw:
        sw = dict(raw["sweep"])
        unknown = set(sw) - SWEEP_KEYS
        if unknown:
            raise ConfigError(f"unknown sweep keys: {sorted(unknown)}")
        if "cp_sizes" not in sw or "per_rank_seqlen" not in sw:
            raise ConfigError("sweep needs cp_sizes and per_rank_seqlen")
        sc.sweep = sw
    return sc


# -- planning -------------------------------------------------------------------


@dataclass
class PlanArtifacts:
    mask: AttnMask
    plan: DispatchPlan
    cast: TransferTable
    reduce: TransferTable
    solved: SolverResult

    def summary(self, scenario: Scenario) -> dict[str, Any]:
        red = redundancy_report(self.mask, self.plan)
        per_token = scenario.workload.kv_bytes_per_token
        return {
            "schema_version": SCHEMA_VERSION,
            "scenario": scenario.name,
            "config_hash": scenario.hash,
            "seed": scenario.seed,
            "seqlen": self.plan.seqlen,
            "cp_size": self.plan.cp_size,
            "chunk_size": self.plan.chunk_size,
            "algorithm": self.plan.algorithm,
            "balance": balance_summary(self.plan).to_dict(),
            "bucket_workloads": list(self.plan.bucket_workloads),
            "redundancy": red.to_dict(),
            "group_cast_token_transfers": self.cast.total_volume,
            "group_cast_bytes": self.cast.total_volume * per_token,
            "num_stages_fwd": self.solved.num_stages_fwd,
            "num_stages_bwd": self.solved.num_stages_bwd,
            "est_cost_fwd": max((p.est_cost_fwd for p in self.solved.plans), default=0),
            "est_cost_bwd": max((p.est_cost_bwd for p in self.solved.plans), default=0),
        }

    def files(self, scenario: Scenario) -> dict[str, dict[str, Any]]:
        meta = {"schema_version": SCHEMA_VERSION, "config_hash": scenario.hash, "seed": scenario.seed}
        per_token = scenario.workload.kv_bytes_per_token
        return {
            "plan.json": {**meta, "mask": mask_to_dict(self.mask), "dispatch": self.plan.to_dict()},
            "transfer_tables.json": {
                **meta,
                "group_cast": self.cast.to_dict(per_token),
                "group_reduce": self.reduce.to_dict(per_token),
            },
            "stage_plans.json": {**meta, **self.solved.to_dict()},
            "summary.json": self.summary(scenario),
        }

    @classmethod
    def from_files(cls, docs: Mapping[str, Mapping[str, Any]]) -> PlanArtifacts:
        try:
            plan_doc = docs["plan.json"]
            tables = docs["transfer_tables.json"]
            stages = docs["stage_plans.json"]
        except KeyError as exc:
            raise ConfigError(f"plan artifact {exc.args[0]} missing") from None
        return cls(
            mask=mask_from_dict(plan_doc["mask"]),
            plan=DispatchPlan.from_dict(plan_doc["dispatch"]),
            cast=TransferTable.from_dict(tables["group_cast"]),
            reduce=TransferTable.from_dict(tables["group_reduce"]),
            solved=SolverResult.from_dict(stages),
        )


def make_plan(mask: AttnMask, cp_size: int, chunk_size: int | None, algorithm: str) -> DispatchPlan:
    chunk = chunk_size or default_chunk_size(mask.seqlen_q, cp_size)
    check_divisibility(mask.seqlen_q, cp_size, chunk)
    return DISPATCHERS[algorithm](shard_into_chunks(mask, chunk), cp_size)


def plan_mask(
    mask: AttnMask,
    cp_size: int,
    chunk_size: int | None,
    algorithm: str,
    model: CostModel,
    overlap: OverlapParams,
) -> PlanArtifacts:
    plan = make_plan(mask, cp_size, chunk_size, algorithm)
    cast, reduce = build_transfer_tables(compute_kv_demands(mask, plan), plan.chunk_size, cp_size)
    works = [rank_work(mask, plan, cast, r) for r in range(cp_size)]
    return PlanArtifacts(mask, plan, cast, reduce, solve_stages(works, model, overlap))


def build_plan(scenario: Scenario) -> PlanArtifacts:
    return plan_mask(
        scenario.mask(), scenario.cp_size, scenario.chunk_size, scenario.algorithm, scenario.model, scenario.overlap
    )


# -- simulation -----------------------------------------------------------------


def _ring_plan(mask: AttnMask, scenario: Scenario, cp_size: int, chunk_size: int) -> DispatchPlan:
    algorithm = scenario.ring_dispatch
    n = mask.seqlen_q // chunk_size
    if algorithm == "zigzag" and n % (2 * cp_size):
        algorithm = "sequential"
    return DISPATCHERS[algorithm](shard_into_chunks(mask, chunk_size), cp_size)


def simulate(
    scenario: Scenario,
    artifacts: PlanArtifacts | None = None,
    point: Mapping[str, Any] | None = None,
    mask: AttnMask | None = None,
) -> list[dict[str, Any]]:
    """One record per (schedule, pass); Ulysses and CSO are forward-only."""
    if artifacts is None and "magi" in scenario.schedules:
        artifacts = build_plan(scenario)
    if artifacts is not None:
        mask = artifacts.mask
    elif mask is None:
        mask = scenario.mask()
    cp = artifacts.plan.cp_size if artifacts is not None else scenario.cp_size
    chunk = artifacts.plan.chunk_size if artifacts is not None else (
        scenario.chunk_size or default_chunk_size(mask.seqlen_q, cp)
    )
    check_divisibility(mask.seqlen_q, cp, chunk)
    meta = {
        "schema_version": SCHEMA_VERSION,
        "scenario": scenario.name,
        "config_hash": scenario.hash,
        "seed": scenario.seed,
        "seqlen": mask.seqlen_q,
        **dict(point or {}),
    }
    records = []
    ring_plan = None
    for schedule in scenario.schedules:
        reports: list[SimReport] = []
        if schedule == "magi":
            assert artifacts is not None
            for p in scenario.passes:
                reports.append(
                    simulate_magi(mask, artifacts.plan, artifacts.cast, artifacts.solved, scenario.model, scenario.workload, p)
                )
        elif schedule == "ring":
            ring_plan = ring_plan or _ring_plan(mask, scenario, cp, chunk)
            for p in scenario.passes:
                reports.append(simulate_ring(mask, ring_plan, scenario.model, scenario.workload, scenario.ring_overlap, p))
        elif schedule == "ulysses":
            reports.append(simulate_ulysses(mask, scenario.workload, scenario.model, cp))
        else:
            reports.append(simulate_cso(mask, scenario.workload, scenario.model, cp, scenario.cso_chunks))
        for rep in reports:
            rec = {**meta, **rep.to_dict()}
            if schedule == "ring":
                rec["comm_chunk_transfers"] = rep.comm_volume // chunk
            rec["exposed_comm_fraction"] = rep.exposed_comm / rep.makespan if rep.makespan else 0.0
            records.append(rec)
    return records


# -- sweeps ---------------------------------------------------------------------


def document_lengths(total: int, sweep: Mapping[str, Any], seed: int) -> list[int]:
    """Sample lengths summing to ``total``: fixed ``doc_length`` or lognormal ``docs``."""
    if "doc_length" in sweep:
        length = int(sweep["doc_length"])
        if length < 1:
            raise ConfigError("sweep.doc_length must be >= 1")
        lengths = [length] * (total // length)
        if total % length:
            lengths.append(total % length)
        return lengths
    docs = dict(sweep.get("docs", {}))
    if not docs:
        return [total]
    rng = np.random.default_rng(int(docs.get("seed", seed)))
    median, sigma = float(docs.get("median", 4096)), float(docs.get("sigma", 1.0))
    lengths: list[int] = []
    left = total
    while left > 0:
        n = int(min(left, max(1, round(math.exp(rng.normal(math.log(median), sigma))))))
        lengths.append(n)
        left -= n
    return lengths


def sweep_points(scenario: Scenario) -> list[dict[str, Any]]:
    sw = scenario.sweep or {}
    per_rank = int(sw["per_rank_seqlen"])
    points = []
    for cp in sw["cp_sizes"]:
        cp = int(cp)
        if cp < 1:
            raise ConfigError("sweep cp_sizes must be >= 1")
        points.append({"cp_size": cp, "seqlen": per_rank * cp})
    return points


def _sweep_mask(scenario: Scenario, seqlen: int) -> AttnMask:
    sw = scenario.sweep or {}
    pattern = str(sw.get("pattern", (scenario.mask_spec or {}).get("pattern", "full")))
    params: dict[str, Any] = {"seqlen": seqlen}
    if pattern.startswith("varlen"):
        params = {"lengths": document_lengths(seqlen, sw, scenario.seed)}
    for key in ("block", "window"):
        if key in sw:
            params[key] = sw[key]
    return build_named_mask(pattern, params)


def run_point(scenario: Scenario, point: Mapping[str, Any]) -> list[dict[str, Any]]:
    cp, seqlen = int(point["cp_size"]), int(point["seqlen"])
    mask = _sweep_mask(scenario, seqlen)
    per_rank = seqlen // cp
    chunks_per_rank = int((scenario.sweep or {}).get("chunks_per_rank", 16))
    chunk = scenario.chunk_size or per_rank // chunks_per_rank
    artifacts = None
    if "magi" in scenario.schedules:
        artifacts = plan_mask(mask, cp, chunk, scenario.algorithm, scenario.model, scenario.overlap)
    sub = Scenario(**{**scenario.__dict__, "cp_size": cp, "chunk_size": chunk})
    return simulate(sub, artifacts, mask=mask)


def run_sweep(scenario: Scenario, jobs: int = 1) -> list[dict[str, Any]]:
    """Sweep points in order; with ``jobs > 1`` points run in worker processes."""
    points = sweep_points(scenario)
    if jobs > 1 and len(points) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            chunks = list(pool.map(run_point, [scenario] * len(points), points))
    else:
        chunks = [run_point(scenario, p) for p in points]
    return [rec for chunk in chunks for rec in chunk]
