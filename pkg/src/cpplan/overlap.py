"""Cost models and the multi-stage overlap search.

Each rank's remote KV traffic is cut into packages, the packages are grouped
into ``s`` stages, and a closed-form timeline cost is evaluated for every
``s``. The forward pipeline prefetches stage ``j + 1`` while computing stage
``j``; the backward pipeline additionally reduces stage ``j - 1``'s dKV on a
separate stream. Each rank picks its cheapest ``s``; the global stage count is
the maximum over ranks.

All times are integer cost units.
"""
from __future__ import annotations

import math
import random
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np

from .comm import TransferTable
from .dispatch import DispatchPlan
from .errors import ConfigError
from .mask import AttnMask, Counting, TokenRange, region_area, restrict_rows

__all__ = [
    "Affine",
    "CostModel",
    "StageCosts",
    "Package",
    "StagePlan",
    "OverlapParams",
    "SolverResult",
    "RankWork",
    "partition_packages",
    "split_into_packages",
    "assign_stages",
    "estimate_fwd_cost",
    "estimate_bwd_cost",
    "rank_work",
    "build_stage_costs",
    "package_pairs",
    "search_rank",
    "solve_stages",
]


@dataclass(frozen=True)
class Affine:
    """``cost(x) = ceil(intercept + slope * x)`` for ``x > 0``; zero work is free."""

    intercept: float = 0.0
    slope: float = 0.0

    def __post_init__(self) -> None:
        if self.intercept < 0 or self.slope < 0:
            raise ConfigError(f"cost coefficients must be non-negative, got {self}")

    def __call__(self, work: int) -> int:
        if work <= 0:
            return 0
        # rounding first keeps 0.1 * 30 from landing on 4
        return math.ceil(round(self.intercept + self.slope * work, 9))

    def scaled(self, factor: float) -> Affine:
        return Affine(self.intercept * factor, self.slope * factor)

    @classmethod
    def fit(cls, samples: Sequence[tuple[float, float]]) -> Affine:
        """Least-squares fit to ``(work, time)`` samples, clamped to non-negative."""
        if len(samples) < 2:
            raise ConfigError("need at least two samples to fit an affine cost")
        x = np.array([s[0] for s in samples], dtype=float)
        y = np.array([s[1] for s in samples], dtype=float)
        slope, intercept = np.polyfit(x, y, 1)
        slope = max(float(slope), 0.0)
        if intercept < 0:
            # refit through the origin
            intercept = 0.0
            slope = max(float(x @ y / (x @ x)), 0.0)
        return cls(float(intercept), slope)

    @classmethod
    def from_value(cls, v: Any) -> Affine:
        if isinstance(v, Affine):
            return v
        if isinstance(v, Mapping):
            return cls(float(v.get("intercept", 0.0)), float(v.get("slope", 0.0)))
        if isinstance(v, (list, tuple)) and len(v) == 2:
            return cls(float(v[0]), float(v[1]))
        if isinstance(v, (int, float)):
            return cls(0.0, float(v))
        raise ConfigError(f"cannot read affine cost from {v!r}")

    def to_dict(self) -> dict[str, float]:
        return {"intercept": self.intercept, "slope": self.slope}


# named phase entries used by the Ulysses and context-shuffle schedules
DEFAULT_PHASES = {
    "q_proj": Affine(0.0, 0.002),
    "k_proj": Affine(0.0, 0.0005),
    "v_proj": Affine(0.0, 0.0005),
    "kv_cache_update": Affine(0.0, 0.001),
    "cross_attn": Affine(0.0, 0.004),
    "a2a": Affine(0.0, 0.001),
}


@dataclass(frozen=True)
class CostModel:
    """Affine kernel costs.

    ``ffa_*`` take attention pairs, ``cast``/``reduce`` take tokens.
    ``range_gather`` is a per-token surcharge added to both collectives for the
    buffer assembly before and after the all-to-all. ``host_cost``, when set,
    overrides the computed cost of the host (local-KV) stage.
    """

    ffa_fwd: Affine = Affine(0.0, 1e-4)
    ffa_bwd: Affine = Affine(0.0, 2.5e-4)
    cast: Affine = Affine(0.0, 0.02)
    reduce: Affine = Affine(0.0, 0.02)
    range_gather: float = 0.0
    host_cost: int | None = None
    phases: Mapping[str, Affine] = field(default_factory=lambda: dict(DEFAULT_PHASES))
    time_unit_s: float = 1e-6

    def ffa(self, pairs: int, pass_: str = "fwd") -> int:
        return (self.ffa_fwd if pass_ == "fwd" else self.ffa_bwd)(pairs)

    def cast_cost(self, tokens: int) -> int:
        return Affine(self.cast.intercept, self.cast.slope + self.range_gather)(tokens)

    def reduce_cost(self, tokens: int) -> int:
        return Affine(self.reduce.intercept, self.reduce.slope + self.range_gather)(tokens)

    def phase(self, name: str, work: int) -> int:
        try:
            return self.phases[name](work)
        except KeyError:
            raise ConfigError(f"cost model has no phase entry {name!r}") from None

    def scaled_comm(self, factor: float) -> CostModel:
        phases = dict(self.phases)
        phases["a2a"] = phases["a2a"].scaled(factor)
        return CostModel(
            self.ffa_fwd, self.ffa_bwd, self.cast.scaled(factor), self.reduce.scaled(factor),
            self.range_gather * factor, self.host_cost, phases, self.time_unit_s,
        )

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> CostModel:
        known = {"ffa_fwd", "ffa_bwd", "ffa", "cast", "reduce", "range_gather", "host_cost", "phases", "time_unit_s"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown cost model keys: {sorted(unknown)}")
        base = cls()
        ffa_fwd = Affine.from_value(d.get("ffa_fwd", d.get("ffa", base.ffa_fwd)))
        ffa_bwd = Affine.from_value(d["ffa_bwd"]) if "ffa_bwd" in d else (
            ffa_fwd.scaled(2.5) if ("ffa_fwd" in d or "ffa" in d) else base.ffa_bwd
        )
        phases = dict(DEFAULT_PHASES)
        for name, v in dict(d.get("phases", {})).items():
            phases[name] = Affine.from_value(v)
        host = d.get("host_cost")
        return cls(
            ffa_fwd=ffa_fwd,
            ffa_bwd=ffa_bwd,
            cast=Affine.from_value(d.get("cast", base.cast)),
            reduce=Affine.from_value(d.get("reduce", d.get("cast", base.reduce))),
            range_gather=float(d.get("range_gather", 0.0)),
            host_cost=None if host is None else int(host),
            phases=phases,
            time_unit_s=float(d.get("time_unit_s", base.time_unit_s)),
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "ffa_fwd": self.ffa_fwd.to_dict(),
            "ffa_bwd": self.ffa_bwd.to_dict(),
            "cast": self.cast.to_dict(),
            "reduce": self.reduce.to_dict(),
            "range_gather": self.range_gather,
            "host_cost": self.host_cost,
            "phases": {k: self.phases[k].to_dict() for k in sorted(self.phases)},
            "time_unit_s": self.time_unit_s,
        }


@dataclass(frozen=True)
class StageCosts:
    """Per-stage costs for one rank and one pass.

    ``ffa[0]`` is the host stage; ``ffa[j]``, ``cast[j-1]`` and ``reduce[j-1]``
    belong to stage ``j`` for ``1 <= j <= s``. Out-of-range lookups through
    :meth:`gc`/:meth:`gr` are zero, whatever the tuples hold beyond ``s``.
    """

    ffa: tuple[int, ...]
    cast: tuple[int, ...] = ()
    reduce: tuple[int, ...] = ()

    @property
    def s(self) -> int:
        return len(self.ffa) - 1

    def cf(self, j: int) -> int:
        return self.ffa[j] if 0 <= j <= self.s else 0

    def gc(self, j: int) -> int:
        return self.cast[j - 1] if 1 <= j <= self.s and j - 1 < len(self.cast) else 0

    def gr(self, j: int) -> int:
        return self.reduce[j - 1] if 1 <= j <= self.s and j - 1 < len(self.reduce) else 0

    def to_dict(self) -> dict[str, list[int]]:
        s = self.s
        return {
            "ffa": list(self.ffa),
            "cast": [self.gc(j) for j in range(1, s + 1)],
            "reduce": [self.gr(j) for j in range(1, s + 1)],
        }


def estimate_fwd_cost(costs: StageCosts) -> int:
    s = costs.s
    return sum(max(costs.gc(j + 1), costs.cf(j)) for j in range(s)) + costs.cf(s)


def estimate_bwd_cost(costs: StageCosts) -> int:
    s = costs.s
    overlapped = sum(max(costs.gc(j + 1), costs.cf(j), costs.gr(j - 1)) for j in range(s + 1))
    return overlapped + costs.gr(s)


@dataclass(frozen=True)
class Package:
    index: int
    ranges: tuple[TokenRange, ...]

    @property
    def tokens(self) -> int:
        return sum(len(r) for r in self.ranges)


def partition_packages(traffic: int | Sequence[int], min_chunk_size: int, max_num_chunks: int) -> list[int]:
    """Package sizes for ``traffic`` tokens.

    Cuts ``min_chunk_size`` pieces with the remainder last; when that would
    exceed ``max_num_chunks`` pieces, splits evenly into ``max_num_chunks``.
    """
    if min_chunk_size < 1 or max_num_chunks < 1:
        raise ConfigError("min_chunk_size and max_num_chunks must be >= 1")
    total = traffic if isinstance(traffic, int) else sum(traffic)
    if total <= 0:
        return []
    n = -(-total // min_chunk_size)
    if n <= max_num_chunks:
        sizes = [min_chunk_size] * (total // min_chunk_size)
        if total % min_chunk_size:
            sizes.append(total % min_chunk_size)
        return sizes
    q, r = divmod(total, max_num_chunks)
    return [q + 1] * r + [q] * (max_num_chunks - r)


def split_into_packages(ranges: Sequence[TokenRange], min_chunk_size: int, max_num_chunks: int) -> list[Package]:
    """Cut the concatenation of ``ranges`` into packages sized by :func:`partition_packages`."""
    ordered = sorted(r for r in ranges if not r.is_empty)
    sizes = partition_packages([len(r) for r in ordered], min_chunk_size, max_num_chunks)
    out: list[Package] = []
    it = iter(ordered)
    cur = next(it, None)
    offset = cur.start if cur else 0
    for idx, size in enumerate(sizes):
        parts = []
        need = size
        while need and cur is not None:
            take = min(need, cur.end - offset)
            parts.append(TokenRange(offset, offset + take))
            offset += take
            need -= take
            if offset == cur.end:
                cur = next(it, None)
                offset = cur.start if cur else 0
        out.append(Package(idx, tuple(parts)))
    return out


def assign_stages(
    packages: Sequence[Package], num_stages: int, mode: str = "round_robin", seed: int = 0
) -> list[list[int]]:
    """Group package indices into ``num_stages`` stages.

    ``round_robin`` deals packages largest-first; ``random`` deals a seeded
    shuffle. Stages beyond the package count stay empty.
    """
    if num_stages < 1:
        raise ValueError("num_stages must be >= 1")
    if mode == "round_robin":
        order = sorted(packages, key=lambda p: (-p.tokens, p.index))
    elif mode == "random":
        order = list(packages)
        random.Random(seed).shuffle(order)
    else:
        raise ConfigError(f"unknown stage assignment mode {mode!r}")
    stages: list[list[int]] = [[] for _ in range(num_stages)]
    for i, p in enumerate(order):
        stages[i % num_stages].append(p.index)
    return [sorted(st) for st in stages]


@dataclass(frozen=True)
class RankWork:
    """What one rank computes: its local mask, and which KV it hosts or receives."""

    rank: int
    local_mask: AttnMask
    host_ranges: tuple[TokenRange, ...]
    remote_ranges: tuple[TokenRange, ...]

    def pairs(self, cols: Sequence[TokenRange]) -> int:
        rows = TokenRange(0, self.local_mask.seqlen_q)
        return sum(region_area(self.local_mask, rows, c, Counting.MULTIPLICITY) for c in cols)


def rank_work(mask: AttnMask, plan: DispatchPlan, cast: TransferTable, rank: int) -> RankWork:
    rows = plan.rank_rows(rank)
    return RankWork(rank, restrict_rows(mask, rows), tuple(rows), tuple(cast.remote_ranges(rank)))


def package_pairs(work: RankWork, packages: Sequence[Package]) -> dict[int, int]:
    """Attention pairs unlocked by each package; additive over disjoint packages."""
    return {p.index: work.pairs(p.ranges) for p in packages}


def build_stage_costs(
    work: RankWork,
    packages: Sequence[Package],
    stages: Sequence[Sequence[int]],
    model: CostModel,
    pass_: str,
    pairs: Mapping[int, int] | None = None,
    host_pairs: int | None = None,
) -> StageCosts:
    if pairs is None:
        pairs = package_pairs(work, packages)
    if host_pairs is None:
        host_pairs = work.pairs(work.host_ranges)
    tokens_of = {p.index: p.tokens for p in packages}
    host = model.host_cost if model.host_cost is not None else model.ffa(host_pairs, pass_)
    ffa, cast, reduce = [host], [], []
    for st in stages:
        tokens = sum(tokens_of[i] for i in st)
        ffa.append(model.ffa(sum(pairs[i] for i in st), pass_))
        cast.append(model.cast_cost(tokens))
        reduce.append(model.reduce_cost(tokens) if pass_ == "bwd" else 0)
    return StageCosts(tuple(ffa), tuple(cast), tuple(reduce))


@dataclass(frozen=True)
class OverlapParams:
    min_chunk_size: int = 512
    max_num_chunks: int = 64
    num_stages: int | None = None
    assignment: str = "round_robin"
    seed: int = 0

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> OverlapParams:
        ns = d.get("num_stages")
        return cls(
            int(d.get("min_chunk_size", cls.min_chunk_size)),
            int(d.get("max_num_chunks", cls.max_num_chunks)),
            None if ns is None else int(ns),
            str(d.get("assignment", cls.assignment)),
            int(d.get("seed", cls.seed)),
        )


@dataclass
class StagePlan:
    rank: int
    packages: list[Package]
    num_stages_fwd: int
    num_stages_bwd: int
    stages_fwd: list[list[int]]
    stages_bwd: list[list[int]]
    costs_fwd: StageCosts
    costs_bwd: StageCosts
    local_best_fwd: int = 1
    local_best_bwd: int = 1
    search: dict[int, tuple[int, int]] = field(default_factory=dict)

    @property
    def est_cost_fwd(self) -> int:
        return estimate_fwd_cost(self.costs_fwd)

    @property
    def est_cost_bwd(self) -> int:
        return estimate_bwd_cost(self.costs_bwd)

    def to_dict(self) -> dict[str, Any]:
        return {
            "rank": self.rank,
            "packages": [[[r.start, r.end] for r in p.ranges] for p in self.packages],
            "num_stages_fwd": self.num_stages_fwd,
            "num_stages_bwd": self.num_stages_bwd,
            "stages_fwd": self.stages_fwd,
            "stages_bwd": self.stages_bwd,
            "costs_fwd": self.costs_fwd.to_dict(),
            "costs_bwd": self.costs_bwd.to_dict(),
            "est_cost_fwd": self.est_cost_fwd,
            "est_cost_bwd": self.est_cost_bwd,
            "local_best_fwd": self.local_best_fwd,
            "local_best_bwd": self.local_best_bwd,
            "search": {str(s): list(v) for s, v in sorted(self.search.items())},
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> StagePlan:
        def costs(c: Mapping[str, Any]) -> StageCosts:
            return StageCosts(tuple(c["ffa"]), tuple(c["cast"]), tuple(c["reduce"]))

        packages = [
            Package(i, tuple(TokenRange(int(a), int(b)) for a, b in p)) for i, p in enumerate(d["packages"])
        ]
        return cls(
            rank=int(d["rank"]),
            packages=packages,
            num_stages_fwd=int(d["num_stages_fwd"]),
            num_stages_bwd=int(d["num_stages_bwd"]),
            stages_fwd=[list(s) for s in d["stages_fwd"]],
            stages_bwd=[list(s) for s in d["stages_bwd"]],
            costs_fwd=costs(d["costs_fwd"]),
            costs_bwd=costs(d["costs_bwd"]),
            local_best_fwd=int(d.get("local_best_fwd", 1)),
            local_best_bwd=int(d.get("local_best_bwd", 1)),
            search={int(s): (int(v[0]), int(v[1])) for s, v in d.get("search", {}).items()},
        )


@dataclass
class SolverResult:
    num_stages_fwd: int
    num_stages_bwd: int
    plans: list[StagePlan]

    def to_dict(self) -> dict[str, Any]:
        return {
            "num_stages_fwd": self.num_stages_fwd,
            "num_stages_bwd": self.num_stages_bwd,
            "ranks": [p.to_dict() for p in self.plans],
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> SolverResult:
        return cls(int(d["num_stages_fwd"]), int(d["num_stages_bwd"]), [StagePlan.from_dict(p) for p in d["ranks"]])


def search_rank(
    work: RankWork, model: CostModel, params: OverlapParams
) -> tuple[list[Package], int, int, dict[int, tuple[int, int]]]:
    """Evaluate every stage count for one rank; ties go to the smaller count."""
    packages = split_into_packages(work.remote_ranges, params.min_chunk_size, params.max_num_chunks)
    pairs = package_pairs(work, packages)
    host_pairs = work.pairs(work.host_ranges)
    table: dict[int, tuple[int, int]] = {}
    best_f = best_b = None
    for s in range(max(len(packages), 1), 0, -1):
        stages = assign_stages(packages, s, params.assignment, params.seed)
        f = estimate_fwd_cost(build_stage_costs(work, packages, stages, model, "fwd", pairs, host_pairs))
        b = estimate_bwd_cost(build_stage_costs(work, packages, stages, model, "bwd", pairs, host_pairs))
        table[s] = (f, b)
        if best_f is None or f <= table[best_f][0]:
            best_f = s
        if best_b is None or b <= table[best_b][1]:
            best_b = s
    return packages, best_f, best_b, table


def solve_stages(works: Sequence[RankWork], model: CostModel, params: OverlapParams) -> SolverResult:
    searched = [search_rank(w, model, params) for w in works]
    if params.num_stages is not None:
        if params.num_stages < 1:
            raise ConfigError("num_stages must be >= 1")
        g_fwd = g_bwd = params.num_stages
    else:
        g_fwd = max(r[1] for r in searched)
        g_bwd = max(r[2] for r in searched)
    plans = []
    for w, (packages, bf, bb, table) in zip(works, searched):
        st_f = assign_stages(packages, g_fwd, params.assignment, params.seed)
        st_b = assign_stages(packages, g_bwd, params.assignment, params.seed)
        plans.append(
            StagePlan(
                rank=w.rank,
                packages=packages,
                num_stages_fwd=g_fwd,
                num_stages_bwd=g_bwd,
                stages_fwd=st_f,
                stages_bwd=st_b,
                costs_fwd=build_stage_costs(w, packages, st_f, model, "fwd"),
                costs_bwd=build_stage_costs(w, packages, st_b, model, "bwd"),
                local_best_fwd=bf,
                local_best_bwd=bb,
                search=table,
            )
        )
    return SolverResult(g_fwd, g_bwd, plans)
