"""Timeline builders for the context-parallel schedules.

``magi``     multi-stage overlap over zero-redundant group-cast/group-reduce
``ring``     point-to-point ring passing whole KV shards
``ulysses``  head-sharded all-to-all with per-tensor overlap
``cso``      Ulysses variant pipelining the all-to-alls chunk by chunk
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Sequence

from ..comm import TransferTable
from ..dispatch import DispatchPlan
from ..errors import PlannerError
from ..mask import AttnMask, Counting, TokenRange, region_area, restrict_rows
from ..metrics import WorkloadSpec, flops, throughput
from ..overlap import CostModel, SolverResult, StageCosts
from .events import COMM, COMPUTE, REDUCE, Simulator, Timeline

__all__ = [
    "SimReport",
    "magi_rank_pipeline",
    "simulate_magi",
    "simulate_ring",
    "simulate_ulysses",
    "simulate_cso",
    "cso_steps",
    "SCHEDULES",
]

SCHEDULES = ("magi", "ring", "ulysses", "cso")


@dataclass
class SimReport:
    schedule: str
    pass_: str
    cp_size: int
    makespan: int
    exposed_comm: int
    per_rank_busy: list[float]
    flops_total: int
    throughput: Fraction
    tflops_per_gpu: float
    comm_volume: int = 0
    reduce_volume: int = 0
    compute_time: list[int] = field(default_factory=list)
    timeline: Timeline | None = field(default=None, repr=False, compare=False)

    def to_dict(self) -> dict[str, Any]:
        return {
            "schedule": self.schedule,
            "pass": self.pass_,
            "cp_size": self.cp_size,
            "makespan": self.makespan,
            "exposed_comm": self.exposed_comm,
            "per_rank_busy": [round(b, 6) for b in self.per_rank_busy],
            "compute_time": list(self.compute_time),
            "flops_total": self.flops_total,
            "throughput_flops_per_unit_per_gpu": float(self.throughput),
            "tflops_per_gpu": round(self.tflops_per_gpu, 6),
            "comm_volume": self.comm_volume,
            "reduce_volume": self.reduce_volume,
        }


def _report(
    schedule: str,
    pass_: str,
    cp_size: int,
    tl: Timeline,
    flops_total: int,
    model: CostModel,
) -> SimReport:
    makespan = tl.makespan
    ranks = list(range(cp_size))
    compute = [tl.busy(r, COMPUTE) for r in ranks]
    # the bottleneck is the rank that finishes last; ties go to the lower rank
    bottleneck = max(ranks, key=lambda r: (tl.rank_end(r), -r)) if ranks else 0
    exposed = makespan - compute[bottleneck] if ranks else 0
    if exposed < 0:
        raise PlannerError("negative exposed communication; timeline is inconsistent")
    busy = [c / makespan if makespan else 0.0 for c in compute]
    rate = throughput(flops_total, makespan, cp_size) if makespan > 0 else Fraction(0)
    tflops = float(rate) / model.time_unit_s / 1e12
    return SimReport(
        schedule=schedule,
        pass_=pass_,
        cp_size=cp_size,
        makespan=makespan,
        exposed_comm=exposed,
        per_rank_busy=busy,
        flops_total=flops_total,
        throughput=rate,
        tflops_per_gpu=tflops,
        comm_volume=tl.volume(COMM),
        reduce_volume=tl.volume(REDUCE),
        compute_time=compute,
        timeline=tl,
    )


def _check_pass(pass_: str) -> None:
    if pass_ not in ("fwd", "bwd"):
        raise ValueError(f"pass must be 'fwd' or 'bwd', got {pass_!r}")


# -- magi ---------------------------------------------------------------------


def magi_rank_pipeline(
    sim: Simulator,
    rank: int,
    costs: StageCosts,
    pass_: str,
    stage_tokens: Sequence[int] = (),
) -> None:
    """Submit one rank's staged pipeline.

    Tasks are grouped into launch periods; every task in a period waits for
    every task of the previous period, so a period lasts as long as its
    slowest member. Forward period ``j`` runs ``ffa(j)`` beside ``cast(j+1)``;
    backward period ``j`` also runs ``reduce(j-1)``, and a trailing period
    holds the final reduction.
    """
    s = costs.s
    tokens = list(stage_tokens) + [0] * (s - len(stage_tokens))
    prev: list[int] = []
    last_period = s + 1 if pass_ == "bwd" else s
    for j in range(last_period + 1):
        cur = []
        if j <= s:
            cur.append(sim.submit(rank, COMPUTE, f"ffa[{j}]", costs.cf(j), prev))
        if j + 1 <= s:
            cur.append(sim.submit(rank, COMM, f"cast[{j + 1}]", costs.gc(j + 1), prev, tokens[j]))
        if pass_ == "bwd" and 1 <= j - 1 <= s:
            cur.append(sim.submit(rank, REDUCE, f"reduce[{j - 1}]", costs.gr(j - 1), prev, tokens[j - 2]))
        prev = cur


def simulate_magi(
    mask: AttnMask,
    plan: DispatchPlan,
    cast: TransferTable,
    solved: SolverResult,
    model: CostModel,
    workload: WorkloadSpec | None = None,
    pass_: str = "fwd",
) -> SimReport:
    _check_pass(pass_)
    workload = workload or WorkloadSpec()
    if len(solved.plans) != plan.cp_size or cast.cp_size != plan.cp_size or mask.seqlen_q != plan.seqlen:
        raise PlannerError("plan, transfer table and stage plans disagree on cp_size or sequence length")
    sim = Simulator()
    for sp in solved.plans:
        costs = sp.costs_fwd if pass_ == "fwd" else sp.costs_bwd
        stages = sp.stages_fwd if pass_ == "fwd" else sp.stages_bwd
        by_index = {p.index: p.tokens for p in sp.packages}
        magi_rank_pipeline(sim, sp.rank, costs, pass_, [sum(by_index[i] for i in st) for st in stages])
    return _report("magi", pass_, plan.cp_size, sim.run(), flops(mask, workload, pass_), model)


# -- ring ---------------------------------------------------------------------


def simulate_ring(
    mask: AttnMask,
    plan: DispatchPlan,
    model: CostModel,
    workload: WorkloadSpec | None = None,
    overlap: bool = True,
    pass_: str = "fwd",
) -> SimReport:
    """Ring passing of whole KV shards.

    Round ``r`` on rank ``i`` computes against the shard that originated on
    rank ``i - r`` and forwards it to rank ``i + 1``. In the backward pass the
    accumulated dKV for the shard just used travels one hop on the reduce
    stream every round, arriving back home after the last round.
    """
    _check_pass(pass_)
    workload = workload or WorkloadSpec()
    cp = plan.cp_size
    if mask.seqlen_q != plan.seqlen:
        raise PlannerError("mask and plan disagree on sequence length")
    rows = [plan.rank_rows(r) for r in range(cp)]
    shard_tokens = [sum(len(x) for x in rr) for rr in rows]
    local = [restrict_rows(mask, rr) for rr in rows]
    full_rows = TokenRange(0, mask.seqlen_q)

    def pairs(rank: int, origin: int) -> int:
        return sum(region_area(local[rank], full_rows, c, Counting.MULTIPLICITY) for c in rows[origin])

    sim = Simulator()
    kv_send: dict[tuple[int, int], int] = {}
    dkv_send: dict[tuple[int, int], int] = {}
    compute: dict[tuple[int, int], int] = {}
    for r in range(cp):
        for i in range(cp):
            origin = (i - r) % cp
            prev_rank = (i - 1) % cp
            deps = []
            if r > 0:
                deps.append(kv_send[(prev_rank, r - 1)])
                if not overlap:
                    deps.append(compute[(i, r - 1)])
                    if (i, r - 1) in kv_send:
                        deps.append(kv_send[(i, r - 1)])
                    if (i, r - 1) in dkv_send:
                        deps.append(dkv_send[(i, r - 1)])
            cost = model.ffa(pairs(i, origin), pass_)
            compute[(i, r)] = sim.submit(i, COMPUTE, f"ring_ffa[{r}]<-{origin}", cost, deps)
            if r < cp - 1:
                send_deps = [kv_send[(prev_rank, r - 1)]] if r > 0 else []
                if not overlap:
                    send_deps.append(compute[(i, r)])
                tokens = shard_tokens[origin]
                kv_send[(i, r)] = sim.submit(
                    i, COMM, f"ring_kv[{r}]", model.cast_cost(tokens), send_deps, tokens
                )
            if pass_ == "bwd" and cp > 1:
                d_deps = [compute[(i, r)]]
                if r > 0:
                    d_deps.append(dkv_send[(prev_rank, r - 1)])
                tokens = shard_tokens[origin]
                dkv_send[(i, r)] = sim.submit(
                    i, REDUCE, f"ring_dkv[{r}]", model.reduce_cost(tokens), d_deps, tokens
                )
    return _report("ring", pass_, cp, sim.run(), flops(mask, workload, pass_), model)


# -- ulysses and context shuffle ------------------------------------------------


def _a2a_elems(tokens: int, heads: int, cp: int) -> int:
    return tokens * heads * (cp - 1) // cp


def _head_share(pairs: int, cp: int) -> int:
    return -(-pairs // cp)


def simulate_ulysses(
    mask: AttnMask,
    workload: WorkloadSpec,
    model: CostModel,
    cp_size: int,
) -> SimReport:
    """Forward Ulysses with each all-to-all hidden behind a neighbouring kernel.

    Compute order is v, k, q projections, KV-cache update, attention, cross
    attention; each all-to-all launches as soon as its tensor is ready, which
    pairs v-comm with k-proj, k-comm with q-proj, q-comm with the cache update
    and o-comm with cross attention.
    """
    if mask.seqlen_q % cp_size:
        raise PlannerError(f"seqlen {mask.seqlen_q} not divisible by cp_size {cp_size}")
    w = workload
    t = mask.seqlen_q // cp_size
    area = mask_area_mult(mask)
    sim = Simulator()
    for rank in range(cp_size):
        a2a = lambda heads: model.phase("a2a", _a2a_elems(t, heads, cp_size))  # noqa: E731
        v_proj = sim.submit(rank, COMPUTE, "v_proj", model.phase("v_proj", t * w.num_heads_v))
        v_comm = sim.submit(rank, COMM, "v_comm", a2a(w.num_heads_v), [v_proj], t * w.num_heads_v)
        k_proj = sim.submit(rank, COMPUTE, "k_proj", model.phase("k_proj", t * w.num_heads_k))
        k_comm = sim.submit(rank, COMM, "k_comm", a2a(w.num_heads_k), [k_proj], t * w.num_heads_k)
        q_proj = sim.submit(rank, COMPUTE, "q_proj", model.phase("q_proj", t * w.num_heads_q))
        q_comm = sim.submit(rank, COMM, "q_comm", a2a(w.num_heads_q), [q_proj], t * w.num_heads_q)
        kv_upd = sim.submit(
            rank, COMPUTE, "kv_cache_update", model.phase("kv_cache_update", t * (w.num_heads_k + w.num_heads_v))
        )
        attn = sim.submit(
            rank, COMPUTE, "attn", model.ffa(_head_share(area, cp_size), "fwd"), [q_comm, k_comm, v_comm, kv_upd]
        )
        sim.submit(rank, COMM, "o_comm", a2a(w.num_heads_q), [attn], t * w.num_heads_q)
        sim.submit(rank, COMPUTE, "cross_attn", model.phase("cross_attn", t * w.num_heads_q), [attn])
    return _report("ulysses", "fwd", cp_size, sim.run(), flops(mask, workload, "fwd"), model)


def mask_area_mult(mask: AttnMask) -> int:
    from ..mask import mask_area

    return mask_area(mask, Counting.MULTIPLICITY)


def cso_steps(num_chunks: int) -> list[tuple[tuple[tuple[str, int], ...], tuple[tuple[str, int], ...]]]:
    """Overlap steps as ``(communications, computations)`` pairs.

    Chunk 0 denotes "all chunks"; the KV-cache update and cross attention
    carry chunk 0 as well. A preamble that projects k and v is not part of
    this list.
    """
    c = num_chunks
    if c < 2:
        raise ValueError("context shuffle needs at least 2 chunks")
    steps = [((("k_comm", 0), ("v_comm", 0)), (("q_compute", 0),))]
    steps.append(((("q_comm", 1),), (("kv_cache_update", 0),)))
    for k in range(3, c + 4):
        comms = []
        if k - 1 <= c:
            comms.append(("q_comm", k - 1))
        if 1 <= k - 3 <= c:
            comms.append(("o_comm", k - 3))
        comp = ("o_compute", k - 2) if k - 2 <= c else ("cross_attn", 0)
        steps.append((tuple(comms), (comp,)))
    return steps


def simulate_cso(
    mask: AttnMask,
    workload: WorkloadSpec,
    model: CostModel,
    cp_size: int,
    num_chunks: int = 5,
) -> SimReport:
    """Forward context-shuffle overlap: every rank holds a slice of every chunk.

    Tasks are submitted in step order; each waits only on its data inputs, so
    the listed overlaps arise from stream order rather than barriers.
    """
    steps = cso_steps(num_chunks)
    if mask.seqlen_q % cp_size:
        raise PlannerError(f"seqlen {mask.seqlen_q} not divisible by cp_size {cp_size}")
    w = workload
    t = mask.seqlen_q // cp_size
    if t < num_chunks:
        raise PlannerError(f"{t} tokens per rank cannot form {num_chunks} chunks")
    # near-equal chunks; every rank holds the same share of each
    bounds = [i * t // num_chunks for i in range(num_chunks + 1)]
    tc = [bounds[i + 1] - bounds[i] for i in range(num_chunks)]
    chunk_pairs = [
        region_area(mask, TokenRange(bounds[i] * cp_size, bounds[i + 1] * cp_size), counting=Counting.MULTIPLICITY)
        for i in range(num_chunks)
    ]
    sim = Simulator()
    for rank in range(cp_size):
        ids: dict[tuple[str, int], int] = {}
        kv_heads = w.num_heads_k + w.num_heads_v
        ids[("k_proj", 0)] = sim.submit(rank, COMPUTE, "k_proj", model.phase("k_proj", t * w.num_heads_k))
        ids[("v_proj", 0)] = sim.submit(rank, COMPUTE, "v_proj", model.phase("v_proj", t * w.num_heads_v))

        def deps_of(op: str, chunk: int) -> list[int]:
            if op in ("k_comm", "v_comm"):
                return [ids[("k_proj", 0)], ids[("v_proj", 0)]]
            if op == "q_comm":
                return [ids[("q_compute", 0)]]
            if op == "o_compute":
                return [ids[("q_comm", chunk)], ids[("k_comm", 0)], ids[("v_comm", 0)], ids[("kv_cache_update", 0)]]
            if op == "o_comm":
                return [ids[("o_compute", chunk)]]
            if op == "cross_attn":
                return [ids[("o_compute", num_chunks)]]
            return []

        def cost_of(op: str, chunk: int) -> tuple[int, int]:
            if op == "k_comm":
                return model.phase("a2a", _a2a_elems(t, w.num_heads_k, cp_size)), t * w.num_heads_k
            if op == "v_comm":
                return model.phase("a2a", _a2a_elems(t, w.num_heads_v, cp_size)), t * w.num_heads_v
            if op in ("q_comm", "o_comm"):
                n = tc[chunk - 1]
                return model.phase("a2a", _a2a_elems(n, w.num_heads_q, cp_size)), n * w.num_heads_q
            if op == "q_compute":
                return model.phase("q_proj", t * w.num_heads_q), 0
            if op == "kv_cache_update":
                return model.phase("kv_cache_update", t * kv_heads), 0
            if op == "o_compute":
                return model.ffa(_head_share(chunk_pairs[chunk - 1], cp_size), "fwd"), 0
            return model.phase("cross_attn", t * w.num_heads_q), 0

        for comms, comps in steps:
            for op, chunk in list(comps) + list(comms):
                cost, vol = cost_of(op, chunk)
                stream = COMM if op.endswith("_comm") else COMPUTE
                ids[(op, chunk)] = sim.submit(rank, stream, f"{op}[{chunk}]", cost, deps_of(op, chunk), vol)
    return _report("cso", "fwd", cp_size, sim.run(), flops(mask, workload, "fwd"), model)
