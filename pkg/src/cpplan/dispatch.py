"""Query-dimension sharding and load-balanced assignment of chunks to ranks.

The mask's query dimension is cut into equal dispatch chunks; each chunk's
workload is the number of allowed pairs in its rows. Chunks are then assigned
to ``cp_size`` buckets holding the same number of chunks each, minimizing the
heaviest bucket.
"""
from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from typing import Any, Sequence

from .errors import ConstraintViolation
from .mask import AttnMask, Counting, TokenRange, merge_ranges, region_area, restrict_rows

__all__ = [
    "DispatchChunk",
    "DispatchPlan",
    "shard_into_chunks",
    "greedy_dispatch",
    "brute_force_dispatch",
    "zigzag_dispatch",
    "sequential_dispatch",
    "DISPATCHERS",
    "local_mask_of_rank",
    "default_chunk_size",
    "check_divisibility",
    "BRUTE_FORCE_MAX_CHUNKS",
    "BRUTE_FORCE_MAX_CP",
]

BRUTE_FORCE_MAX_CHUNKS = 16
BRUTE_FORCE_MAX_CP = 4

SEQLEN_CONSTRAINT = "seqLen % (cp_size × dispatch_chunk_size) = 0"
CARDINALITY_CONSTRAINT = "|B_j| = n / cp_size"


@dataclass(frozen=True)
class DispatchChunk:
    index: int
    rows: TokenRange
    area: int


@dataclass
class DispatchPlan:
    cp_size: int
    chunk_size: int
    assignment: list[int]
    chunk_areas: list[int]
    bucket_workloads: list[int] = field(default_factory=list)
    algorithm: str = "greedy"

    def __post_init__(self) -> None:
        if not self.bucket_workloads:
            loads = [0] * self.cp_size
            for c, b in enumerate(self.assignment):
                loads[b] += self.chunk_areas[c]
            self.bucket_workloads = loads
        self.validate()

    @property
    def num_chunks(self) -> int:
        return len(self.assignment)

    @property
    def seqlen(self) -> int:
        return self.num_chunks * self.chunk_size

    @property
    def max_workload(self) -> int:
        return max(self.bucket_workloads) if self.bucket_workloads else 0

    def buckets(self) -> list[list[int]]:
        out: list[list[int]] = [[] for _ in range(self.cp_size)]
        for c, b in enumerate(self.assignment):
            out[b].append(c)
        return out

    def chunk_range(self, chunk: int) -> TokenRange:
        return TokenRange(chunk * self.chunk_size, (chunk + 1) * self.chunk_size)

    def rank_rows(self, rank: int) -> list[TokenRange]:
        """Token ranges owned by ``rank``, coalesced."""
        return merge_ranges(self.chunk_range(c) for c in self.buckets()[rank])

    def validate(self) -> None:
        n = self.num_chunks
        if self.cp_size <= 0 or n % self.cp_size:
            raise ConstraintViolation(CARDINALITY_CONSTRAINT, f"n={n}, cp_size={self.cp_size}")
        per = n // self.cp_size
        counts = [0] * self.cp_size
        for b in self.assignment:
            if not 0 <= b < self.cp_size:
                raise ConstraintViolation(CARDINALITY_CONSTRAINT, f"bucket {b} out of range")
            counts[b] += 1
        if any(c != per for c in counts):
            raise ConstraintViolation(CARDINALITY_CONSTRAINT, f"bucket sizes {counts}, expected {per}")
        loads = [0] * self.cp_size
        for c, b in enumerate(self.assignment):
            loads[b] += self.chunk_areas[c]
        if loads != list(self.bucket_workloads):
            raise ConstraintViolation("SumArea(B_j) matches chunk areas", f"{loads} != {self.bucket_workloads}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "algorithm": self.algorithm,
            "cp_size": self.cp_size,
            "chunk_size": self.chunk_size,
            "num_chunks": self.num_chunks,
            "buckets": {str(r): chunks for r, chunks in enumerate(self.buckets())},
            "chunk_areas": list(self.chunk_areas),
            "bucket_workloads": list(self.bucket_workloads),
            "max_workload": self.max_workload,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> DispatchPlan:
        n = int(d["num_chunks"])
        assignment = [-1] * n
        for rank, chunks in d["buckets"].items():
            for c in chunks:
                assignment[int(c)] = int(rank)
        return cls(
            cp_size=int(d["cp_size"]),
            chunk_size=int(d["chunk_size"]),
            assignment=assignment,
            chunk_areas=[int(a) for a in d["chunk_areas"]],
            bucket_workloads=[int(w) for w in d["bucket_workloads"]],
            algorithm=str(d.get("algorithm", "greedy")),
        )


def check_divisibility(seqlen: int, cp_size: int, chunk_size: int) -> None:
    if cp_size <= 0 or chunk_size <= 0 or seqlen % (cp_size * chunk_size):
        raise ConstraintViolation(
            SEQLEN_CONSTRAINT, f"seqLen={seqlen}, cp_size={cp_size}, dispatch_chunk_size={chunk_size}"
        )


def default_chunk_size(seqlen: int, cp_size: int) -> int:
    """One eighth of the per-rank sequence, at least 1.

    Walks down to the nearest size that keeps the joint divisibility constraint.
    """
    per_rank = max(1, seqlen // max(cp_size, 1))
    size = max(1, per_rank // 8)
    while size > 1 and seqlen % (cp_size * size):
        size -= 1
    return size


def shard_into_chunks(mask: AttnMask, chunk_size: int) -> list[DispatchChunk]:
    if chunk_size <= 0 or mask.seqlen_q % chunk_size:
        raise ConstraintViolation(
            SEQLEN_CONSTRAINT, f"seqLen={mask.seqlen_q} not divisible by dispatch_chunk_size={chunk_size}"
        )
    out = []
    for i in range(mask.seqlen_q // chunk_size):
        rows = TokenRange(i * chunk_size, (i + 1) * chunk_size)
        out.append(DispatchChunk(i, rows, region_area(mask, rows, counting=Counting.UNION)))
    return out


def _chunk_size_of(chunks: Sequence[DispatchChunk]) -> int:
    return len(chunks[0].rows) if chunks else 0


def _areas_by_index(chunks: Sequence[DispatchChunk]) -> list[int]:
    areas = [0] * len(chunks)
    for c in chunks:
        areas[c.index] = c.area
    return areas


def _check_cp(n: int, cp_size: int) -> None:
    if cp_size <= 0 or n % cp_size:
        raise ConstraintViolation("cp_size | n", f"n={n}, cp_size={cp_size}")


def greedy_dispatch(chunks: Sequence[DispatchChunk], cp_size: int) -> DispatchPlan:
    """Min-heap greedy: heaviest chunk first into the least-loaded non-full bucket.

    Ties resolve to the lower bucket index (heap order on ``(load, bucket)``)
    and to the lower chunk index among equal areas.
    """
    n = len(chunks)
    _check_cp(n, cp_size)
    per_bucket = n // cp_size
    loads = [0] * cp_size
    counts = [0] * cp_size
    assignment = [-1] * n
    heap = [(0, j) for j in range(cp_size)]
    heapq.heapify(heap)
    for chunk in sorted(chunks, key=lambda c: (-c.area, c.index)):
        set_aside = []
        while True:
            load, j = heapq.heappop(heap)
            if counts[j] < per_bucket:
                break
            set_aside.append((load, j))
        assignment[chunk.index] = j
        loads[j] += chunk.area
        counts[j] += 1
        heapq.heappush(heap, (loads[j], j))
        for item in set_aside:
            heapq.heappush(heap, item)
    return DispatchPlan(cp_size, _chunk_size_of(chunks), assignment, _areas_by_index(chunks), loads, "greedy")


def brute_force_dispatch(chunks: Sequence[DispatchChunk], cp_size: int) -> DispatchPlan:
    """Exact minimax assignment by branch and bound. Small instances only."""
    n = len(chunks)
    if n > BRUTE_FORCE_MAX_CHUNKS or cp_size > BRUTE_FORCE_MAX_CP:
        raise ValueError(
            f"brute force limited to n <= {BRUTE_FORCE_MAX_CHUNKS}, cp <= {BRUTE_FORCE_MAX_CP} "
            f"(got n={n}, cp={cp_size})"
        )
    _check_cp(n, cp_size)
    per_bucket = n // cp_size
    order = sorted(chunks, key=lambda c: (-c.area, c.index))
    areas = [c.area for c in order]
    best_val = sum(areas) + 1
    best_assign: list[int] = []
    loads = [0] * cp_size
    counts = [0] * cp_size
    cur = [0] * n

    def search(i: int, cur_max: int) -> None:
        nonlocal best_val, best_assign
        if cur_max >= best_val:
            return
        if i == n:
            best_val = cur_max
            best_assign = cur.copy()
            return
        tried_empty = False
        for j in range(cp_size):
            if counts[j] == per_bucket:
                continue
            if counts[j] == 0:
                # buckets are interchangeable until they receive a chunk
                if tried_empty:
                    continue
                tried_empty = True
            loads[j] += areas[i]
            counts[j] += 1
            cur[i] = j
            search(i + 1, max(cur_max, loads[j]))
            loads[j] -= areas[i]
            counts[j] -= 1

    search(0, 0)
    assignment = [-1] * n
    for pos, c in enumerate(order):
        assignment[c.index] = best_assign[pos]
    return DispatchPlan(cp_size, _chunk_size_of(chunks), assignment, _areas_by_index(chunks), algorithm="brute_force")


def zigzag_dispatch(chunks: Sequence[DispatchChunk], cp_size: int) -> DispatchPlan:
    """Pair chunk ``i`` with ``n-1-i`` and deal the pairs round-robin over ranks."""
    n = len(chunks)
    if cp_size <= 0 or n % (2 * cp_size):
        raise ConstraintViolation("n % (2 × cp_size) = 0", f"n={n}, cp_size={cp_size}")
    assignment = [-1] * n
    for p in range(n // 2):
        rank = p % cp_size
        assignment[p] = rank
        assignment[n - 1 - p] = rank
    return DispatchPlan(cp_size, _chunk_size_of(chunks), assignment, _areas_by_index(chunks), algorithm="zigzag")


def sequential_dispatch(chunks: Sequence[DispatchChunk], cp_size: int) -> DispatchPlan:
    """Contiguous blocks of ``n / cp_size`` chunks per rank."""
    n = len(chunks)
    _check_cp(n, cp_size)
    per = n // cp_size
    assignment = [i // per for i in range(n)]
    return DispatchPlan(cp_size, _chunk_size_of(chunks), assignment, _areas_by_index(chunks), algorithm="sequential")


DISPATCHERS = {
    "greedy": greedy_dispatch,
    "zigzag": zigzag_dispatch,
    "sequential": sequential_dispatch,
    "brute_force": brute_force_dispatch,
}


def local_mask_of_rank(mask: AttnMask, plan: DispatchPlan, rank: int) -> AttnMask:
    if not 0 <= rank < plan.cp_size:
        raise ValueError(f"rank {rank} outside cp_size={plan.cp_size}")
    return restrict_rows(mask, plan.rank_rows(rank))

