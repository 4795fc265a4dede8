"""Key/value demand analysis and group-cast / group-reduce transfer tables.

Keys and values are hosted on the rank that owns the same chunk's queries.
A remote rank *consumes* a KV chunk when at least one of its query rows attends
at least one key of that chunk. Group-cast sends each chunk to exactly its
consumers; group-reduce returns the partial dKV from those same consumers to
the host. The ring baseline, by contrast, circulates every shard to every rank.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Any, Iterable

from .dispatch import DispatchPlan
from .errors import PlannerError
from .mask import AttnMask, TokenRange, region_area

__all__ = [
    "KvDemand",
    "Direction",
    "TransferEntry",
    "TransferTable",
    "RedundancyReport",
    "compute_kv_demands",
    "build_transfer_tables",
    "ring_baseline_volume",
    "redundancy_report",
]


@dataclass(frozen=True)
class KvDemand:
    kv_chunk: int
    host_rank: int
    consumers: frozenset[int]


class Direction(str, enum.Enum):
    GROUP_CAST = "group_cast"
    GROUP_REDUCE = "group_reduce"


@dataclass(frozen=True)
class TransferEntry:
    """One token range on ``host`` exchanged with every rank in ``peers``.

    For group-cast the host sends KV to the peers; for group-reduce the peers
    send partial dKV back and the host reduces.
    """

    tokens: TokenRange
    host: int
    peers: tuple[int, ...]

    @property
    def volume(self) -> int:
        return len(self.tokens) * len(self.peers)


@dataclass
class TransferTable:
    direction: Direction
    cp_size: int
    entries: dict[int, list[TransferEntry]] = field(default_factory=dict)

    def all_entries(self) -> list[TransferEntry]:
        return [e for host in sorted(self.entries) for e in self.entries[host]]

    @property
    def total_volume(self) -> int:
        """Token-transfers: each token counted once per destination."""
        return sum(e.volume for e in self.all_entries())

    def send_tokens(self) -> list[int]:
        out = [0] * self.cp_size
        for e in self.all_entries():
            if self.direction is Direction.GROUP_CAST:
                out[e.host] += e.volume
            else:
                for p in e.peers:
                    out[p] += len(e.tokens)
        return out

    def recv_tokens(self) -> list[int]:
        out = [0] * self.cp_size
        for e in self.all_entries():
            if self.direction is Direction.GROUP_CAST:
                for p in e.peers:
                    out[p] += len(e.tokens)
            else:
                out[e.host] += e.volume
        return out

    def remote_ranges(self, rank: int) -> list[TokenRange]:
        """Token ranges ``rank`` receives (cast) or sends back (reduce), sorted."""
        return sorted(e.tokens for e in self.all_entries() if rank in e.peers)

    def transpose(self) -> TransferTable:
        flipped = Direction.GROUP_REDUCE if self.direction is Direction.GROUP_CAST else Direction.GROUP_CAST
        return TransferTable(flipped, self.cp_size, {h: list(es) for h, es in self.entries.items()})

    def structure(self) -> list[tuple[int, int, int, tuple[int, ...]]]:
        return [(e.host, e.tokens.start, e.tokens.end, e.peers) for e in self.all_entries()]

    def to_dict(self, bytes_per_token: int | None = None) -> dict[str, Any]:
        d: dict[str, Any] = {
            "direction": self.direction.value,
            "cp_size": self.cp_size,
            "entries": {
                str(h): [[e.tokens.start, e.tokens.end, list(e.peers)] for e in self.entries[h]]
                for h in sorted(self.entries)
            },
            "send_tokens": self.send_tokens(),
            "recv_tokens": self.recv_tokens(),
            "total_token_transfers": self.total_volume,
        }
        if bytes_per_token is not None:
            d["total_bytes"] = self.total_volume * bytes_per_token
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> TransferTable:
        entries = {
            int(h): [TransferEntry(TokenRange(int(s), int(e)), int(h), tuple(int(p) for p in peers)) for s, e, peers in rows]
            for h, rows in d["entries"].items()
        }
        return cls(Direction(d["direction"]), int(d["cp_size"]), entries)


@dataclass(frozen=True)
class RedundancyReport:
    """Communication volumes in chunk-transfers (one chunk sent to one rank)."""

    sent_ring: int
    needed: int
    sent_group: int
    chunk_size: int

    @property
    def redundancy_ratio(self) -> float:
        if self.sent_ring == 0:
            return 0.0
        return (self.sent_ring - self.needed) / self.sent_ring

    def to_dict(self) -> dict[str, Any]:
        return {
            "unit": "chunk_transfers",
            "chunk_size": self.chunk_size,
            "sent_ring": self.sent_ring,
            "needed": self.needed,
            "sent_group": self.sent_group,
            "redundancy_ratio": self.redundancy_ratio,
        }


def _check_compatible(mask: AttnMask, plan: DispatchPlan) -> None:
    if mask.seqlen_q != plan.seqlen or mask.seqlen_k != mask.seqlen_q:
        raise PlannerError(
            f"mask ({mask.seqlen_q} x {mask.seqlen_k}) does not match plan over {plan.seqlen} tokens; "
            "KV hosting requires seqlen_q == seqlen_k == plan length"
        )


def _chunk_span(r: TokenRange, chunk_size: int) -> range:
    if r.is_empty:
        return range(0)
    return range(r.start // chunk_size, (r.end - 1) // chunk_size + 1)


def chunk_pair_hits(mask: AttnMask, chunk_size: int) -> set[tuple[int, int]]:
    """``(q_chunk, k_chunk)`` pairs with at least one allowed pair between them."""
    hits: set[tuple[int, int]] = set()
    for s in mask.slices:
        if s.is_empty:
            continue
        single = AttnMask(mask.seqlen_q, mask.seqlen_k, (s,))
        for qc in _chunk_span(s.q_range, chunk_size):
            rows = TokenRange(qc * chunk_size, (qc + 1) * chunk_size)
            for kc in _chunk_span(s.k_range, chunk_size):
                if (qc, kc) in hits:
                    continue
                cols = TokenRange(kc * chunk_size, (kc + 1) * chunk_size)
                if region_area(single, rows, cols) > 0:
                    hits.add((qc, kc))
    return hits


def compute_kv_demands(mask: AttnMask, plan: DispatchPlan) -> list[KvDemand]:
    _check_compatible(mask, plan)
    consumers: list[set[int]] = [set() for _ in range(plan.num_chunks)]
    for qc, kc in chunk_pair_hits(mask, plan.chunk_size):
        rank = plan.assignment[qc]
        if rank != plan.assignment[kc]:
            consumers[kc].add(rank)
    return [KvDemand(c, plan.assignment[c], frozenset(consumers[c])) for c in range(plan.num_chunks)]


def build_transfer_tables(
    demands: Iterable[KvDemand], chunk_size: int, cp_size: int
) -> tuple[TransferTable, TransferTable]:
    per_host: dict[int, list[TransferEntry]] = {}
    for d in sorted(demands, key=lambda d: d.kv_chunk):
        if not d.consumers:
            continue
        rng = TokenRange(d.kv_chunk * chunk_size, (d.kv_chunk + 1) * chunk_size)
        peers = tuple(sorted(d.consumers))
        entries = per_host.setdefault(d.host_rank, [])
        if entries and entries[-1].peers == peers and entries[-1].tokens.end == rng.start:
            entries[-1] = TransferEntry(TokenRange(entries[-1].tokens.start, rng.end), d.host_rank, peers)
        else:
            entries.append(TransferEntry(rng, d.host_rank, peers))
    cast = TransferTable(Direction.GROUP_CAST, cp_size, per_host)
    return cast, cast.transpose()


def ring_baseline_volume(plan: DispatchPlan) -> int:
    """Chunk-transfers when every shard travels ``cp_size - 1`` hops."""
    return (plan.cp_size - 1) * plan.num_chunks


def redundancy_report(mask: AttnMask, plan: DispatchPlan) -> RedundancyReport:
    demands = compute_kv_demands(mask, plan)
    needed = sum(len(d.consumers) for d in demands)
    cast, _ = build_transfer_tables(demands, plan.chunk_size, plan.cp_size)
    return RedundancyReport(
        sent_ring=ring_baseline_volume(plan),
        needed=needed,
        sent_group=cast.total_volume // plan.chunk_size if plan.chunk_size else 0,
        chunk_size=plan.chunk_size,
    )

