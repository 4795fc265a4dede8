"""Online sequence packing into fixed-capacity bins.

Each iteration takes a sorted view of the candidate pool, places samples by
first-fit decreasing into ``N`` bins of ``max_length`` tokens, then tries
single swaps between placed and unplaced samples to top up under-filled bins.
Placed samples leave the pool; the rest keep their arrival order.
"""
from __future__ import annotations

import bisect
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Iterable, Iterator, Mapping, Sequence, TextIO

import numpy as np

from .errors import ConfigError, ConstraintViolation

__all__ = [
    "Sample",
    "PackingConfig",
    "PackedBatch",
    "UtilizationStats",
    "pack_iteration",
    "first_fit",
    "utilization_stats",
    "OnlinePacker",
    "lognormal_stream",
    "read_stream",
]

log = logging.getLogger(__name__)

Sample = tuple[str, int]

DP_CONSTRAINT = "N % dp_size = 0"
LENGTH_CONSTRAINT = "max_length % (tp_size × cp_size) = 0"
POOL_CONSTRAINT = "pool_capacity >= pool_factor × N"


@dataclass(frozen=True)
class PackingConfig:
    max_length: int
    bins_per_iteration: int
    pool_capacity: int
    dp_size: int = 1
    tp_size: int = 1
    cp_size: int = 1
    pool_factor: int = 4
    starvation_threshold: float = 0.5
    swap_passes: int = 2
    token_reserve: float = 2.0

    def __post_init__(self) -> None:
        for name in ("max_length", "bins_per_iteration", "pool_capacity", "dp_size", "tp_size", "cp_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.bins_per_iteration % self.dp_size:
            raise ConstraintViolation(
                DP_CONSTRAINT, f"N={self.bins_per_iteration}, dp_size={self.dp_size}"
            )
        if self.max_length % (self.tp_size * self.cp_size):
            raise ConstraintViolation(
                LENGTH_CONSTRAINT, f"max_length={self.max_length}, tp={self.tp_size}, cp={self.cp_size}"
            )
        if self.pool_capacity < self.pool_factor * self.bins_per_iteration:
            raise ConstraintViolation(
                POOL_CONSTRAINT,
                f"M={self.pool_capacity}, N={self.bins_per_iteration}, factor={self.pool_factor}",
            )
        if not 0.0 <= self.starvation_threshold <= 1.0:
            raise ConfigError("starvation_threshold must lie in [0, 1]")
        if self.token_reserve < 0:
            raise ConfigError("token_reserve must be >= 0")

    @property
    def iteration_tokens(self) -> int:
        return self.bins_per_iteration * self.max_length

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> PackingConfig:
        aliases = {"N": "bins_per_iteration", "M": "pool_capacity", "capacity": "max_length"}
        known = set(cls.__dataclass_fields__)
        kw: dict[str, Any] = {}
        for k, v in d.items():
            key = aliases.get(k, k)
            if key not in known:
                raise ConfigError(f"unknown packing key {k!r}")
            kw[key] = v
        missing = {"max_length", "bins_per_iteration"} - set(kw)
        if missing:
            raise ConfigError(f"packing config missing {sorted(missing)}")
        kw.setdefault("pool_capacity", max(128, 4 * int(kw["bins_per_iteration"])))
        floats = {"starvation_threshold", "token_reserve"}
        return cls(**{k: (float(v) if k in floats else int(v)) for k, v in kw.items()})

    def to_dict(self) -> dict[str, Any]:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass(frozen=True)
class PackedBatch:
    bins: tuple[tuple[Sample, ...], ...]
    max_length: int

    @property
    def fills(self) -> list[int]:
        return [sum(n for _, n in b) for b in self.bins]

    @property
    def utilization(self) -> float:
        return sum(self.fills) / (len(self.bins) * self.max_length)

    def group_fills(self, dp_size: int) -> list[int]:
        """Bins go to DP groups round-robin: bin ``i`` belongs to group ``i % dp_size``."""
        out = [0] * dp_size
        for i, f in enumerate(self.fills):
            out[i % dp_size] += f
        return out

    def to_dict(self) -> dict[str, Any]:
        return {
            "bins": [[[sid, n] for sid, n in b] for b in self.bins],
            "fills": self.fills,
            "utilization": self.utilization,
        }


def _ffd(candidates: Sequence[tuple[int, Sample]], n_bins: int, capacity: int) -> list[list[tuple[int, Sample]]]:
    """First-fit decreasing over ``(pool position, sample)`` pairs."""
    order = sorted(candidates, key=lambda c: (-c[1][1], c[0]))
    bins: list[list[tuple[int, Sample]]] = [[] for _ in range(n_bins)]
    free = [capacity] * n_bins
    smallest = order[-1][1][1] if order else 0
    for item in order:
        length = item[1][1]
        for b in range(n_bins):
            if free[b] >= length:
                bins[b].append(item)
                free[b] -= length
                break
        if max(free) < smallest:
            break
    return bins


def _refine(
    bins: list[list[tuple[int, Sample]]], unplaced: list[tuple[int, Sample]], capacity: int, passes: int
) -> None:
    """Single-swap top-ups, in place.

    For every bin with slack, swap one placed sample for the longest unplaced
    sample that still fits and is strictly longer. Repeats until nothing
    changes or ``passes`` sweeps have run.
    """
    # unplaced kept sorted by (length, pool position) for bisecting
    pool = sorted(unplaced, key=lambda c: (c[1][1], c[0]))
    keys = [(c[1][1], c[0]) for c in pool]
    for _ in range(passes):
        changed = False
        for b in bins:
            slack = capacity - sum(c[1][1] for c in b)
            if slack == 0 or not pool:
                continue
            best = None
            for i, placed in enumerate(b):
                limit = placed[1][1] + slack
                j = bisect.bisect_right(keys, (limit, math.inf)) - 1
                if j < 0 or pool[j][1][1] <= placed[1][1]:
                    continue
                gain = pool[j][1][1] - placed[1][1]
                if best is None or gain > best[0]:
                    best = (gain, i, j)
            if best is None:
                continue
            _, i, j = best
            out = b[i]
            b[i] = pool.pop(j)
            keys.pop(j)
            k = bisect.bisect_left(keys, (out[1][1], out[0]))
            pool.insert(k, out)
            keys.insert(k, (out[1][1], out[0]))
            changed = True
        if not changed:
            break
    unplaced[:] = pool


def pack_iteration(
    pool: Sequence[Sample], config: PackingConfig
) -> tuple[PackedBatch | None, list[Sample]]:
    """Pack one iteration's ``N`` bins from ``pool``.

    Returns ``(None, pool)`` when the pool cannot open ``N`` nonempty bins or
    the mean fill would fall below ``starvation_threshold``.
    """
    cap, n = config.max_length, config.bins_per_iteration
    for sid, length in pool:
        if length > cap:
            raise ValueError(f"sample {sid} has length {length} > max_length {cap}")
        if length < 1:
            raise ValueError(f"sample {sid} has non-positive length {length}")
    pool = list(pool)
    if len(pool) < n:
        return None, pool
    indexed = list(enumerate(pool))
    bins = _ffd(indexed, n, cap)
    placed = {c[0] for b in bins for c in b}
    unplaced = [c for c in indexed if c[0] not in placed]
    _refine(bins, unplaced, cap, config.swap_passes)
    if any(not b for b in bins):
        return None, pool
    batch = PackedBatch(tuple(tuple(s for _, s in sorted(b, key=lambda c: (-c[1][1], c[0]))) for b in bins), cap)
    if batch.utilization < config.starvation_threshold:
        return None, pool
    used = {c[0] for b in bins for c in b}
    return batch, [s for i, s in enumerate(pool) if i not in used]


def first_fit(pool: Sequence[Sample], n_bins: int, capacity: int) -> PackedBatch:
    """Arrival-order first fit with no sorting; the baseline for comparisons."""
    bins: list[list[Sample]] = [[] for _ in range(n_bins)]
    free = [capacity] * n_bins
    for s in pool:
        for b in range(n_bins):
            if free[b] >= s[1]:
                bins[b].append(s)
                free[b] -= s[1]
                break
    return PackedBatch(tuple(tuple(b) for b in bins), capacity)


@dataclass(frozen=True)
class UtilizationStats:
    batches: int
    mean: float
    min: float
    dp_spread: float

    def to_dict(self) -> dict[str, Any]:
        return {"batches": self.batches, "mean": self.mean, "min": self.min, "dp_spread": self.dp_spread}


def utilization_stats(history: Sequence[PackedBatch], dp_size: int = 1) -> UtilizationStats:
    """Mean and worst batch utilization plus the largest DP-group fill spread.

    The spread of one batch is ``(max - min) / max`` over its DP-group fills.
    """
    if not history:
        raise ValueError("no batches")
    utils = [b.utilization for b in history]
    spread = 0.0
    for b in history:
        g = b.group_fills(dp_size)
        if max(g) > 0:
            spread = max(spread, (max(g) - min(g)) / max(g))
    return UtilizationStats(len(history), sum(utils) / len(utils), min(utils), spread)


@dataclass
class OnlinePacker:
    """Single owner of the candidate pool; feed samples, pull batches."""

    config: PackingConfig
    pool: list[Sample] = field(default_factory=list)
    history: list[PackedBatch] = field(default_factory=list)
    skipped: list[Sample] = field(default_factory=list)
    _pool_tokens: int = field(default=0, init=False, repr=False)

    def admit(self, sample: Sample) -> bool:
        if sample[1] > self.config.max_length or sample[1] < 1:
            log.warning("skipping sample %s with length %d", sample[0], sample[1])
            self.skipped.append(sample)
            return False
        self.pool.append(sample)
        return True

    def step(self) -> PackedBatch | None:
        batch, self.pool = pack_iteration(self.pool, self.config)
        if batch is not None:
            self.history.append(batch)
        return batch

    def wants_more(self) -> bool:
        """Admission continues until the pool holds ``pool_capacity`` samples
        and ``token_reserve`` iterations' worth of tokens."""
        if len(self.pool) < self.config.pool_capacity:
            return True
        return self._pool_tokens < self.config.token_reserve * self.config.iteration_tokens

    def run(self, stream: Iterable[Sample]) -> Iterator[PackedBatch]:
        """Top up the pool, pack, repeat.

        Once the stream is exhausted, packing continues on the leftovers until
        an iteration defers; whatever remains stays in :attr:`pool`.
        """
        it = iter(stream)
        exhausted = False
        self._pool_tokens = sum(n for _, n in self.pool)
        while True:
            while not exhausted and self.wants_more():
                try:
                    if self.admit(s := next(it)):
                        self._pool_tokens += s[1]
                except StopIteration:
                    exhausted = True
            batch = self.step()
            if batch is not None:
                self._pool_tokens -= sum(batch.fills)
                yield batch
            elif exhausted:
                return
            else:
                # starved with a full pool: force one more admission
                try:
                    if self.admit(s := next(it)):
                        self._pool_tokens += s[1]
                except StopIteration:
                    exhausted = True

    def stats(self) -> UtilizationStats | None:
        return utilization_stats(self.history, self.config.dp_size) if self.history else None


def lognormal_stream(
    count: int, median: float, sigma: float, seed: int = 0, max_length: int | None = None
) -> Iterator[Sample]:
    """Long-tailed lengths: ``round(exp(N(ln median, sigma)))``, at least 1.

    With ``max_length`` set, draws beyond it are clipped to it.
    """
    if count < 0 or median <= 0 or sigma < 0:
        raise ConfigError("lognormal stream needs count >= 0, median > 0, sigma >= 0")
    rng = np.random.default_rng(seed)
    lengths = np.maximum(1, np.rint(rng.lognormal(math.log(median), sigma, size=count))).astype(np.int64)
    if max_length is not None:
        lengths = np.minimum(lengths, max_length)
    width = len(str(max(count - 1, 0)))
    for i, n in enumerate(lengths.tolist()):
        yield (f"s{i:0{width}d}", int(n))


def read_stream(fh: TextIO) -> Iterator[Sample]:
    """Parse ``id length`` records, whitespace or comma separated.

    A line holding only a length gets an id from its line number. Blank lines
    and ``#`` comments are ignored.
    """
    for lineno, raw in enumerate(fh, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.replace(",", " ").split()
        try:
            if len(parts) == 1:
                yield (f"line{lineno}", int(parts[0]))
            elif len(parts) == 2:
                yield (parts[0], int(parts[1]))
            else:
                raise ValueError
        except ValueError:
            raise ConfigError(f"line {lineno}: expected 'id length', got {raw.rstrip()!r}") from None
