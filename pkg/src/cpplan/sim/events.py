"""A small deterministic discrete-event executor for per-rank streams.

Every rank owns a few in-order streams. A task starts once its stream is idle
and every task it depends on has finished; it then runs to completion without
preemption. Completions are processed in ``(time, rank, stream, task id)``
order, so identical submissions always produce identical timelines.
"""
from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from typing import Iterable

from ..errors import InvariantError

COMPUTE = "compute"
COMM = "comm"
REDUCE = "reduce"
STREAM_ORDER = {COMPUTE: 0, COMM: 1, REDUCE: 2}


@dataclass
class Task:
    tid: int
    rank: int
    stream: str
    name: str
    duration: int
    deps: tuple[int, ...] = ()
    volume: int = 0
    start: int | None = None
    end: int | None = None

    @property
    def is_compute(self) -> bool:
        return self.stream == COMPUTE


@dataclass
class Timeline:
    tasks: list[Task] = field(default_factory=list)

    @property
    def makespan(self) -> int:
        return max((t.end for t in self.tasks if t.end is not None), default=0)

    def ranks(self) -> list[int]:
        return sorted({t.rank for t in self.tasks})

    def rank_end(self, rank: int) -> int:
        return max((t.end for t in self.tasks if t.rank == rank), default=0)

    def busy(self, rank: int, stream: str = COMPUTE) -> int:
        return sum(t.duration for t in self.tasks if t.rank == rank and t.stream == stream)

    def volume(self, stream: str) -> int:
        return sum(t.volume for t in self.tasks if t.stream == stream)

    def events(self) -> list[tuple[int, int, int, str, str]]:
        """``(start, end, rank, stream, name)`` sorted by start then rank."""
        return sorted(
            (t.start, t.end, t.rank, t.stream, t.name) for t in self.tasks if t.start is not None
        )


class Simulator:
    def __init__(self) -> None:
        self._tasks: list[Task] = []
        self._queues: dict[tuple[int, str], list[int]] = {}

    def submit(
        self,
        rank: int,
        stream: str,
        name: str,
        duration: int,
        deps: Iterable[int] = (),
        volume: int = 0,
    ) -> int:
        if stream not in STREAM_ORDER:
            raise ValueError(f"unknown stream {stream!r}")
        if duration < 0:
            raise ValueError(f"negative duration for {name}")
        tid = len(self._tasks)
        deps = tuple(deps)
        if any(d >= tid for d in deps):
            raise ValueError(f"task {name} depends on a task not yet submitted")
        self._tasks.append(Task(tid, rank, stream, name, int(duration), deps, volume))
        self._queues.setdefault((rank, stream), []).append(tid)
        return tid

    def run(self) -> Timeline:
        tasks = self._tasks
        done = [False] * len(tasks)
        heads = {key: 0 for key in self._queues}
        busy = {key: False for key in self._queues}
        order = sorted(self._queues, key=lambda k: (k[0], STREAM_ORDER[k[1]]))
        pending: list[tuple[int, int, int, int]] = []
        now = 0
        finished = 0

        def try_start() -> None:
            for key in order:
                if busy[key]:
                    continue
                q = self._queues[key]
                i = heads[key]
                if i >= len(q):
                    continue
                t = tasks[q[i]]
                if all(done[d] for d in t.deps):
                    t.start = now
                    t.end = now + t.duration
                    busy[key] = True
                    heads[key] = i + 1
                    heapq.heappush(pending, (t.end, t.rank, STREAM_ORDER[t.stream], t.tid))

        try_start()
        while pending:
            now, _, _, tid = heapq.heappop(pending)
            t = tasks[tid]
            done[tid] = True
            busy[(t.rank, t.stream)] = False
            finished += 1
            try_start()
        if finished != len(tasks):
            stuck = [t.name for t in tasks if not done[t.tid]][:5]
            raise InvariantError(f"simulation deadlocked; unfinished tasks include {stuck}")
        return Timeline(list(tasks))
