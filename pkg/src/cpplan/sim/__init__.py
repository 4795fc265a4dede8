"""Deterministic timeline simulation of context-parallel attention schedules."""
from .events import COMM, COMPUTE, REDUCE, Simulator, Task, Timeline
from .schedules import (
    SCHEDULES,
    SimReport,
    cso_steps,
    magi_rank_pipeline,
    simulate_cso,
    simulate_magi,
    simulate_ring,
    simulate_ulysses,
)

__all__ = [
    "COMM",
    "COMPUTE",
    "REDUCE",
    "Simulator",
    "Task",
    "Timeline",
    "SCHEDULES",
    "SimReport",
    "cso_steps",
    "magi_rank_pipeline",
    "simulate_cso",
    "simulate_magi",
    "simulate_ring",
    "simulate_ulysses",
]
