"""Context-parallel attention planning: masks, dispatch, communication, overlap and simulation."""
from .comm import (
    TransferTable,
    build_transfer_tables,
    compute_kv_demands,
    redundancy_report,
    ring_baseline_volume,
)
from .dispatch import (
    DispatchPlan,
    brute_force_dispatch,
    greedy_dispatch,
    shard_into_chunks,
    zigzag_dispatch,
)
from .errors import ConfigError, ConstraintViolation, InvariantError, MaskError, PlannerError
from .mask import AttnMask, AttnSlice, Counting, SliceMaskType, TokenRange, build_named_mask, mask_area
from .metrics import WorkloadSpec, balance_summary, flops, named_area, throughput
from .overlap import CostModel, OverlapParams, estimate_bwd_cost, estimate_fwd_cost, solve_stages
from .packing import OnlinePacker, PackingConfig, pack_iteration

__version__ = "0.1.0"

__all__ = [
    "AttnMask",
    "AttnSlice",
    "ConfigError",
    "ConstraintViolation",
    "CostModel",
    "Counting",
    "DispatchPlan",
    "InvariantError",
    "MaskError",
    "OnlinePacker",
    "OverlapParams",
    "PackingConfig",
    "PlannerError",
    "SliceMaskType",
    "TokenRange",
    "TransferTable",
    "WorkloadSpec",
    "balance_summary",
    "brute_force_dispatch",
    "build_named_mask",
    "build_transfer_tables",
    "compute_kv_demands",
    "estimate_bwd_cost",
    "estimate_fwd_cost",
    "flops",
    "greedy_dispatch",
    "mask_area",
    "named_area",
    "pack_iteration",
    "redundancy_report",
    "ring_baseline_volume",
    "shard_into_chunks",
    "solve_stages",
    "throughput",
    "zigzag_dispatch",
]
