"""FLOPs, throughput and balance accounting."""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Any, Mapping, Sequence

from .errors import ConfigError
from .mask import AttnMask, Counting, build_named_mask, mask_area

__all__ = [
    "WorkloadSpec",
    "BalanceSummary",
    "named_area",
    "flops",
    "throughput",
    "balance_summary",
]


@dataclass(frozen=True)
class WorkloadSpec:
    """Attention shape multipliers; defaults follow a 64:8:8 GQA, 128-dim setup."""

    batch_size: int = 1
    num_heads_q: int = 64
    num_heads_k: int = 8
    num_heads_v: int = 8
    head_dim: int = 128
    dtype_bytes: int = 2

    def __post_init__(self) -> None:
        for name in ("batch_size", "num_heads_q", "num_heads_k", "num_heads_v", "head_dim", "dtype_bytes"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"workload {name} must be positive")

    @property
    def kv_bytes_per_token(self) -> int:
        return self.batch_size * (self.num_heads_k + self.num_heads_v) * self.head_dim * self.dtype_bytes

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> WorkloadSpec:
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown workload keys: {sorted(unknown)}")
        return cls(**{k: int(v) for k, v in d.items()})

    def to_dict(self) -> dict[str, int]:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def named_area(pattern: str, seqlen: int, params: Mapping[str, Any] | None = None) -> int:
    """Closed-form mask area where one exists, else the exact slice-union area."""
    params = dict(params or {})
    if pattern == "full":
        return seqlen * seqlen
    if pattern == "causal":
        return seqlen * (seqlen + 1) // 2
    if pattern == "block_causal" and "block" in params:
        b = int(params["block"])
        if b > 0 and seqlen % b == 0:
            nb = seqlen // b
            return nb * b * b * (nb + 1) // 2
    params.setdefault("seqlen", seqlen)
    return mask_area(build_named_mask(pattern, params), Counting.UNION)


def flops(mask: AttnMask, workload: WorkloadSpec, pass_: str = "fwd") -> int:
    """2 matmuls x 2 flops per multiply-add, times 2.5 for the recomputing backward."""
    fwd = 4 * mask_area(mask, Counting.MULTIPLICITY) * workload.batch_size * workload.num_heads_q * workload.head_dim
    if pass_ == "fwd":
        return fwd
    if pass_ == "bwd":
        # fwd is a multiple of 4, so this is exact
        return fwd * 5 // 2
    raise ValueError(f"pass must be 'fwd' or 'bwd', got {pass_!r}")


def throughput(flops_total: int, runtime: int | Fraction, cp_size: int) -> Fraction:
    """Per-GPU rate: flops / (runtime * cp_size), in flops per time unit."""
    if runtime <= 0:
        raise ValueError("runtime must be positive")
    if cp_size < 1:
        raise ValueError("cp_size must be >= 1")
    return Fraction(flops_total) / (Fraction(runtime) * cp_size)


@dataclass(frozen=True)
class BalanceSummary:
    max_workload: int
    mean_workload: Fraction
    imbalance: float

    def to_dict(self) -> dict[str, Any]:
        return {
            "max_workload": self.max_workload,
            "mean_workload": float(self.mean_workload),
            "imbalance": self.imbalance,
        }


def balance_summary(workloads: Sequence[int] | Any) -> BalanceSummary:
    """Summary of bucket workloads; accepts a plan or a plain list of workloads."""
    loads = list(getattr(workloads, "bucket_workloads", workloads))
    if not loads:
        raise ValueError("no workloads")
    mx = max(loads)
    mean = Fraction(sum(loads), len(loads))
    imbalance = 0.0 if mean == 0 else float(Fraction(mx) / mean - 1)
    return BalanceSummary(mx, mean, imbalance)
