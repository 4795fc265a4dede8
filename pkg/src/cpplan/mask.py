"""Attention masks as compositions of slices.

A slice is a ``(q_range, k_range, mask_type)`` triplet: a rectangle of the
attention matrix with one of four basic shapes inside it. A mask is an ordered
list of slices and admits a ``(q, k)`` pair iff any of its slices does.

Local coordinates inside a slice are ``r = q - q_range.start`` and
``c = k - k_range.start``. With ``lq``/``lk`` the range lengths:

* ``FULL``:       every ``(r, c)``
* ``CAUSAL``:     ``c <= r + (lk - lq)``  (diagonal anchored bottom-right)
* ``INV_CAUSAL``: ``c >= r``              (diagonal anchored top-left)
* ``BI_CAUSAL``:  both of the above, i.e. a band of width ``lk - lq + 1``

Every row of every slice therefore allows a contiguous column interval whose
endpoints move with slope 0 or 1 as the row advances. Area computations exploit
this: the number of allowed pairs in a row block is a piecewise linear function
of the row, so sums are taken piece by piece instead of row by row.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .errors import MaskError

__all__ = [
    "TokenRange",
    "SliceMaskType",
    "AttnSlice",
    "AttnMask",
    "Counting",
    "slice_area",
    "mask_area",
    "region_area",
    "is_allowed",
    "restrict_rows",
    "build_named_mask",
    "NAMED_PATTERNS",
    "merge_ranges",
    "render_ascii",
    "mask_from_dict",
    "mask_to_dict",
]


@dataclass(frozen=True, order=True)
class TokenRange:
    """Half-open token interval ``[start, end)``."""

    start: int
    end: int

    def __post_init__(self) -> None:
        if not (0 <= self.start <= self.end):
            raise MaskError(f"invalid token range [{self.start}, {self.end})")

    def __len__(self) -> int:
        return self.end - self.start

    @property
    def is_empty(self) -> bool:
        return self.end == self.start

    def intersect(self, other: TokenRange) -> TokenRange:
        lo = max(self.start, other.start)
        hi = min(self.end, other.end)
        if hi <= lo:
            return TokenRange(lo, lo) if lo >= 0 else TokenRange(0, 0)
        return TokenRange(lo, hi)

    def overlaps(self, other: TokenRange) -> bool:
        return max(self.start, other.start) < min(self.end, other.end)

    def __contains__(self, idx: object) -> bool:
        return isinstance(idx, int) and self.start <= idx < self.end

    def to_list(self) -> list[int]:
        return [self.start, self.end]

    def __repr__(self) -> str:
        return f"[{self.start}, {self.end})"


class SliceMaskType(str, enum.Enum):
    FULL = "full"
    CAUSAL = "causal"
    INV_CAUSAL = "inv_causal"
    BI_CAUSAL = "bi_causal"


class Counting(str, enum.Enum):
    """How overlapping slices are counted.

    ``MULTIPLICITY`` is what a slice-parallel kernel actually computes;
    ``UNION`` counts distinct allowed pairs.
    """

    MULTIPLICITY = "multiplicity"
    UNION = "union"


@dataclass(frozen=True)
class AttnSlice:
    q_range: TokenRange
    k_range: TokenRange
    mask_type: SliceMaskType = SliceMaskType.FULL

    @property
    def lq(self) -> int:
        return len(self.q_range)

    @property
    def lk(self) -> int:
        return len(self.k_range)

    @property
    def is_empty(self) -> bool:
        return self.lq == 0 or self.lk == 0

    def _endpoints(self) -> tuple[tuple[int, int], tuple[int, int]]:
        # Unclamped column bounds in global coordinates, each as (intercept, slope)
        # so that bound(q) = intercept + slope * q.
        qs, qe = self.q_range.start, self.q_range.end
        ks, ke = self.k_range.start, self.k_range.end
        lo = (ks, 0)
        hi = (ke, 0)
        if self.mask_type in (SliceMaskType.CAUSAL, SliceMaskType.BI_CAUSAL):
            hi = (ke - qe + 1, 1)
        if self.mask_type in (SliceMaskType.INV_CAUSAL, SliceMaskType.BI_CAUSAL):
            lo = (ks - qs, 1)
        return lo, hi

    def row_bounds(self, q: int) -> tuple[int, int]:
        """Allowed global column interval ``[lo, hi)`` for global row ``q``.

        Returns an empty interval (``hi <= lo``) for rows outside the slice.
        """
        if q not in self.q_range:
            return (0, 0)
        (lo_c, lo_s), (hi_c, hi_s) = self._endpoints()
        lo = max(lo_c + lo_s * q, self.k_range.start)
        hi = min(hi_c + hi_s * q, self.k_range.end)
        return lo, hi

    def admits(self, q: int, k: int) -> bool:
        lo, hi = self.row_bounds(q)
        return lo <= k < hi

    def to_dict(self) -> dict[str, Any]:
        return {"q": self.q_range.to_list(), "k": self.k_range.to_list(), "type": self.mask_type.value}


@dataclass(frozen=True)
class AttnMask:
    seqlen_q: int
    seqlen_k: int
    slices: tuple[AttnSlice, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        if self.seqlen_q < 0 or self.seqlen_k < 0:
            raise MaskError("sequence lengths must be non-negative")
        object.__setattr__(self, "slices", tuple(self.slices))
        for i, s in enumerate(self.slices):
            if s.q_range.end > self.seqlen_q or s.k_range.end > self.seqlen_k:
                raise MaskError(
                    f"slice {i} (q={s.q_range}, k={s.k_range}) exceeds mask bounds "
                    f"({self.seqlen_q} x {self.seqlen_k})"
                )

    def area(self, counting: Counting = Counting.UNION) -> int:
        return mask_area(self, counting)

    def is_allowed(self, q: int, k: int) -> bool:
        return is_allowed(self, q, k)

    def to_dense(self) -> np.ndarray:
        """Boolean ``(seqlen_q, seqlen_k)`` matrix; only sensible for small masks."""
        dense = np.zeros((self.seqlen_q, self.seqlen_k), dtype=bool)
        for s in self.slices:
            for q in range(s.q_range.start, s.q_range.end):
                lo, hi = s.row_bounds(q)
                if hi > lo:
                    dense[q, lo:hi] = True
        return dense


def _sum_positive(offset: int, n: int) -> int:
    # sum_{r=0}^{n-1} max(0, r + offset)
    first = max(0, 1 - offset)
    if first >= n:
        return 0
    count = n - first
    return count * ((first + offset) + (n - 1 + offset)) // 2


def slice_area(s: AttnSlice) -> int:
    """Number of allowed ``(q, k)`` pairs inside one slice."""
    lq, lk = s.lq, s.lk
    if lq == 0 or lk == 0:
        return 0
    t = s.mask_type
    if t is SliceMaskType.FULL:
        return lq * lk
    if t is SliceMaskType.CAUSAL:
        # row r admits min(lk, r + lk - lq + 1) columns; the min never binds
        return _sum_positive(lk - lq + 1, lq)
    if t is SliceMaskType.INV_CAUSAL:
        m = min(lq, lk)
        return m * lk - m * (m - 1) // 2
    return lq * max(0, lk - lq + 1)


def _union_row_length(active: Sequence[AttnSlice], q: int, cols: TokenRange) -> int:
    spans = []
    for s in active:
        lo, hi = s.row_bounds(q)
        lo = max(lo, cols.start)
        hi = min(hi, cols.end)
        if hi > lo:
            spans.append((lo, hi))
    if not spans:
        return 0
    spans.sort()
    total = 0
    cur_lo, cur_hi = spans[0]
    for lo, hi in spans[1:]:
        if lo > cur_hi:
            total += cur_hi - cur_lo
            cur_lo, cur_hi = lo, hi
        elif hi > cur_hi:
            cur_hi = hi
    return total + cur_hi - cur_lo


def _union_area(slices: Sequence[AttnSlice], rows: TokenRange, cols: TokenRange) -> int:
    relevant = [
        s
        for s in slices
        if not s.is_empty and s.q_range.overlaps(rows) and s.k_range.overlaps(cols)
    ]
    if not relevant or rows.is_empty or cols.is_empty:
        return 0
    cuts = {rows.start, rows.end}
    for s in relevant:
        for b in (s.q_range.start, s.q_range.end):
            if rows.start < b < rows.end:
                cuts.add(b)
    cuts_sorted = sorted(cuts)
    total = 0
    for seg_lo, seg_hi in zip(cuts_sorted, cuts_sorted[1:]):
        active = [s for s in relevant if s.q_range.start <= seg_lo and seg_hi <= s.q_range.end]
        if not active:
            continue
        # Within the segment, the union length is linear between rows where a
        # slope-1 endpoint meets a constant bound. Slopes differ by exactly one,
        # so every such crossing is an integer row.
        consts = {cols.start, cols.end}
        sloped = set()
        for s in active:
            consts.update((s.k_range.start, s.k_range.end))
            for c, slope in s._endpoints():
                (sloped if slope else consts).add(c)
        pieces = {seg_lo, seg_hi}
        for c0 in consts:
            for c1 in sloped:
                x = c0 - c1
                if seg_lo < x < seg_hi:
                    pieces.add(x)
        ps = sorted(pieces)
        for a, b in zip(ps, ps[1:]):
            n = b - a
            f0 = _union_row_length(active, a, cols)
            if n == 1:
                total += f0
            else:
                f1 = _union_row_length(active, b - 1, cols)
                total += (f0 + f1) * n // 2
    return total


def region_area(
    mask: AttnMask,
    rows: TokenRange,
    cols: TokenRange | None = None,
    counting: Counting = Counting.UNION,
) -> int:
    """Allowed pairs with query in ``rows`` and key in ``cols``."""
    if cols is None:
        cols = TokenRange(0, mask.seqlen_k)
    if counting is Counting.UNION:
        return _union_area(mask.slices, rows, cols)
    return sum(_union_area((s,), rows, cols) for s in mask.slices)


def mask_area(mask: AttnMask, counting: Counting = Counting.UNION) -> int:
    if counting is Counting.MULTIPLICITY:
        return sum(slice_area(s) for s in mask.slices)
    return _union_area(mask.slices, TokenRange(0, mask.seqlen_q), TokenRange(0, mask.seqlen_k))


def is_allowed(mask: AttnMask, q: int, k: int) -> bool:
    if not (0 <= q < mask.seqlen_q and 0 <= k < mask.seqlen_k):
        raise IndexError(f"({q}, {k}) outside mask of shape ({mask.seqlen_q}, {mask.seqlen_k})")
    return any(s.admits(q, k) for s in mask.slices)


def merge_ranges(ranges: Iterable[TokenRange]) -> list[TokenRange]:
    """Sort and coalesce touching or overlapping ranges, dropping empty ones."""
    out: list[TokenRange] = []
    for r in sorted(r for r in ranges if not r.is_empty):
        if out and r.start <= out[-1].end:
            if r.end > out[-1].end:
                out[-1] = TokenRange(out[-1].start, r.end)
        else:
            out.append(r)
    return out


def _clip_slice(s: AttnSlice, rows: TokenRange) -> AttnSlice | None:
    qs, qe = s.q_range.start, s.q_range.end
    a, b = max(qs, rows.start), min(qe, rows.end)
    if a >= b:
        return None
    ks, ke = s.k_range.start, s.k_range.end
    t = s.mask_type
    # Keep each diagonal anchored where it was by trimming the key range by the
    # number of rows cut from the anchoring side.
    if t in (SliceMaskType.CAUSAL, SliceMaskType.BI_CAUSAL):
        ke -= qe - b
    if t in (SliceMaskType.INV_CAUSAL, SliceMaskType.BI_CAUSAL):
        ks += a - qs
    if ke <= ks:
        return None
    return AttnSlice(TokenRange(a, b), TokenRange(ks, ke), t)


def restrict_rows(mask: AttnMask, rows: Iterable[TokenRange]) -> AttnMask:
    """Mask over the same key space keeping only the given query rows."""
    ordered = sorted(r for r in rows if not r.is_empty)
    for prev, cur in zip(ordered, ordered[1:]):
        if prev.overlaps(cur):
            raise MaskError(f"row ranges {prev} and {cur} overlap")
    for r in ordered:
        if r.end > mask.seqlen_q:
            raise MaskError(f"row range {r} exceeds seqlen_q={mask.seqlen_q}")
    out = []
    for r in merge_ranges(ordered):
        for s in mask.slices:
            clipped = _clip_slice(s, r)
            if clipped is not None:
                out.append(clipped)
    return AttnMask(mask.seqlen_q, mask.seqlen_k, tuple(out))


# -- named patterns ----------------------------------------------------------


def _full(seqlen: int) -> list[AttnSlice]:
    r = TokenRange(0, seqlen)
    return [AttnSlice(r, r, SliceMaskType.FULL)]


def _causal(seqlen: int) -> list[AttnSlice]:
    r = TokenRange(0, seqlen)
    return [AttnSlice(r, r, SliceMaskType.CAUSAL)]


def _offsets(lengths: Sequence[int]) -> list[tuple[int, int]]:
    out, pos = [], 0
    for n in lengths:
        if n < 0:
            raise MaskError(f"negative sample length {n}")
        out.append((pos, pos + n))
        pos += n
    return out


def _varlen(lengths: Sequence[int], kind: SliceMaskType) -> list[AttnSlice]:
    return [
        AttnSlice(TokenRange(s, e), TokenRange(s, e), kind)
        for s, e in _offsets(lengths)
        if e > s
    ]


def _sliding_window(seqlen: int, window: int) -> list[AttnSlice]:
    if window <= 0:
        raise MaskError(f"window must be positive, got {window}")
    if window >= seqlen:
        return _causal(seqlen)
    head = TokenRange(0, window)
    out = [AttnSlice(head, head, SliceMaskType.CAUSAL)]
    # rows [w, s) see keys [q - w + 1, q]: a band over keys [1, s)
    out.append(AttnSlice(TokenRange(window, seqlen), TokenRange(1, seqlen), SliceMaskType.BI_CAUSAL))
    return out


def _block_causal_sample(start: int, end: int, block: int) -> list[AttnSlice]:
    if (end - start) % block:
        raise MaskError(f"block size {block} does not divide sample length {end - start}")
    return [
        AttnSlice(TokenRange(b, b + block), TokenRange(start, b + block), SliceMaskType.FULL)
        for b in range(start, end, block)
    ]


def _varlen_block_causal(lengths: Sequence[int], block: int, last_global: bool) -> list[AttnSlice]:
    if block <= 0:
        raise MaskError(f"block size must be positive, got {block}")
    spans = [(s, e) for s, e in _offsets(lengths) if e > s]
    out: list[AttnSlice] = []
    if not spans:
        return out
    total = spans[-1][1]
    g_start = total - block
    for s, e in spans:
        blocks = _block_causal_sample(s, e, block)
        if not last_global:
            out.extend(blocks)
            continue
        for sl in blocks:
            out.append(sl)
            # the final block is already inside the last query block's causal span
            if sl.k_range.end <= g_start:
                out.append(AttnSlice(sl.q_range, TokenRange(g_start, total), SliceMaskType.FULL))
    return out


NAMED_PATTERNS = (
    "full",
    "causal",
    "varlen_full",
    "varlen_causal",
    "sliding_window_causal",
    "block_causal",
    "varlen_block_causal",
    "varlen_block_causal_last_global",
)


def _seqlen_param(params: Mapping[str, Any]) -> int:
    if "seqlen" in params:
        return int(params["seqlen"])
    if "lengths" in params:
        return sum(int(x) for x in params["lengths"])
    raise MaskError("pattern needs 'seqlen' or 'lengths'")


def build_named_mask(pattern: str, params: Mapping[str, Any]) -> AttnMask:
    """Build one of the canonical patterns; every builder emits disjoint slices.

    ``params`` keys: ``seqlen`` (or ``lengths`` for varlen patterns),
    ``block`` for block-causal patterns, ``window`` for sliding windows.
    """
    if pattern not in NAMED_PATTERNS:
        raise MaskError(f"unknown pattern {pattern!r}; expected one of {', '.join(NAMED_PATTERNS)}")
    params = dict(params)
    if pattern.startswith("varlen"):
        lengths = [int(x) for x in params.get("lengths", [params["seqlen"]] if "seqlen" in params else [])]
        if not lengths:
            raise MaskError(f"pattern {pattern!r} needs 'lengths'")
        seqlen = sum(lengths)
        if "seqlen" in params and int(params["seqlen"]) != seqlen:
            raise MaskError(f"sample lengths sum to {seqlen}, but seqlen={params['seqlen']}")
    else:
        seqlen = _seqlen_param(params)
    if seqlen < 0:
        raise MaskError("seqlen must be non-negative")

    if pattern == "full":
        slices = _full(seqlen)
    elif pattern == "causal":
        slices = _causal(seqlen)
    elif pattern == "varlen_full":
        slices = _varlen(lengths, SliceMaskType.FULL)
    elif pattern == "varlen_causal":
        slices = _varlen(lengths, SliceMaskType.CAUSAL)
    elif pattern == "sliding_window_causal":
        slices = _sliding_window(seqlen, int(params.get("window", 0)))
    elif pattern == "block_causal":
        block = int(params.get("block", 0))
        if block <= 0:
            raise MaskError(f"block size must be positive, got {block}")
        slices = _block_causal_sample(0, seqlen, block)
    else:
        slices = _varlen_block_causal(
            lengths, int(params.get("block", 0)), pattern.endswith("last_global")
        )
    if seqlen == 0:
        slices = []
    return AttnMask(seqlen, seqlen, tuple(slices))


# -- serialization and rendering --------------------------------------------


def render_ascii(mask: AttnMask, limit: int = 128) -> str:
    if max(mask.seqlen_q, mask.seqlen_k) > limit:
        raise MaskError(f"mask too large to render ({mask.seqlen_q} x {mask.seqlen_k} > {limit})")
    dense = mask.to_dense()
    return "\n".join("".join("#" if v else "." for v in row) for row in dense)


def _parse_range(value: Any, what: str) -> TokenRange:
    if not isinstance(value, (list, tuple)) or len(value) != 2:
        raise MaskError(f"{what}: expected [start, end], got {value!r}")
    return TokenRange(int(value[0]), int(value[1]))


def mask_from_dict(data: Mapping[str, Any]) -> AttnMask:
    """Parse ``{pattern, params}`` or ``{slices: [...]}`` (seqlens required for slices)."""
    if "pattern" in data:
        params = dict(data.get("params", {}))
        for key in ("seqlen", "lengths", "block", "window"):
            if key in data and key not in params:
                params[key] = data[key]
        return build_named_mask(str(data["pattern"]), params)
    if "slices" not in data:
        raise MaskError("mask config needs either 'pattern' or 'slices'")
    try:
        seqlen_q = int(data["seqlen_q"]) if "seqlen_q" in data else int(data["seqlen"])
        seqlen_k = int(data["seqlen_k"]) if "seqlen_k" in data else seqlen_q
    except KeyError:
        raise MaskError("mask config with explicit slices needs 'seqlen' or 'seqlen_q'") from None
    slices = []
    for i, raw in enumerate(data["slices"]):
        try:
            q = _parse_range(raw["q"], f"slice {i} q")
            k = _parse_range(raw["k"], f"slice {i} k")
            t = SliceMaskType(str(raw.get("type", "full")).lower())
        except (KeyError, ValueError, TypeError) as exc:
            raise MaskError(f"slice {i}: {exc}") from None
        slices.append(AttnSlice(q, k, t))
    return AttnMask(seqlen_q, seqlen_k, tuple(slices))


def mask_to_dict(mask: AttnMask) -> dict[str, Any]:
    return {
        "seqlen_q": mask.seqlen_q,
        "seqlen_k": mask.seqlen_k,
        "slices": [s.to_dict() for s in mask.slices],
    }
