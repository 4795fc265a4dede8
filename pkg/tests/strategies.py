"""Hypothesis strategies shared across test modules."""
from hypothesis import strategies as st

from cpplan.mask import AttnMask, AttnSlice, SliceMaskType, TokenRange

KINDS = [t.value for t in SliceMaskType]


def slice_tuples(seqlen: int):
    bound = st.integers(0, seqlen)
    return st.tuples(bound, bound, bound, bound, st.sampled_from(KINDS)).map(
        lambda t: (min(t[0], t[1]), max(t[0], t[1]), min(t[2], t[3]), max(t[2], t[3]), t[4])
    )


def build_mask(seqlen: int, raw) -> AttnMask:
    return AttnMask(
        seqlen, seqlen,
        tuple(AttnSlice(TokenRange(a, b), TokenRange(c, d), SliceMaskType(k)) for a, b, c, d, k in raw),
    )


@st.composite
def mask_and_layout(draw, max_cp: int = 8, max_chunks_per_rank: int = 4, max_chunk: int = 8):
    """A random mask plus a compatible (cp, chunk_size, assignment)."""
    cp = draw(st.integers(1, max_cp))
    per = draw(st.integers(1, max_chunks_per_rank))
    chunk = draw(st.integers(1, max_chunk))
    n = cp * per
    seqlen = n * chunk
    raw = draw(st.lists(slice_tuples(seqlen), max_size=5))
    labels = [r for r in range(cp) for _ in range(per)]
    assignment = draw(st.permutations(labels))
    return build_mask(seqlen, raw), raw, cp, chunk, list(assignment)
