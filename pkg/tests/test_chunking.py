import pytest
from hypothesis import given, strategies as st

from chunkattn import advance, layout


def test_layout_exact_division():
    lo = layout(1024, 256)
    assert lo.m == 4
    assert lo.bounds == ((0, 256), (256, 512), (512, 768), (768, 1024))
    assert lo.tail_len == 0


def test_layout_with_remainder():
    lo = layout(1000, 256)
    assert lo.m == 4
    assert lo.m_complete == 3
    assert lo.bounds[-1] == (768, 1000)
    assert lo.tail_len == 232


def test_layout_sub_chunk_input():
    lo = layout(100, 256)
    assert lo.m == 1
    assert lo.bounds == ((0, 100),)


def test_layout_rejects_bad_sizes():
    with pytest.raises(ValueError):
        layout(0, 4)
    with pytest.raises(ValueError):
        layout(4, 0)


def test_advance_seals_on_boundary():
    lo = layout(255, 256)
    lo, sealed = advance(lo, 255)
    assert sealed == 0
    lo, sealed = advance(lo, 256)
    assert sealed is None
    lo = layout(511, 256)
    _, sealed = advance(lo, 511)
    assert sealed == 1


def test_advance_rejects_non_monotonic():
    lo = layout(10, 4)
    with pytest.raises(ValueError, match="non-monotonic"):
        advance(lo, 9)


def test_chunk_of():
    lo = layout(10, 4)
    assert [lo.chunk_of(i) for i in range(10)] == [0, 0, 0, 0, 1, 1, 1, 1, 2, 2]
    with pytest.raises(ValueError):
        lo.chunk_of(10)


@given(n=st.integers(1, 500), l=st.integers(1, 64))
def test_bounds_reconstruct_range(n, l):
    lo = layout(n, l)
    covered = []
    prev_end = 0
    for start, end in lo.bounds:
        assert start == prev_end
        assert end > start
        covered.extend(range(start, end))
        prev_end = end
    assert covered == list(range(n))
    assert all(end - start == l for start, end in lo.bounds[:-1])


@given(n=st.integers(1, 300), l=st.integers(1, 32))
def test_streaming_seal_count(n, l):
    seals = []
    current = layout(1, l)
    # the very first token seals chunk 0 on its own when l == 1
    if current.n % l == 0:
        seals.append(0)
    for idx in range(1, n):
        current, sealed = advance(current, idx)
        if sealed is not None:
            seals.append(sealed)
    assert len(seals) == n // l
    assert seals == list(range(n // l))
