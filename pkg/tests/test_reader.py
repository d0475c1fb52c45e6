import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from layoutlab.clustering import reduce_blocks
from layoutlab.domain import BlockExtent, NonDivisible, OutOfBounds, assign_blocks, ground_truth_region, make_dataset, make_grid
from layoutlab.layout import Aggregation, write_chunked, write_contiguous, write_layout, write_subfiled
from layoutlab.reader import (DeviceModel, PatternKind, ReadMetrics, ReadPattern, decompose, default_patterns,
                              divisible_schemes, estimate_read_time, execute_read, factorizations, metrics_ndjson,
                              pattern_region, plan_read, read_region, verify_buffers)

LAYOUTS = ["Contiguous", "Chunked", "Subfiled-FPP", "Subfiled-FPN"]


def _ds(dims=(16, 16, 16), bs=(4, 4, 4), ranks=4, rpn=2, seed=0, ex=0):
    g = make_grid(dims, bs)
    return make_dataset(g, assign_blocks(g, ranks, rpn, seed, ex))


def test_pattern_region_examples():
    big = make_grid((2048, 4096, 4096), (1024, 1024, 1024))
    assert pattern_region(big, ReadPattern.whole()).shape == (2048, 4096, 4096)
    g = make_grid((4, 4, 4), (2, 2, 2))
    assert pattern_region(g, ReadPattern.plane_xy(0)) == BlockExtent((0, 0, 0), (4, 4, 1))
    assert pattern_region(g, ReadPattern.sub_volume((1, 1, 1), (2, 2, 2))) == BlockExtent((1, 1, 1), (2, 2, 2))
    assert pattern_region(g, ReadPattern.plane_yz(3)) == BlockExtent((3, 0, 0), (1, 4, 4))
    assert pattern_region(g, ReadPattern.plane_xz(2)) == BlockExtent((0, 2, 0), (4, 1, 4))
    assert pattern_region(g, ReadPattern.line_z(1, 2)) == BlockExtent((1, 2, 0), (1, 1, 4))


@pytest.mark.parametrize("pattern", [ReadPattern.plane_yz(4), ReadPattern.line_z(0, -1),
                                     ReadPattern.sub_volume((3, 3, 3), (2, 2, 2))])
def test_pattern_region_out_of_bounds(pattern):
    with pytest.raises(OutOfBounds):
        pattern_region(make_grid((4, 4, 4), (2, 2, 2)), pattern)


def test_default_patterns_are_the_six_kinds():
    pats = default_patterns(make_grid((8, 8, 8), (2, 2, 2)))
    assert [p.kind for p in pats] == list(PatternKind)


def test_decompose_examples():
    whole = BlockExtent((0, 0, 0), (2048, 4096, 4096))
    halves = decompose(whole, (1, 1, 2))
    assert [h.offset for h in halves] == [(0, 0, 0), (0, 0, 2048)]
    assert all(h.shape == (2048, 4096, 2048) for h in halves)
    r = BlockExtent((3, 1, 2), (5, 7, 9))
    assert decompose(r, (1, 1, 1)) == [r]
    two = decompose(BlockExtent((0, 0, 0), (4, 4, 4)), (2, 1, 1))
    assert [p.offset[0] for p in two] == [0, 2] and all(p.shape == (2, 4, 4) for p in two)


def test_decompose_non_divisible():
    with pytest.raises(NonDivisible):
        decompose(BlockExtent((0, 0, 0), (3, 4, 4)), (2, 1, 1))


def test_factorizations_oracle():
    for n in range(1, 13):
        brute = {(a, b, c) for a in range(1, n + 1) for b in range(1, n + 1) for c in range(1, n + 1) if a * b * c == n}
        assert set(factorizations(n)) == brute


def test_divisible_schemes_filters():
    assert divisible_schemes(BlockExtent((0, 0, 0), (1, 1, 8)), 4) == [(1, 1, 4)]


def test_contiguous_whole_domain_single_segment(tmp_path):
    m = write_contiguous(_ds(), tmp_path / "c")
    plan = plan_read(m, m.grid.extent)
    assert len(plan.segments) == 1 and plan.chunks_touched == 1


def test_chunked_plane_and_line_counts(tmp_path):
    m = write_chunked(_ds(), tmp_path / "k")
    g = m.grid
    assert plan_read(m, pattern_region(g, ReadPattern.plane_yz(0))).chunks_touched == 16
    line = plan_read(m, pattern_region(g, ReadPattern.line_z(0, 0)))
    assert line.chunks_touched == 4 and len(line.segments) == 4


def test_empty_plan_gives_empty_metrics(tmp_path):
    m = write_chunked(_ds(), tmp_path / "k")
    empty = BlockExtent((0, 0, 0), (0, 4, 4))
    buf, met = execute_read(plan_read(m, empty))
    assert buf.size == 0
    assert met == ReadMetrics()


def test_subfiles_opened_counts_distinct_files(tmp_path):
    ds = _ds((8, 4, 4), (4, 4, 4), ranks=2, rpn=1)
    m = write_subfiled(ds, Aggregation.FPP, tmp_path / "s")
    [(_, buf, met)] = read_region(m, m.grid.extent, (1, 1, 1))
    assert met.subfiles_opened == 2
    assert buf.tobytes() == ground_truth_region(m.grid, m.grid.extent).tobytes()


def test_estimate_read_time_examples():
    dev = DeviceModel(seek_s=1e-3, bandwidth_Bps=2**30, open_s=1e-2)
    assert estimate_read_time(ReadMetrics(1, 1, 1, 2**30), dev) == pytest.approx(1.011, abs=1e-12)
    assert estimate_read_time(ReadMetrics(1, 1, 1, 0), dev) == pytest.approx(0.011, abs=1e-15)
    base = estimate_read_time(ReadMetrics(1, 1, 5, 4096), dev)
    assert estimate_read_time(ReadMetrics(1, 1, 10, 4096), dev) - base == pytest.approx(5 * 1e-3)


def test_device_rejects_nonpositive():
    with pytest.raises(ValueError):
        DeviceModel(seek_s=0)


def _cell_oracle(m, region):
    """Per-cell (subfile, byte offset) by brute force search over chunks."""
    es = m.grid.element_size
    out = {}
    for c in m.chunks:
        inter = c.extent.intersect(region)
        if inter is None:
            continue
        for idx in np.ndindex(*inter.shape):
            cell = tuple(o + i for o, i in zip(inter.offset, idx))
            rel = [a - b for a, b in zip(cell, c.extent.offset)]
            lin = (rel[0] * c.extent.shape[1] + rel[1]) * c.extent.shape[2] + rel[2]
            rr = [a - b for a, b in zip(cell, region.offset)]
            dest = (rr[0] * region.shape[1] + rr[1]) * region.shape[2] + rr[2]
            out[dest * es] = (c.subfile_id, c.byte_offset + lin * es)
    return out


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32), ex=st.integers(0, 40), kind=st.sampled_from(LAYOUTS),
       lo=st.tuples(*[st.integers(0, 7)] * 3), size=st.tuples(*[st.integers(1, 8)] * 3))
def test_plan_matches_cell_oracle(tmp_path_factory, seed, ex, kind, lo, size):
    ds = _ds((8, 8, 8), (2, 4, 2), ranks=4, rpn=2, seed=seed, ex=ex)
    m = write_layout(ds, kind, tmp_path_factory.mktemp("p") / "x")
    region = BlockExtent(lo, tuple(min(s, 8 - o) for s, o in zip(size, lo)))
    plan = plan_read(m, region)
    es = m.grid.element_size
    got = {}
    for sid, off, length, dest in plan.segments.tolist():
        assert length > 0 and length % es == 0
        for k in range(0, length, es):
            assert dest + k not in got  # each destination written once
            got[dest + k] = (sid, off + k)
    assert got == _cell_oracle(m, region)
    # sorted by (subfile, offset)
    keys = list(zip(plan.segments["subfile_id"].tolist(), plan.segments["byte_offset"].tolist()))
    assert keys == sorted(keys)
    # no segment crosses a chunk boundary
    bounds = {(c.subfile_id, c.byte_offset, c.byte_offset + m.chunk_nbytes(c)) for c in m.chunks}
    for sid, off, length, _ in plan.segments.tolist():
        assert any(s == sid and a <= off and off + length <= b for s, a, b in bounds)


@pytest.mark.parametrize("kind", LAYOUTS)
@pytest.mark.parametrize("merge", [None, "IntraProcess", "IntraNode"])
def test_oracle_every_pattern_and_scheme(tmp_path, kind, merge):
    ds = _ds((16, 16, 16), (4, 4, 4), ranks=4, rpn=2, seed=5, ex=30)
    if merge:
        ds, _ = reduce_blocks(ds, merge)
    m = write_layout(ds, kind, tmp_path / "x")
    for p in default_patterns(m.grid):
        region = pattern_region(m.grid, p)
        for n in (1, 2, 4):
            for scheme in divisible_schemes(region, n):
                res = read_region(m, region, scheme, workers=2 if n > 1 else 1)
                assert verify_buffers(m.grid, res)
                for _, _, met in res:
                    assert met.bytes_read == res[0][0].volume * m.grid.element_size


def test_merging_never_increases_whole_domain_chunks(tmp_path):
    ds = _ds((16, 16, 16), (2, 2, 2), ranks=6, rpn=1, seed=2, ex=100)
    merged, _ = reduce_blocks(ds, "IntraProcess")
    a = plan_read(write_chunked(ds, tmp_path / "a"), ds.grid.extent).chunks_touched
    b = plan_read(write_chunked(merged, tmp_path / "b"), ds.grid.extent).chunks_touched
    assert b <= a


def test_metrics_records_are_json_lines(tmp_path):
    m = write_chunked(_ds(), tmp_path / "k")
    res = read_region(m, m.grid.extent, (2, 1, 1))
    text = metrics_ndjson([met.as_dict() for _, _, met in res])
    rows = [json.loads(line) for line in text.splitlines()]
    assert len(rows) == 2 and all(r["schema"] == "read_metrics/v1" for r in rows)
    assert plan_read(m, m.grid.extent).to_record()["schema"] == "read_plan/v1"
