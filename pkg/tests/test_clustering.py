import itertools
from fractions import Fraction as F

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from layoutlab.clustering import (Cuboid, EmptyInput, MergeMode, MissingBlockPayload, SplitCause, Unsplittable,
                                  bounding_cuboid, cluster, find_split, laplacian, merge, reduce_blocks, signature,
                                  split)
from layoutlab.domain import (BlockAssignment, BlockExtent, assign_blocks, ground_truth_region, make_dataset,
                              make_grid)
from layoutlab.presets import MERGE_DEMO_BLOCKS, SPLIT_DEMO_BLOCKS

G4 = make_grid((4, 4, 4), (1, 1, 1))


def ids(grid, coords):
    return [grid.block_id(c) for c in coords]


# -- bounding cuboid / signature / laplacian --------------------------------

def test_bounding_cuboid_examples():
    assert bounding_cuboid([21], G4).extent == BlockExtent(G4.block_coords(21), (1, 1, 1))
    assert bounding_cuboid(ids(G4, [(0, 0, 0), (3, 3, 3)]), G4).extent == BlockExtent((0, 0, 0), (4, 4, 4))
    assert bounding_cuboid(ids(G4, [(1, 0, 0), (2, 0, 0)]), G4).extent == BlockExtent((1, 0, 0), (2, 1, 1))


def test_bounding_cuboid_empty():
    with pytest.raises(EmptyInput):
        bounding_cuboid([], G4)


def test_signature_examples():
    c = bounding_cuboid(SPLIT_DEMO_BLOCKS, G4)
    assert signature(c, 0).values == (F(1, 16), F(5, 16), F(7, 16), F(3, 16))
    full = bounding_cuboid(ids(G4, itertools.product(range(2), range(3), range(2))), G4)
    assert all(v == 1 for a in range(3) for v in signature(full, a).values)


def test_signature_one_block_in_two_slices():
    # a 2x2x2 cuboid with one block on its x=0 face and others elsewhere
    c = Cuboid(BlockExtent((0, 0, 0), (2, 2, 2)), (G4.block_id((0, 0, 0)),), G4.block_grid)
    assert signature(c, 0).values == (F(1, 4), F(0))


def test_laplacian_examples():
    sig = bounding_cuboid(SPLIT_DEMO_BLOCKS, G4)
    assert laplacian(signature(sig, 0)).values == (F(-2, 16), F(-6, 16))
    full = bounding_cuboid(list(range(64)), G4)
    assert all(v == 0 for v in laplacian(signature(full, 2)).values)
    two = bounding_cuboid(ids(G4, [(0, 0, 0), (1, 0, 0)]), G4)
    assert laplacian(signature(two, 0)).values == ()


# -- split decisions --------------------------------------------------------

def reference_split(c: Cuboid):
    """Split rule written directly against the Fraction signatures."""
    sigs = [signature(c, a).values for a in range(3)]
    holes = [(abs(2 * h + 1 - len(u)), -len(u), a, h) for a, u in enumerate(sigs) for h in range(1, len(u)) if u[h] == 0]
    if holes:
        _, _, a, h = min(holes)
        return a, h, SplitCause.HOLE
    cands = []
    for a, u in enumerate(sigs):
        L = laplacian(signature(c, a)).values
        for j in range(len(L) - 1):
            x, y = L[j], L[j + 1]
            if x != y and min(x, y) <= 0 <= max(x, y):
                cands.append((-abs(x - y), -len(u), a, j))
    if cands:
        _, _, a, j = min(cands)
        return a, j + 2, SplitCause.ZERO_CROSSING
    shape = c.extent.shape
    a = max(range(3), key=lambda i: (shape[i], -i))
    return a, shape[a] // 2, SplitCause.MIDPOINT_FALLBACK


def test_split_demo_splits_on_y():
    d = find_split(bounding_cuboid(SPLIT_DEMO_BLOCKS, G4))
    assert d.axis_name == "y" and d.cause is SplitCause.ZERO_CROSSING


def test_hole_split_at_slice_one():
    c = bounding_cuboid(ids(G4, [(0, 0, 0), (2, 1, 1), (3, 0, 1)]), G4)
    assert signature(c, 0).values == (F(1, 4), F(0), F(1, 4), F(1, 4))
    d = find_split(c)
    assert (d.axis, d.index, d.cause) == (0, 1, SplitCause.HOLE)


def test_midpoint_fallback_for_symmetric_pair():
    # two 2x2 squares touching at a corner: flat signatures, no holes
    blocks = ids(G4, [(0, 0, 0), (0, 1, 0), (1, 0, 0), (1, 1, 0), (2, 2, 0), (2, 3, 0), (3, 2, 0), (3, 3, 0)])
    c = bounding_cuboid(blocks, G4)
    d = find_split(c)
    assert (d.axis, d.index, d.cause) == (0, 2, SplitCause.MIDPOINT_FALLBACK)
    assert len(cluster(blocks, G4)) == 2


def test_unsplittable_unit_cuboid():
    with pytest.raises(Unsplittable):
        find_split(Cuboid(BlockExtent((0, 0, 0), (1, 1, 1)), (), G4.block_grid))


@settings(max_examples=200, deadline=None)
@given(st.sets(st.integers(0, 63), min_size=2, max_size=40))
def test_split_matches_reference_rule(blocks):
    c = bounding_cuboid(sorted(blocks), G4)
    if c.is_filled:
        return
    d = find_split(c)
    assert (d.axis, d.index, d.cause) == reference_split(c)
    left, right = split(c, d)
    assert left.contained and right.contained
    assert sorted(left.contained + right.contained) == sorted(c.contained)


# -- cluster ----------------------------------------------------------------

def test_filled_input_gives_one_cuboid():
    blocks = ids(G4, itertools.product(range(1, 3), range(4), range(2)))
    [c] = cluster(blocks, G4)
    assert c.extent == BlockExtent((1, 0, 0), (2, 4, 2))


def _all_filled_cuboids(cells):
    cells = set(cells)
    out = []
    lo_max = [max(c[a] for c in cells) for a in range(3)]
    for lo in itertools.product(*[range(m + 1) for m in lo_max]):
        for hi in itertools.product(*[range(l + 1, m + 2) for l, m in zip(lo, lo_max)]):
            box = set(itertools.product(*[range(l, h) for l, h in zip(lo, hi)]))
            if box <= cells:
                out.append(frozenset(box))
    return out


def _min_exact_cover(cells):
    cells = frozenset(cells)
    boxes = _all_filled_cuboids(cells)
    for k in range(1, len(cells) + 1):
        for combo in itertools.combinations(boxes, k):
            if sum(len(b) for b in combo) == len(cells) and frozenset().union(*combo) == cells:
                return k


def test_l_shape_needs_and_gets_two():
    L = [(0, 0, 0), (1, 0, 0), (0, 1, 0)]
    assert _min_exact_cover(L) == 2
    out = cluster(ids(G4, L), G4)
    assert len(out) == 2 and sum(len(c.contained) for c in out) == 3


def test_merge_demo_gives_six():
    g = make_grid((512,) * 3, (128,) * 3)
    assert len(MERGE_DEMO_BLOCKS) == 16
    assert len(cluster(MERGE_DEMO_BLOCKS, g)) == 6
    c = bounding_cuboid(MERGE_DEMO_BLOCKS, g)
    assert signature(c, 0).values == (F(1, 16), F(5, 16), F(7, 16), F(3, 16))


def test_cluster_rejects_empty_and_duplicates():
    with pytest.raises(EmptyInput):
        cluster([], G4)
    with pytest.raises(ValueError):
        cluster([1, 1], G4)


def _check_cover(blocks, out):
    got = sorted(b for c in out for b in c.contained)
    assert got == sorted(blocks)
    for c in out:
        assert c.is_filled
        coords = c.coords()
        assert (coords >= c.extent.offset).all() and (coords < c.extent.stop).all()
    assert len(out) <= len(blocks)


@settings(max_examples=150, deadline=None)
@given(edge=st.integers(1, 6), data=st.data())
def test_cluster_exact_cover_property(edge, data):
    g = make_grid((edge, edge + 1, edge), (1, 1, 1))
    blocks = data.draw(st.sets(st.integers(0, g.n_blocks - 1), min_size=1))
    out = cluster(sorted(blocks), g)
    _check_cover(blocks, out)
    # idempotence: re-clustering the same blocks yields the same cuboids, and each
    # output treated on its own is already final
    assert [c.extent for c in cluster(sorted(blocks), g)] == [c.extent for c in out]
    for c in out:
        assert [x.extent for x in cluster(c.contained, g)] == [c.extent]


# -- merge and reduce -------------------------------------------------------

def _ds(dims=(8, 8, 8), bs=(2, 2, 2), ranks=4, rpn=1, seed=0, ex=0):
    g = make_grid(dims, bs)
    return make_dataset(g, assign_blocks(g, ranks, rpn, seed, ex))


def test_merge_single_block_is_identity():
    ds = _ds()
    b = ds.blocks[5]
    [m] = merge(cluster([5], ds.grid), ds)
    assert m.payload == b.payload and m.extent == b.extent


def test_merge_pair_matches_ground_truth():
    ds = _ds()
    pair = ids(ds.grid, [(1, 2, 3), (2, 2, 3)])
    [m] = merge(cluster(pair, ds.grid), ds)
    assert m.extent == BlockExtent((2, 4, 6), (4, 2, 2))
    assert m.payload == ground_truth_region(ds.grid, m.extent).tobytes()


def test_merge_missing_payload():
    ds = _ds()
    partial = type(ds)(ds.grid, ds.assignment, ds.blocks[:3])
    with pytest.raises(MissingBlockPayload):
        merge(cluster([10], ds.grid), partial)


def test_reduce_contiguous_slabs_merge_to_one_each():
    merged, recs = reduce_blocks(_ds((8, 8, 8), (2, 2, 2), ranks=4), MergeMode.INTRA_PROCESS)
    assert len(merged.blocks) == 4
    assert all(b.extent.shape == (2, 8, 8) for b in merged.blocks)
    assert [(r.blocks_before, r.blocks_after) for r in recs] == [(16, 1)] * 4
    assert recs[0].as_dict()["schema"] == "reduce_blocks/v1"


def test_intranode_one_rank_per_node_equals_intraprocess():
    ds = _ds(ranks=6, rpn=1, seed=4, ex=50)
    a, _ = reduce_blocks(ds, "IntraProcess")
    b, recs = reduce_blocks(ds, "IntraNode")
    key = lambda d: sorted((x.extent.offset, x.extent.shape, x.rank) for x in d.blocks)
    assert key(a) == key(b)
    assert all(r.t_gather_s >= 0 for r in recs)


def test_intranode_owner_is_lowest_rank_of_node():
    ds = _ds(ranks=8, rpn=4, seed=1, ex=40)
    merged, recs = reduce_blocks(ds, MergeMode.INTRA_NODE)
    assert {b.rank for b in merged.blocks} <= {0, 4}
    assert [r.scope for r in recs] == ["node:0", "node:1"]


def test_reduce_twice_rejected():
    merged, _ = reduce_blocks(_ds(), "IntraProcess")
    with pytest.raises(ValueError):
        reduce_blocks(merged, "IntraProcess")


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32), ranks=st.integers(1, 12), rpn=st.integers(1, 4),
       ex=st.integers(0, 128), mode=st.sampled_from(list(MergeMode)), workers=st.sampled_from([1, 3]))
def test_reduce_preserves_content(seed, ranks, rpn, ex, mode, workers):
    ds = _ds((8, 8, 8), (2, 2, 2), ranks, rpn, seed, ex)
    merged, recs = reduce_blocks(ds, mode, workers)
    assert sum(b.extent.volume for b in merged.blocks) == ds.grid.extent.volume
    assert len(merged.blocks) <= len(ds.blocks)
    assert sum(r.blocks_before for r in recs) == len(ds.blocks)
    seen = np.zeros(ds.grid.dims, dtype=int)
    for b in merged.blocks:
        seen[b.extent.slices()] += 1
        assert b.payload == ground_truth_region(ds.grid, b.extent).tobytes()
        owners = {ds.assignment.owner[i] for i in b.contained}
        if mode is MergeMode.INTRA_PROCESS:
            assert owners == {b.rank}
        else:
            assert {ds.assignment.node_of(r) for r in owners} == {ds.assignment.node_of(b.rank)}
    assert (seen == 1).all()


def test_dataset_with_explicit_assignment():
    g = make_grid((8,) * 3, (2,) * 3)  # same 4x4x4 block grid, small cells
    owner = tuple(0 if b in MERGE_DEMO_BLOCKS else 1 for b in range(64))
    ds = make_dataset(g, BlockAssignment(2, 1, owner))
    merged, recs = reduce_blocks(ds, "IntraProcess")
    assert (recs[0].blocks_before, recs[0].blocks_after) == (16, 6)
