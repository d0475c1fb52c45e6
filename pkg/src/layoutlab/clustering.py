"""Exact-fill cuboid clustering of same-shape blocks and payload merging.

Blocks are handled in block-grid units: a set of blocks is a binary voxel
image and clustering splits its bounding cuboid until every piece is
completely filled. Split planes come from per-axis occupancy signatures:

1. a slice with zero occupancy (a hole) is cut first, nearest the centre;
2. otherwise the steepest zero crossing of the signatures' second
   differences is cut;
3. otherwise the longest axis is halved.

Children are shrunk to the bounding cuboid of the blocks they receive, so a
minimal cuboid never has an empty face slice and every cut leaves two
non-empty children.
"""
from __future__ import annotations

import enum
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np

from .domain import Block, BlockExtent, Dataset, GlobalGrid, gather_node_blocks

AXES = "xyz"


class EmptyInput(ValueError):
    pass


class Unsplittable(AssertionError):
    pass


class MissingBlockPayload(KeyError):
    pass


class SplitCause(enum.Enum):
    HOLE = "Hole"
    ZERO_CROSSING = "ZeroCrossing"
    MIDPOINT_FALLBACK = "MidpointFallback"


class MergeMode(enum.Enum):
    INTRA_PROCESS = "IntraProcess"
    INTRA_NODE = "IntraNode"


@dataclass(frozen=True)
class Cuboid:
    extent: BlockExtent  # block-grid units
    contained: tuple[int, ...]
    block_grid: tuple[int, int, int]

    @property
    def is_filled(self) -> bool:
        return self.extent.volume == len(self.contained)

    def coords(self) -> np.ndarray:
        return np.array(np.unravel_index(np.array(self.contained, dtype=np.int64), self.block_grid)).T.reshape(-1, 3)

    def occupancy(self) -> np.ndarray:
        occ = np.zeros(self.extent.shape, dtype=bool)
        rel = self.coords() - np.array(self.extent.offset)
        occ[rel[:, 0], rel[:, 1], rel[:, 2]] = True
        return occ

    def cell_extent(self, grid: GlobalGrid) -> BlockExtent:
        bs = grid.block_shape
        return BlockExtent(
            tuple(o * b for o, b in zip(self.extent.offset, bs)),
            tuple(s * b for s, b in zip(self.extent.shape, bs)),
        )


@dataclass(frozen=True)
class Signature:
    axis: int
    values: tuple[Fraction, ...]


@dataclass(frozen=True)
class LaplacianProfile:
    axis: int
    values: tuple[Fraction, ...]  # values[j] sits on signature slice j + 1


@dataclass(frozen=True)
class SplitDecision:
    axis: int
    index: int  # cut between slices index-1 and index, relative to the cuboid
    cause: SplitCause
    steepness: Fraction = Fraction(0)

    @property
    def axis_name(self) -> str:
        return AXES[self.axis]


def _from_coords(coords: np.ndarray, ids: Sequence[int], block_grid) -> Cuboid:
    lo = coords.min(axis=0)
    hi = coords.max(axis=0) + 1
    return Cuboid(BlockExtent(tuple(int(v) for v in lo), tuple(int(v) for v in hi - lo)),
                  tuple(int(i) for i in ids), tuple(block_grid))


def bounding_cuboid(blocks: Sequence[int], grid: GlobalGrid) -> Cuboid:
    if len(blocks) == 0:
        raise EmptyInput("cannot bound an empty block list")
    ids = sorted(int(b) for b in blocks)
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate block ids")
    coords = np.array(np.unravel_index(np.array(ids), grid.block_grid)).T.reshape(-1, 3)
    return _from_coords(coords, ids, grid.block_grid)


def signature(cuboid: Cuboid, axis: int) -> Signature:
    occ = cuboid.occupancy()
    other = tuple(a for a in range(3) if a != axis)
    counts = occ.sum(axis=other)
    per_slice = occ.size // occ.shape[axis]
    return Signature(axis, tuple(Fraction(int(c), per_slice) for c in counts))


def laplacian(sig: Signature) -> LaplacianProfile:
    u = sig.values
    return LaplacianProfile(sig.axis, tuple(u[i - 1] - 2 * u[i] + u[i + 1] for i in range(1, len(u) - 1)))


def _crosses(a: Fraction, b: Fraction) -> bool:
    return a != b and min(a, b) <= 0 <= max(a, b)


def _decide(occ: np.ndarray) -> SplitDecision:
    """Split decision for a minimal cuboid given its boolean occupancy.

    Works on integer slice counts; a signature is ``counts / area`` with
    ``area`` the cross-section of that axis, so signs and zero tests carry over
    and only candidate steepness values need exact fractions.
    """
    shape = occ.shape
    if max(shape) < 2:
        raise Unsplittable(f"cuboid of shape {shape} has unit length on every axis")
    counts = [occ.sum(axis=(1, 2)).tolist(), occ.sum(axis=(0, 2)).tolist(), occ.sum(axis=(0, 1)).tolist()]

    # rank keys: smaller is better; ties go to longer axis, lower axis, lower slice
    best = None
    for a, c in enumerate(counts):
        n = len(c)
        for h in range(1, n):
            if c[h] == 0:
                key = (abs(2 * h + 1 - n), -n, a, h)
                if best is None or key < best:
                    best = key
    if best is not None:
        return SplitDecision(best[2], best[3], SplitCause.HOLE)

    best, best_steep = None, None
    for a, c in enumerate(counts):
        n = len(c)
        if n < 4:
            continue
        area = occ.size // n
        lap = [c[i - 1] - 2 * c[i] + c[i + 1] for i in range(1, n - 1)]
        for j in range(len(lap) - 1):
            u, v = lap[j], lap[j + 1]
            if u != v and min(u, v) <= 0 <= max(u, v):
                steep = Fraction(abs(u - v), area)
                key = (-steep, -n, a, j)
                if best is None or key < best:
                    best, best_steep = key, steep
    if best is not None:
        # lap[j] sits on slice j+1, lap[j+1] on slice j+2; cut between them
        return SplitDecision(best[2], best[3] + 2, SplitCause.ZERO_CROSSING, best_steep)

    a = max(range(3), key=lambda i: (shape[i], -i))
    return SplitDecision(a, shape[a] // 2, SplitCause.MIDPOINT_FALLBACK)


def find_split(cuboid: Cuboid) -> SplitDecision:
    return _decide(cuboid.occupancy())


def split(cuboid: Cuboid, decision: SplitDecision) -> tuple[Cuboid, Cuboid]:
    coords = cuboid.coords()
    ids = np.array(cuboid.contained)
    left = coords[:, decision.axis] < cuboid.extent.offset[decision.axis] + decision.index
    if left.all() or not left.any():
        raise Unsplittable(f"split {decision} leaves an empty child")
    return (
        _from_coords(coords[left], ids[left], cuboid.block_grid),
        _from_coords(coords[~left], ids[~left], cuboid.block_grid),
    )


def cluster(blocks: Sequence[int], grid: GlobalGrid) -> list[Cuboid]:
    """Partition ``blocks`` into completely filled cuboids (FIFO order)."""
    if len(blocks) == 0:
        raise EmptyInput("cannot cluster an empty block list")
    ids = np.array(sorted(int(b) for b in blocks), dtype=np.int64)
    if len(np.unique(ids)) != len(ids):
        raise ValueError("duplicate block ids")
    coords = np.array(np.unravel_index(ids, grid.block_grid)).T.reshape(-1, 3)
    result: list[Cuboid] = []
    queue = deque([(coords, ids)])
    max_dequeues = 2 * len(ids) - 1
    dequeues = 0
    while queue:
        coords, ids = queue.popleft()
        dequeues += 1
        assert dequeues <= max_dequeues, "clustering failed to terminate within 2n-1 dequeues"
        lo = coords.min(axis=0)
        shape = coords.max(axis=0) + 1 - lo
        if int(shape.prod()) == len(ids):
            result.append(Cuboid(BlockExtent(tuple(lo.tolist()), tuple(shape.tolist())),
                                 tuple(ids.tolist()), grid.block_grid))
            continue
        rel = coords - lo
        occ = np.zeros(tuple(shape.tolist()), dtype=bool)
        occ[rel[:, 0], rel[:, 1], rel[:, 2]] = True
        d = _decide(occ)
        left = rel[:, d.axis] < d.index
        # a minimal cuboid has blocks on every face, so both sides are non-empty
        if left.all() or not left.any():
            raise Unsplittable(f"split {d} leaves an empty child")
        queue.append((coords[left], ids[left]))
        queue.append((coords[~left], ids[~left]))
    return result


MergedBlock = Block


def _originals(dataset: Dataset) -> dict[int, Block]:
    if dataset.merged is not None:
        return {}
    return {b.contained[0]: b for b in dataset.blocks}


def merge(cuboids: Sequence[Cuboid], dataset: Dataset, rank: int | None = None,
          originals: dict[int, Block] | None = None) -> list[MergedBlock]:
    """Copy the payloads of each cuboid's blocks into one buffer per cuboid."""
    grid = dataset.grid
    if originals is None:
        originals = _originals(dataset)
    out = []
    for c in cuboids:
        if not c.is_filled:
            raise ValueError(f"cuboid {c.extent} is not completely filled")
        cext = c.cell_extent(grid)
        buf = np.empty(cext.shape, dtype=grid.dtype)
        owners = set()
        for bid in c.contained:
            try:
                src = originals[bid]
            except KeyError:
                raise MissingBlockPayload(bid) from None
            rel = tuple(slice(o - co, o - co + s) for o, co, s in zip(src.extent.offset, cext.offset, src.extent.shape))
            buf[rel] = src.data
            owners.add(src.rank)
        out.append(Block(cext, min(owners) if rank is None else rank, buf, tuple(c.contained)))
    return out


@dataclass
class ReduceRecord:
    scope: str
    blocks_before: int
    blocks_after: int
    t_cluster_s: float
    t_merge_s: float
    t_gather_s: float = 0.0

    def as_dict(self) -> dict:
        return {"schema": "reduce_blocks/v1", **self.__dict__}


def _reduce_scope(scope: str, ids: list[int], dataset: Dataset, rank: int, t_gather: float, originals):
    if not ids:
        return [], ReduceRecord(scope, 0, 0, 0.0, 0.0, t_gather)
    t0 = time.perf_counter()
    cuboids = cluster(ids, dataset.grid)
    t1 = time.perf_counter()
    merged = merge(cuboids, dataset, rank, originals)
    t2 = time.perf_counter()
    return merged, ReduceRecord(scope, len(ids), len(merged), t1 - t0, t2 - t1, t_gather)


def reduce_blocks(dataset: Dataset, mode: MergeMode | str, workers: int = 1) -> tuple[Dataset, list[ReduceRecord]]:
    """Cluster and merge each rank's (or each node's) blocks.

    Merged blocks of a node are owned by the node's lowest rank. The returned
    records carry per-scope block counts and wall-clock phase timings.
    """
    mode = MergeMode(mode)
    if dataset.merged is not None:
        raise ValueError(f"dataset already merged ({dataset.merged})")
    asg = dataset.assignment
    originals = _originals(dataset)
    jobs = []
    if mode is MergeMode.INTRA_PROCESS:
        for r, ids in asg.rank_blocks().items():
            jobs.append((f"rank:{r}", ids, dataset, r, 0.0))
    else:
        for node, ids in gather_node_blocks(asg).items():
            t0 = time.perf_counter()
            # the gather is an in-memory copy standing in for the collective
            for bid in ids:
                originals[bid].data.copy()
            jobs.append((f"node:{node}", ids, dataset, node * asg.ranks_per_node, time.perf_counter() - t0))

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            results = list(ex.map(lambda j: _reduce_scope(*j, originals), jobs))
    else:
        results = [_reduce_scope(*j, originals) for j in jobs]

    blocks = tuple(b for merged, _ in results for b in merged)
    return Dataset(dataset.grid, asg, blocks, mode.value), [rec for _, rec in results]
