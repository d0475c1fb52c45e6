"""Global grid, blocks, block-to-rank assignments and ground-truth payloads.

Every cell of the global array carries its own canonical linear index
``(x * dims_y + y) * dims_z + z`` (row-major, z fastest). Readers can therefore
verify any buffer against ``ground_truth_region`` without keeping a copy of the
data around.
"""
from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np


class NonDivisible(ValueError):
    pass


class OutOfBounds(IndexError):
    pass


class TooManyRanks(ValueError):
    pass


Vec3 = tuple[int, int, int]

_ELEMENT_DTYPES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


def _vec3(v: Iterable[int], name: str) -> Vec3:
    if type(v) is tuple and len(v) == 3 and all(type(a) is int for a in v):
        return v  # type: ignore[return-value]
    t = tuple(int(a) for a in v)
    if len(t) != 3:
        raise ValueError(f"{name} must have 3 components, got {t}")
    return t  # type: ignore[return-value]


@dataclass(frozen=True)
class BlockExtent:
    """Axis-aligned cuboid, ``offset`` inclusive, ``offset + shape`` exclusive."""

    offset: Vec3
    shape: Vec3

    def __post_init__(self):
        object.__setattr__(self, "offset", _vec3(self.offset, "offset"))
        object.__setattr__(self, "shape", _vec3(self.shape, "shape"))

    @property
    def stop(self) -> Vec3:
        return tuple(o + s for o, s in zip(self.offset, self.shape))  # type: ignore[return-value]

    @property
    def volume(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))

    def slices(self) -> tuple[slice, slice, slice]:
        return tuple(slice(o, o + s) for o, s in zip(self.offset, self.shape))  # type: ignore[return-value]

    def intersect(self, other: "BlockExtent") -> "BlockExtent | None":
        lo = [max(a, b) for a, b in zip(self.offset, other.offset)]
        hi = [min(a, b) for a, b in zip(self.stop, other.stop)]
        if any(h <= l for l, h in zip(lo, hi)):
            return None
        return BlockExtent(tuple(lo), tuple(h - l for l, h in zip(lo, hi)))

    def contains(self, other: "BlockExtent") -> bool:
        return all(a <= b for a, b in zip(self.offset, other.offset)) and all(
            a >= b for a, b in zip(self.stop, other.stop)
        )


@dataclass(frozen=True)
class GlobalGrid:
    dims: Vec3
    block_shape: Vec3
    element_size: int = 8

    def __post_init__(self):
        dims = _vec3(self.dims, "dims")
        bs = _vec3(self.block_shape, "block_shape")
        if min(dims) <= 0 or min(bs) <= 0:
            raise ValueError(f"dims and block_shape must be positive: {dims}, {bs}")
        bad = [i for i in range(3) if dims[i] % bs[i]]
        if bad:
            raise NonDivisible(f"dims {dims} not divisible by block_shape {bs} along axes {bad}")
        if self.element_size not in _ELEMENT_DTYPES:
            raise ValueError(f"unsupported element_size {self.element_size}; use 4 or 8")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "block_shape", bs)

    @property
    def block_grid(self) -> Vec3:
        return tuple(d // b for d, b in zip(self.dims, self.block_shape))  # type: ignore[return-value]

    @property
    def n_blocks(self) -> int:
        bg = self.block_grid
        return bg[0] * bg[1] * bg[2]

    @property
    def dtype(self) -> np.dtype:
        return _ELEMENT_DTYPES[self.element_size]

    @property
    def extent(self) -> BlockExtent:
        return BlockExtent((0, 0, 0), self.dims)

    @property
    def nbytes(self) -> int:
        return self.extent.volume * self.element_size

    def block_coords(self, block_id: int) -> Vec3:
        if not 0 <= block_id < self.n_blocks:
            raise OutOfBounds(f"block id {block_id} outside [0, {self.n_blocks})")
        _, gy, gz = self.block_grid
        xy, z = divmod(int(block_id), gz)
        x, y = divmod(xy, gy)
        return (x, y, z)

    def block_id(self, coords: Sequence[int]) -> int:
        return int(np.ravel_multi_index(tuple(coords), self.block_grid))

    def block_extent(self, block_id: int) -> BlockExtent:
        c = self.block_coords(block_id)
        return BlockExtent(tuple(ci * b for ci, b in zip(c, self.block_shape)), self.block_shape)


def make_grid(dims, block_shape, element_size: int = 8) -> GlobalGrid:
    return GlobalGrid(_vec3(dims, "dims"), _vec3(block_shape, "block_shape"), element_size)


def ground_truth(grid: GlobalGrid, cell) -> float:
    x, y, z = _vec3(cell, "cell")
    if not all(0 <= c < d for c, d in zip((x, y, z), grid.dims)):
        raise OutOfBounds(f"cell {(x, y, z)} outside grid {grid.dims}")
    return grid.dtype.type((x * grid.dims[1] + y) * grid.dims[2] + z).item()


def ground_truth_region(grid: GlobalGrid, extent: BlockExtent) -> np.ndarray:
    """Ground-truth values over ``extent``, shaped like the extent."""
    if not grid.extent.contains(extent):
        raise OutOfBounds(f"{extent} outside grid {grid.dims}")
    x, y, z = (np.arange(o, o + s, dtype=np.int64) for o, s in zip(extent.offset, extent.shape))
    lin = (x[:, None, None] * grid.dims[1] + y[None, :, None]) * grid.dims[2] + z[None, None, :]
    return lin.astype(grid.dtype)


@dataclass(frozen=True)
class BlockAssignment:
    n_ranks: int
    ranks_per_node: int
    owner: tuple[int, ...]
    seed: int = 0
    exchanges: int = 0

    def __post_init__(self):
        if self.n_ranks < 1 or self.ranks_per_node < 1:
            raise ValueError("n_ranks and ranks_per_node must be >= 1")
        bad = [r for r in self.owner if not 0 <= r < self.n_ranks]
        if bad:
            raise ValueError(f"owner ranks out of range: {bad[:5]}")

    @property
    def n_nodes(self) -> int:
        return -(-self.n_ranks // self.ranks_per_node)

    def node_of(self, rank: int) -> int:
        return rank // self.ranks_per_node

    def rank_blocks(self) -> dict[int, list[int]]:
        out: dict[int, list[int]] = {r: [] for r in range(self.n_ranks)}
        for b, r in enumerate(self.owner):
            out[r].append(b)
        return out


def assign_blocks(
    grid: GlobalGrid,
    n_ranks: int,
    ranks_per_node: int = 1,
    seed: int = 0,
    exchanges: int = 0,
    locality_scale: float | None = None,
) -> BlockAssignment:
    """Balanced contiguous assignment perturbed by ``exchanges`` random swaps.

    Each swap exchanges two blocks held by distinct ranks, so per-rank block
    counts never change. With ``locality_scale`` set, the swap partner is drawn
    with weight ``exp(-distance / locality_scale)`` (distance in block units)
    instead of uniformly.
    """
    B = grid.n_blocks
    if n_ranks > B:
        raise TooManyRanks(f"{n_ranks} ranks for {B} blocks")
    counts = [B // n_ranks + (1 if r < B % n_ranks else 0) for r in range(n_ranks)]
    owner = np.repeat(np.arange(n_ranks), counts)

    rng = np.random.default_rng(seed)
    coords = np.array(np.unravel_index(np.arange(B), grid.block_grid)).T
    done = 0
    while done < exchanges and n_ranks > 1:
        i = int(rng.integers(B))
        candidates = np.flatnonzero(owner != owner[i])
        if locality_scale is None:
            j = int(candidates[rng.integers(len(candidates))])
        else:
            dist = np.linalg.norm(coords[candidates] - coords[i], axis=1)
            w = np.exp(-dist / locality_scale)
            j = int(candidates[rng.choice(len(candidates), p=w / w.sum())])
        owner[i], owner[j] = owner[j], owner[i]
        done += 1
    return BlockAssignment(n_ranks, ranks_per_node, tuple(int(r) for r in owner), seed, exchanges)


def gather_node_blocks(assignment: BlockAssignment) -> dict[int, list[int]]:
    nodes: dict[int, list[int]] = {k: [] for k in range(assignment.n_nodes)}
    for b, r in enumerate(assignment.owner):
        nodes[assignment.node_of(r)].append(b)
    return nodes


@dataclass(frozen=True)
class Block:
    """One payload piece: an original block or a merged cuboid."""

    extent: BlockExtent
    rank: int
    data: np.ndarray = field(repr=False, compare=False)
    contained: tuple[int, ...] = ()

    @property
    def payload(self) -> bytes:
        return self.data.tobytes()


@dataclass(frozen=True)
class Dataset:
    grid: GlobalGrid
    assignment: BlockAssignment
    blocks: tuple[Block, ...]
    merged: str | None = None

    def by_rank(self) -> dict[int, list[Block]]:
        """Blocks grouped by rank, each list in canonical offset order."""
        out: dict[int, list[Block]] = {r: [] for r in range(self.assignment.n_ranks)}
        for b in self.blocks:
            out[b.rank].append(b)
        for lst in out.values():
            lst.sort(key=lambda b: b.extent.offset)
        return out

    def save(self, path) -> None:
        ext = np.array([b.extent.offset + b.extent.shape for b in self.blocks], dtype=np.int64).reshape(-1, 6)
        contained = [np.asarray(b.contained, dtype=np.int64) for b in self.blocks]
        np.savez(
            path,
            dims=np.array(self.grid.dims),
            block_shape=np.array(self.grid.block_shape),
            element_size=self.grid.element_size,
            n_ranks=self.assignment.n_ranks,
            ranks_per_node=self.assignment.ranks_per_node,
            owner=np.array(self.assignment.owner, dtype=np.int64),
            seed=self.assignment.seed,
            exchanges=self.assignment.exchanges,
            merged="" if self.merged is None else self.merged,
            extents=ext,
            ranks=np.array([b.rank for b in self.blocks], dtype=np.int64),
            contained_len=np.array([len(c) for c in contained], dtype=np.int64),
            contained=np.concatenate(contained) if contained else np.zeros(0, np.int64),
            payload=np.concatenate([b.data.ravel() for b in self.blocks]) if self.blocks else np.zeros(0),
        )

    @classmethod
    def load(cls, path) -> "Dataset":
        with np.load(path) as z:
            grid = GlobalGrid(tuple(z["dims"]), tuple(z["block_shape"]), int(z["element_size"]))
            asg = BlockAssignment(
                int(z["n_ranks"]), int(z["ranks_per_node"]), tuple(int(r) for r in z["owner"]),
                int(z["seed"]), int(z["exchanges"]),
            )
            merged = str(z["merged"]) or None
            payload = z["payload"].astype(grid.dtype, copy=False)
            cont = np.split(z["contained"], np.cumsum(z["contained_len"])[:-1]) if len(z["ranks"]) else []
            blocks, pos = [], 0
            for row, rank, c in zip(z["extents"], z["ranks"], cont):
                e = BlockExtent(tuple(row[:3]), tuple(row[3:]))
                data = payload[pos:pos + e.volume].reshape(e.shape)
                pos += e.volume
                blocks.append(Block(e, int(rank), data, tuple(int(i) for i in c)))
        return cls(grid, asg, tuple(blocks), merged)

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        self.save(buf)
        return buf.getvalue()


def make_dataset(grid: GlobalGrid, assignment: BlockAssignment) -> Dataset:
    if len(assignment.owner) != grid.n_blocks:
        raise ValueError(f"assignment covers {len(assignment.owner)} blocks, grid has {grid.n_blocks}")
    full = ground_truth_region(grid, grid.extent)
    blocks = []
    for b, r in enumerate(assignment.owner):
        e = grid.block_extent(b)
        blocks.append(Block(e, r, full[e.slices()].copy(), (b,)))
    return Dataset(grid, assignment, tuple(blocks))
