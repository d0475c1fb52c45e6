"""On-disk container formats for the three write strategies.

Files produced for a target base path ``<name>``::

    <name>.llab        manifest (index of every chunk)
    <name>.bin         shared data file (Contiguous, Chunked)
    <name>.d/<k>.bin   subfile k (Subfiled)

Data files are raw little-endian element payloads; each chunk is its extent
linearized row-major with z fastest. The manifest is::

    header   <4s I B B H 3Q 3Q I I Q>
             magic "LLAB", version, strategy, aggregation, reserved,
             dims, block_shape, element_size, subfile_count, n_chunks
    chunk    <3Q 3Q I I Q>  offset, shape, subfile_id, writer_rank, byte_offset
    trailer  <I>            CRC32C of every preceding byte
"""
from __future__ import annotations

import enum
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import crc32c
import numpy as np

from .domain import BlockExtent, Dataset, GlobalGrid

MAGIC = b"LLAB"
VERSION = 1
_HEADER = struct.Struct("<4sIBBH3Q3QIIQ")
_CHUNK = struct.Struct("<3Q3QIIQ")
_TRAILER = struct.Struct("<I")


class IoFailure(OSError):
    pass


class CorruptIndex(ValueError):
    pass


class BadMagic(CorruptIndex):
    pass


class VersionMismatch(ValueError):
    pass


class Strategy(enum.IntEnum):
    CONTIGUOUS = 0
    CHUNKED = 1
    SUBFILED = 2


class Aggregation(enum.IntEnum):
    NONE = 0
    FPP = 1
    FPN = 2


@dataclass(frozen=True)
class ChunkRecord:
    extent: BlockExtent
    subfile_id: int
    byte_offset: int
    writer_rank: int


@dataclass(frozen=True)
class LayoutManifest:
    strategy: Strategy
    grid: GlobalGrid
    chunks: tuple[ChunkRecord, ...]
    subfile_count: int = 1
    aggregation: Aggregation = Aggregation.NONE
    base: Path | None = field(default=None, compare=False)

    def chunk_nbytes(self, c: ChunkRecord) -> int:
        return c.extent.volume * self.grid.element_size

    def data_path(self, subfile_id: int) -> Path:
        if self.base is None:
            raise IoFailure("manifest has no base path")
        if self.strategy is Strategy.SUBFILED:
            return Path(f"{self.base}.d") / f"{subfile_id}.bin"
        return Path(f"{self.base}.bin")

    def validate(self) -> None:
        """Check exact cover of the domain and non-overlapping byte ranges."""
        if self.strategy is Strategy.CONTIGUOUS and (
            len(self.chunks) != 1 or self.chunks[0].extent != self.grid.extent
        ):
            raise CorruptIndex("contiguous manifest must hold exactly one whole-domain chunk")
        check_exact_cover([c.extent for c in self.chunks], self.grid.extent)
        by_file: dict[int, list[tuple[int, int]]] = {}
        for c in self.chunks:
            if not 0 <= c.subfile_id < self.subfile_count:
                raise CorruptIndex(f"subfile id {c.subfile_id} out of range")
            by_file.setdefault(c.subfile_id, []).append((c.byte_offset, c.byte_offset + self.chunk_nbytes(c)))
        for ranges in by_file.values():
            ranges.sort()
            for (_, e0), (s1, _) in zip(ranges, ranges[1:]):
                if s1 < e0:
                    raise CorruptIndex("overlapping byte ranges in one subfile")


def check_exact_cover(extents: list[BlockExtent], domain: BlockExtent) -> None:
    """Raise unless ``extents`` are pairwise disjoint and tile ``domain``."""
    if not extents:
        raise CorruptIndex("no chunks")
    lo = np.array([e.offset for e in extents], dtype=np.int64)
    hi = lo + np.array([e.shape for e in extents], dtype=np.int64)
    if (lo < np.array(domain.offset)).any() or (hi > np.array(domain.stop)).any():
        raise CorruptIndex("chunk extent outside domain")
    if int(np.prod(hi - lo, axis=1).sum()) != domain.volume:
        raise CorruptIndex("chunk volumes do not sum to the domain volume")
    for i in range(len(extents) - 1):
        overlap = (np.maximum(lo[i], lo[i + 1:]) < np.minimum(hi[i], hi[i + 1:])).all(axis=1)
        if overlap.any():
            raise CorruptIndex(f"chunk {i} overlaps chunk {i + 1 + int(np.argmax(overlap))}")


def _base(target) -> Path:
    p = Path(target)
    return p.with_suffix("") if p.suffix == ".llab" else p


def manifest_path(base) -> Path:
    return Path(f"{_base(base)}.llab")


def encode_manifest(m: LayoutManifest) -> bytes:
    g = m.grid
    parts = [_HEADER.pack(MAGIC, VERSION, int(m.strategy), int(m.aggregation), 0,
                          *g.dims, *g.block_shape, g.element_size, m.subfile_count, len(m.chunks))]
    for c in m.chunks:
        parts.append(_CHUNK.pack(*c.extent.offset, *c.extent.shape, c.subfile_id, c.writer_rank, c.byte_offset))
    body = b"".join(parts)
    return body + _TRAILER.pack(crc32c.crc32c(body))


def decode_manifest(raw: bytes, base: Path | None = None) -> LayoutManifest:
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise BadMagic(f"bad magic {raw[:4]!r}")
    if len(raw) < _HEADER.size + _TRAILER.size:
        raise CorruptIndex(f"manifest truncated to {len(raw)} bytes")
    body, (crc,) = raw[:-_TRAILER.size], _TRAILER.unpack(raw[-_TRAILER.size:])
    if crc32c.crc32c(body) != crc:
        raise CorruptIndex("checksum mismatch")
    h = _HEADER.unpack_from(body)
    _, version, strategy, aggregation, _, *rest = h
    if version != VERSION:
        raise VersionMismatch(f"manifest version {version}, expected {VERSION}")
    dims, bs, (esize, nsub, nchunks) = tuple(rest[0:3]), tuple(rest[3:6]), rest[6:9]
    if len(body) != _HEADER.size + nchunks * _CHUNK.size:
        raise CorruptIndex("chunk table length disagrees with header")
    try:
        grid = GlobalGrid(dims, bs, esize)
        chunks = []
        for i in range(nchunks):
            v = _CHUNK.unpack_from(body, _HEADER.size + i * _CHUNK.size)
            chunks.append(ChunkRecord(BlockExtent(v[0:3], v[3:6]), v[6], v[8], v[7]))
        return LayoutManifest(Strategy(strategy), grid, tuple(chunks), nsub, Aggregation(aggregation), base)
    except ValueError as e:
        raise CorruptIndex(str(e)) from e


def save_manifest(m: LayoutManifest, base) -> Path:
    path = manifest_path(base)
    path.write_bytes(encode_manifest(m))
    return path


def load_manifest(path) -> LayoutManifest:
    path = Path(path)
    if path.suffix != ".llab":
        path = manifest_path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise IoFailure(str(e)) from e
    return decode_manifest(raw, _base(path))


def _write_segments(path: Path, arrays) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as f:
            for a in arrays:
                f.write(np.ascontiguousarray(a).tobytes())
            f.flush()
            os.fsync(f.fileno())
    except OSError as e:
        raise IoFailure(str(e)) from e


def _assemble(dataset: Dataset) -> np.ndarray:
    out = np.empty(dataset.grid.dims, dtype=dataset.grid.dtype)
    for b in dataset.blocks:
        out[b.extent.slices()] = b.data
    return out


def write_contiguous(dataset: Dataset, target) -> LayoutManifest:
    base = _base(target)
    m = LayoutManifest(Strategy.CONTIGUOUS, dataset.grid,
                       (ChunkRecord(dataset.grid.extent, 0, 0, 0),), 1, Aggregation.NONE, base)
    _write_segments(m.data_path(0), [_assemble(dataset)])
    save_manifest(m, base)
    return m


def write_chunked(dataset: Dataset, target) -> LayoutManifest:
    """Append every block as its own chunk in one shared file, rank by rank."""
    base = _base(target)
    chunks, arrays, pos = [], [], 0
    for rank, blocks in dataset.by_rank().items():
        for b in blocks:
            chunks.append(ChunkRecord(b.extent, 0, pos, rank))
            arrays.append(b.data)
            pos += b.data.nbytes
    m = LayoutManifest(Strategy.CHUNKED, dataset.grid, tuple(chunks), 1, Aggregation.NONE, base)
    _write_segments(m.data_path(0), arrays)
    save_manifest(m, base)
    return m


def write_subfiled(dataset: Dataset, aggregation, target, workers: int = 4) -> LayoutManifest:
    """One subfile per rank (FPP) or per node (FPN); ranks appended in order."""
    aggregation = Aggregation[aggregation] if isinstance(aggregation, str) else Aggregation(aggregation)
    if aggregation is Aggregation.NONE:
        raise ValueError("sub-filing needs FPP or FPN aggregation")
    base = _base(target)
    asg = dataset.assignment
    n_sub = asg.n_ranks if aggregation is Aggregation.FPP else asg.n_nodes
    chunks: list[ChunkRecord] = []
    per_file: list[list[np.ndarray]] = [[] for _ in range(n_sub)]
    pos = [0] * n_sub
    for rank, blocks in dataset.by_rank().items():
        k = rank if aggregation is Aggregation.FPP else asg.node_of(rank)
        for b in blocks:
            chunks.append(ChunkRecord(b.extent, k, pos[k], rank))
            per_file[k].append(b.data)
            pos[k] += b.data.nbytes
    chunks.sort(key=lambda c: (c.subfile_id, c.byte_offset))
    m = LayoutManifest(Strategy.SUBFILED, dataset.grid, tuple(chunks), n_sub, aggregation, base)
    with ThreadPoolExecutor(max(1, workers)) as ex:
        list(ex.map(lambda k: _write_segments(m.data_path(k), per_file[k]), range(n_sub)))
    save_manifest(m, base)
    return m


def write_layout(dataset: Dataset, kind: str, target) -> LayoutManifest:
    """Dispatch on a layout name: Contiguous, Chunked, Subfiled-FPP, Subfiled-FPN."""
    key = kind.lower()
    if key == "contiguous":
        return write_contiguous(dataset, target)
    if key == "chunked":
        return write_chunked(dataset, target)
    if key in ("subfiled-fpp", "fpp"):
        return write_subfiled(dataset, Aggregation.FPP, target)
    if key in ("subfiled-fpn", "fpn"):
        return write_subfiled(dataset, Aggregation.FPN, target)
    raise ValueError(f"unknown layout {kind!r}")


LAYOUTS = ("Contiguous", "Chunked", "Subfiled-FPP", "Subfiled-FPN")


def rearrangement_bytes(dataset: Dataset, strategy: Strategy) -> int:
    """Bytes that must move between ranks before writing.

    For the contiguous layout the file is split into ``n_ranks`` equal
    element ranges (one per writer, as two-phase I/O does); every element that
    lands in another rank's range counts. Chunked and subfiled writers place
    each rank's bytes where they already are, so they move nothing.
    """
    if strategy is not Strategy.CONTIGUOUS:
        return 0
    grid, n = dataset.grid, dataset.assignment.n_ranks
    owner = np.empty(grid.dims, dtype=np.int32)
    for b in dataset.blocks:
        owner[b.extent.slices()] = b.rank
    total = owner.size
    domain = (np.arange(total, dtype=np.int64) * n) // total
    return int((owner.ravel() != domain).sum()) * grid.element_size
