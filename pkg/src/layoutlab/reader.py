"""Read patterns, reader decompositions, read planning and execution."""
from __future__ import annotations

import enum
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np

from .domain import BlockExtent, GlobalGrid, NonDivisible, OutOfBounds, ground_truth_region
from .layout import IoFailure, LayoutManifest


class ManifestMismatch(ValueError):
    pass


class PatternKind(enum.Enum):
    WHOLE_DOMAIN = "WholeDomain"
    SUB_VOLUME = "SubVolume"
    PLANE_YZ = "PlaneYZ"
    PLANE_XZ = "PlaneXZ"
    PLANE_XY = "PlaneXY"
    LINE_Z = "LineZ"


@dataclass(frozen=True)
class ReadPattern:
    """``index`` is the fixed coordinate for planes (x, y or z) and the (x, y)
    pair for LineZ; ``corner``/``shape`` describe a SubVolume."""

    kind: PatternKind
    index: tuple[int, ...] = ()
    corner: tuple[int, int, int] | None = None
    shape: tuple[int, int, int] | None = None

    @classmethod
    def whole(cls):
        return cls(PatternKind.WHOLE_DOMAIN)

    @classmethod
    def sub_volume(cls, corner, shape):
        return cls(PatternKind.SUB_VOLUME, corner=tuple(corner), shape=tuple(shape))

    @classmethod
    def plane_yz(cls, x: int):
        return cls(PatternKind.PLANE_YZ, (x,))

    @classmethod
    def plane_xz(cls, y: int):
        return cls(PatternKind.PLANE_XZ, (y,))

    @classmethod
    def plane_xy(cls, z: int):
        return cls(PatternKind.PLANE_XY, (z,))

    @classmethod
    def line_z(cls, x: int, y: int):
        return cls(PatternKind.LINE_Z, (x, y))

    def label(self) -> str:
        if self.kind is PatternKind.SUB_VOLUME:
            return f"{self.kind.value}@{self.corner}+{self.shape}"
        if self.index:
            return f"{self.kind.value}@{','.join(map(str, self.index))}"
        return self.kind.value


def default_patterns(grid: GlobalGrid) -> list[ReadPattern]:
    """One instance of each of the six patterns, placed mid-domain."""
    d = grid.dims
    return [
        ReadPattern.whole(),
        ReadPattern.sub_volume(tuple(x // 4 for x in d), tuple(x // 2 for x in d)),
        ReadPattern.plane_yz(d[0] // 2),
        ReadPattern.plane_xz(d[1] // 2),
        ReadPattern.plane_xy(d[2] // 2),
        ReadPattern.line_z(d[0] // 2, d[1] // 2),
    ]


def pattern_region(grid: GlobalGrid, pattern: ReadPattern) -> BlockExtent:
    dx, dy, dz = grid.dims
    k, idx = pattern.kind, pattern.index
    if k is PatternKind.WHOLE_DOMAIN:
        region = grid.extent
    elif k is PatternKind.SUB_VOLUME:
        region = BlockExtent(pattern.corner, pattern.shape)
    elif k is PatternKind.PLANE_YZ:
        region = BlockExtent((idx[0], 0, 0), (1, dy, dz))
    elif k is PatternKind.PLANE_XZ:
        region = BlockExtent((0, idx[0], 0), (dx, 1, dz))
    elif k is PatternKind.PLANE_XY:
        region = BlockExtent((0, 0, idx[0]), (dx, dy, 1))
    else:
        region = BlockExtent((idx[0], idx[1], 0), (1, 1, dz))
    if min(region.offset) < 0 or min(region.shape) < 1 or not grid.extent.contains(region):
        raise OutOfBounds(f"{pattern.label()} falls outside grid {grid.dims}")
    return region


def decompose(region: BlockExtent, scheme: Sequence[int]) -> list[BlockExtent]:
    scheme = tuple(int(s) for s in scheme)
    if len(scheme) != 3 or min(scheme) < 1:
        raise ValueError(f"bad scheme {scheme}")
    if any(s % p for s, p in zip(region.shape, scheme)):
        raise NonDivisible(f"scheme {scheme} does not divide region shape {region.shape}")
    sub = tuple(s // p for s, p in zip(region.shape, scheme))
    out = []
    for i in range(scheme[0]):
        for j in range(scheme[1]):
            for k in range(scheme[2]):
                off = tuple(o + n * s for o, n, s in zip(region.offset, (i, j, k), sub))
                out.append(BlockExtent(off, sub))
    return out


@lru_cache(maxsize=None)
def factorizations(n: int) -> tuple[tuple[int, int, int], ...]:
    return tuple((a, b, n // (a * b)) for a in range(1, n + 1) if n % a == 0
                 for b in range(1, n // a + 1) if (n // a) % b == 0)


def divisible_schemes(region: BlockExtent, n_readers: int) -> list[tuple[int, int, int]]:
    return [f for f in factorizations(n_readers) if all(s % p == 0 for s, p in zip(region.shape, f))]


SEGMENT_DTYPE = np.dtype([("subfile_id", "<i8"), ("byte_offset", "<i8"), ("byte_len", "<i8"), ("dest_offset", "<i8")])


@dataclass
class ReadPlan:
    manifest: LayoutManifest = field(repr=False)
    region: BlockExtent
    segments: np.ndarray  # SEGMENT_DTYPE, sorted by (subfile_id, byte_offset)
    chunks_touched: int

    def to_record(self) -> dict:
        s = self.segments
        return {
            "schema": "read_plan/v1",
            "region": {"offset": list(self.region.offset), "shape": list(self.region.shape)},
            "chunks_touched": self.chunks_touched,
            "segments": [[int(a), int(b), int(c), int(d)] for a, b, c, d in
                         zip(s["subfile_id"], s["byte_offset"], s["byte_len"], s["dest_offset"])],
        }


@dataclass(frozen=True)
class DeviceModel:
    seek_s: float = 1e-3
    bandwidth_Bps: float = float(1 << 30)
    open_s: float = 1e-2

    def __post_init__(self):
        if min(self.seek_s, self.bandwidth_Bps, self.open_s) <= 0:
            raise ValueError("device parameters must be positive")


@dataclass
class ReadMetrics:
    chunks_touched: int = 0
    subfiles_opened: int = 0
    segments: int = 0
    bytes_read: int = 0
    estimated_time: float = 0.0

    def as_dict(self) -> dict:
        return {"schema": "read_metrics/v1", **asdict(self)}


def estimate_read_time(metrics: ReadMetrics, device: DeviceModel = DeviceModel()) -> float:
    return (device.open_s * metrics.subfiles_opened + device.seek_s * metrics.segments
            + metrics.bytes_read / device.bandwidth_Bps)


def _chunk_table(manifest: LayoutManifest):
    tab = manifest.__dict__.get("_chunk_table")
    if tab is None:
        lo = np.array([c.extent.offset for c in manifest.chunks], dtype=np.int64).reshape(-1, 3)
        shape = np.array([c.extent.shape for c in manifest.chunks], dtype=np.int64).reshape(-1, 3)
        tab = (lo, lo + shape, shape)
        manifest.__dict__["_chunk_table"] = tab
    return tab


def _runs(ilo, ishape, clo, cshape, rlo, rshape):
    """Element offsets (in chunk, in region) and length of each contiguous run."""
    j = 2
    while j > 0 and ishape[j] == cshape[j] == rshape[j]:
        j -= 1
    run = int(np.prod(ishape[j:]))
    lead = [np.arange(ilo[a], ilo[a] + ishape[a]) for a in range(j)]
    pts = np.stack([g.ravel() for g in np.meshgrid(*lead, indexing="ij")], axis=1) if j else np.zeros((1, 0), np.int64)
    pts = np.concatenate([pts, np.broadcast_to(ilo[j:], (len(pts), 3 - j))], axis=1)

    def lin(base, shape):
        rel = pts - base
        return (rel[:, 0] * shape[1] + rel[:, 1]) * shape[2] + rel[:, 2]

    return lin(clo, cshape), lin(rlo, rshape), run


def plan_read(manifest: LayoutManifest, subregion: BlockExtent) -> ReadPlan:
    if not manifest.grid.extent.contains(subregion):
        raise OutOfBounds(f"{subregion} outside grid {manifest.grid.dims}")
    lo, hi, shape = _chunk_table(manifest)
    rlo = np.array(subregion.offset, dtype=np.int64)
    rhi = rlo + np.array(subregion.shape, dtype=np.int64)
    rshape = rhi - rlo
    ilo = np.maximum(lo, rlo)
    ihi = np.minimum(hi, rhi)
    hit = np.flatnonzero((ihi > ilo).all(axis=1))
    es = manifest.grid.element_size
    parts = []
    for i in hit:
        c = manifest.chunks[i]
        src, dst, run = _runs(ilo[i], ihi[i] - ilo[i], lo[i], shape[i], rlo, rshape)
        seg = np.empty(len(src), dtype=SEGMENT_DTYPE)
        seg["subfile_id"] = c.subfile_id
        seg["byte_offset"] = c.byte_offset + src * es
        seg["byte_len"] = run * es
        seg["dest_offset"] = dst * es
        parts.append(seg)
    segs = np.concatenate(parts) if parts else np.empty(0, dtype=SEGMENT_DTYPE)
    segs = segs[np.lexsort((segs["byte_offset"], segs["subfile_id"]))]
    return ReadPlan(manifest, subregion, segs, len(hit))


def _expand(starts: np.ndarray, lens: np.ndarray) -> np.ndarray:
    total = int(lens.sum())
    shift = np.repeat(starts - (np.cumsum(lens) - lens), lens)
    return shift + np.arange(total, dtype=np.int64)


def execute_read(plan: ReadPlan, device: DeviceModel = DeviceModel()) -> tuple[np.ndarray, ReadMetrics]:
    m = plan.manifest
    grid, es = m.grid, m.grid.element_size
    region = plan.region
    out = np.empty(region.volume, dtype=grid.dtype)
    segs = plan.segments
    if int(segs["byte_len"].sum()) != region.volume * es:
        raise ManifestMismatch("plan segments do not cover the reader region")
    files = np.unique(segs["subfile_id"])
    for k in files:
        s = segs[segs["subfile_id"] == k]
        path = m.data_path(int(k))
        try:
            data = np.memmap(path, dtype=grid.dtype, mode="r") if path.stat().st_size else np.empty(0, grid.dtype)
        except OSError as e:
            raise IoFailure(str(e)) from e
        if int((s["byte_offset"] + s["byte_len"]).max()) > data.size * es:
            raise ManifestMismatch(f"{path} is shorter than the manifest claims")
        lens = s["byte_len"] // es
        out[_expand(s["dest_offset"] // es, lens)] = data[_expand(s["byte_offset"] // es, lens)]
        del data
    metrics = ReadMetrics(plan.chunks_touched, len(files), len(segs), region.volume * es)
    metrics.estimated_time = estimate_read_time(metrics, device) if len(segs) else 0.0
    return out.reshape(region.shape), metrics


def read_region(manifest: LayoutManifest, region: BlockExtent, scheme, workers: int = 1,
                device: DeviceModel = DeviceModel()):
    """Plan and execute one read per reader; returns ``[(subregion, buffer, metrics)]``."""
    subs = decompose(region, scheme)

    def one(sub):
        buf, met = execute_read(plan_read(manifest, sub), device)
        return sub, buf, met

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            return list(ex.map(one, subs))
    return [one(s) for s in subs]


def verify_buffers(grid: GlobalGrid, results) -> bool:
    """Compare every reader buffer against the ground truth, byte for byte."""
    return all(buf.tobytes() == ground_truth_region(grid, sub).tobytes() for sub, buf, _ in results)


def metrics_ndjson(records) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)
