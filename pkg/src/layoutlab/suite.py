"""Seeded random instance suite shared by tests, acceptance checks and scripts."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .domain import BlockAssignment, GlobalGrid, assign_blocks, make_grid
from .layout import ChunkRecord, LayoutManifest, Strategy
from .reader import DeviceModel, ReadMetrics, estimate_read_time, plan_read


@dataclass(frozen=True)
class SuiteSpec:
    min_edge: int = 4  # block grid edge, in blocks
    max_edge: int = 8
    min_ranks: int = 2
    max_ranks: int = 16
    max_exchange_factor: int = 2  # exchanges drawn from [0, factor * B]
    cells_per_block: int = 2


def instance(i: int, spec: SuiteSpec = SuiteSpec()) -> tuple[GlobalGrid, BlockAssignment]:
    """Instance ``i``: cubic block grid, rank count and swap count all drawn from seed ``i``."""
    rng = np.random.default_rng(i)
    edge = int(rng.integers(spec.min_edge, spec.max_edge + 1))
    c = spec.cells_per_block
    grid = make_grid((edge * c,) * 3, (c,) * 3)
    B = grid.n_blocks
    n = int(rng.integers(spec.min_ranks, spec.max_ranks + 1))
    ex = int(rng.integers(0, spec.max_exchange_factor * B + 1))
    return grid, assign_blocks(grid, n, 1, seed=i, exchanges=ex)


def chunk_manifest(dataset) -> LayoutManifest:
    """In-memory Chunked manifest (rank order, then offset order) with no files behind it."""
    chunks, pos = [], 0
    for r, blocks in dataset.by_rank().items():
        for b in blocks:
            chunks.append(ChunkRecord(b.extent, 0, pos, r))
            pos += b.data.nbytes
    return LayoutManifest(Strategy.CHUNKED, dataset.grid, tuple(chunks))


def planned_metrics(manifest: LayoutManifest, region, device: DeviceModel = DeviceModel()) -> ReadMetrics:
    """Metrics a single reader of ``region`` would report, from the plan alone."""
    plan = plan_read(manifest, region)
    segs = plan.segments
    met = ReadMetrics(plan.chunks_touched, len(np.unique(segs["subfile_id"])), len(segs),
                      region.volume * manifest.grid.element_size)
    met.estimated_time = estimate_read_time(met, device) if len(segs) else 0.0
    return met
