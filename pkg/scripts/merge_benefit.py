"""Sweep the seeded instance suite and report how IntraProcess merging changes reads.

Usage: python3 scripts/merge_benefit.py [--instances 1000] [--out merge_benefit.ndjson]
"""
import argparse
import json

import numpy as np

from layoutlab.clustering import reduce_blocks
from layoutlab.domain import make_dataset
from layoutlab.reader import default_patterns, pattern_region
from layoutlab.suite import chunk_manifest, instance, planned_metrics


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--instances", type=int, default=1000)
    ap.add_argument("--out", default="merge_benefit.ndjson")
    args = ap.parse_args()

    rows = []
    for i in range(args.instances):
        grid, asg = instance(i)
        ds = make_dataset(grid, asg)
        merged, _ = reduce_blocks(ds, "IntraProcess")
        before, after = chunk_manifest(ds), chunk_manifest(merged)
        for p in default_patterns(grid):
            region = pattern_region(grid, p)
            b, a = planned_metrics(before, region), planned_metrics(after, region)
            rows.append({"schema": "merge_benefit/v1", "instance": i, "pattern": p.kind.value,
                         "blocks_before": len(ds.blocks), "blocks_after": len(merged.blocks),
                         "chunks_before": b.chunks_touched, "chunks_after": a.chunks_touched,
                         "segments_before": b.segments, "segments_after": a.segments,
                         "time_before": b.estimated_time, "time_after": a.estimated_time})
    with open(args.out, "w") as f:
        f.writelines(json.dumps(r) + "\n" for r in rows)

    print(f"{'pattern':<12} {'chunks before':>14} {'chunks after':>13} {'faster':>8} {'tied':>6} {'slower':>7}")
    for kind in dict.fromkeys(r["pattern"] for r in rows):
        sel = [r for r in rows if r["pattern"] == kind]
        tb = np.array([r["time_before"] for r in sel])
        ta = np.array([r["time_after"] for r in sel])
        print(f"{kind:<12} {np.mean([r['chunks_before'] for r in sel]):>14.2f} "
              f"{np.mean([r['chunks_after'] for r in sel]):>13.2f} {np.mean(ta < tb):>8.1%} "
              f"{np.mean(ta == tb):>6.1%} {np.mean(ta > tb):>7.1%}")


if __name__ == "__main__":
    main()
