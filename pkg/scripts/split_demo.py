"""Print signatures, Laplacians and the cluster trace for a reconstructed block set.

Usage: python3 scripts/split_demo.py [split|merge]
"""
import sys
from collections import deque

from layoutlab.clustering import bounding_cuboid, find_split, laplacian, signature, split
from layoutlab.domain import make_grid
from layoutlab.presets import MERGE_DEMO_BLOCKS, SPLIT_DEMO_BLOCKS

SETS = {"split": SPLIT_DEMO_BLOCKS, "merge": MERGE_DEMO_BLOCKS}


def fmt(values):
    return "[" + ", ".join(str(v) for v in values) + "]"


def main():
    name = sys.argv[1] if len(sys.argv) > 1 else "split"
    grid = make_grid((4, 4, 4), (1, 1, 1))
    root = bounding_cuboid(SETS[name], grid)
    for axis in range(3):
        sig = signature(root, axis)
        print(f"axis {'xyz'[axis]}: U={fmt(sig.values)} laplacian={fmt(laplacian(sig).values)}")
    queue, step = deque([root]), 0
    while queue:
        c = queue.popleft()
        if c.is_filled:
            print(f"  cuboid offset={c.extent.offset} shape={c.extent.shape}")
            continue
        d = find_split(c)
        step += 1
        print(f"split {step}: {c.extent.offset}+{c.extent.shape} on {d.axis_name} at {d.index} ({d.cause.value})")
        queue.extend(split(c, d))


if __name__ == "__main__":
    main()
