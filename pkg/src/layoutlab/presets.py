"""Hand-built block configurations and experiment presets.

Block ids are canonical ids on a 4x4x4 block grid (id = (x*4 + y)*4 + z).
"""
from __future__ import annotations

# 16 blocks, x-slice occupancy 1/16, 5/16, 7/16, 3/16; first cut is a
# Laplacian zero crossing on the y axis.
SPLIT_DEMO_BLOCKS = (13, 17, 18, 19, 21, 22, 33, 34, 37, 38, 43, 44, 47, 59, 60, 63)

# 16 blocks of one process that cluster into 6 filled cuboids; same x-slice
# occupancy as SPLIT_DEMO_BLOCKS, first cut is a y-axis hole.
MERGE_DEMO_BLOCKS = (13, 16, 17, 20, 21, 29, 32, 33, 34, 35, 36, 37, 39, 50, 51, 55)

PRESETS = {
    # 512^3 mesh in 64 blocks of 128^3, four processes
    "mesh512": {"grid": {"dims": [512, 512, 512], "block_shape": [128, 128, 128]},
             "assignment": {"ranks": 4, "ranks_per_node": 1}},
    "desk": {"grid": {"dims": [64, 64, 64], "block_shape": [8, 8, 8]},
             "assignment": {"ranks": 8, "ranks_per_node": 2}},
    # 16 MiB chunks of doubles (128^3 * 8 B)
    "bench16m": {"grid": {"dims": [256, 256, 256], "block_shape": [128, 128, 128]},
                 "assignment": {"ranks": 8, "ranks_per_node": 4}},
}
