"""Block-structured array layouts, block merging, read planning and I/O cost modelling."""
from .domain import (Block, BlockAssignment, BlockExtent, Dataset, GlobalGrid, assign_blocks,
                     ground_truth, ground_truth_region, make_dataset, make_grid)
from .clustering import MergeMode, cluster, reduce_blocks
from .layout import load_manifest, write_layout
from .reader import plan_read, execute_read, read_region

__version__ = "0.1.0"
