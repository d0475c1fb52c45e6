"""``layoutlab`` command line: gen, write, merge, read, bench, cost, sim.

Every report line is one JSON object carrying a ``schema`` field. Wall-clock
measurements live only in the fields named in ``WALL_CLOCK_FIELDS``; everything
else is deterministic for a given config and seed.

Exit codes: 0 ok, 2 config error, 3 runtime error, 4 oracle mismatch.
"""
from __future__ import annotations

import argparse
import json
import os
import statistics
import sys
import time
from dataclasses import asdict
from pathlib import Path

from . import config as cfgmod
from .clustering import MergeMode, reduce_blocks
from .config import ConfigError, ExperimentConfig
from .costmodel import CostParams, cost_report, load_table
from .domain import Dataset, NonDivisible, TooManyRanks, assign_blocks, make_dataset, make_grid
from .layout import load_manifest, rearrangement_bytes, write_layout
from .reader import (DeviceModel, PatternKind, ReadPattern, default_patterns, divisible_schemes,
                     pattern_region, read_region, verify_buffers)
from .stagesim import ModelMismatch, PipelineSpec, compare_with_model, simulate

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_ORACLE = 0, 2, 3, 4

WALL_CLOCK_FIELDS = frozenset({"wall_write_s", "t_cluster_s", "t_merge_s", "t_gather_s"})

MERGE_NAMES = {"none": None, "intraprocess": MergeMode.INTRA_PROCESS, "intranode": MergeMode.INTRA_NODE}


class OracleMismatch(AssertionError):
    pass


def strip_wall_clock(record: dict) -> dict:
    """Record without its wall-clock fields, for golden comparisons."""
    return {k: v for k, v in record.items() if k not in WALL_CLOCK_FIELDS}


class Reporter:
    """Writes records to stdout and to ``<out>/<command>.ndjson``."""

    def __init__(self, out: Path, command: str, as_json: bool = True, stream=None):
        self.path = out / f"{command}.ndjson"
        self.as_json = as_json
        self.stream = stream or sys.stdout
        out.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "w")

    def emit(self, record: dict) -> None:
        line = json.dumps(record, sort_keys=True)
        self._fh.write(line + "\n")
        if self.stream is None:
            return
        text = line if self.as_json else "  ".join(f"{k}={v}" for k, v in record.items())
        try:
            print(text, file=self.stream, flush=True)
        except BrokenPipeError:
            # reader went away (e.g. piped into head); keep running and keep the file complete
            if self.stream is sys.stdout:
                os.dup2(os.open(os.devnull, os.O_WRONLY), sys.stdout.fileno())
            self.stream = None

    def close(self):
        self._fh.close()


# -- config helpers ---------------------------------------------------------

def _merge_mode(name: str) -> MergeMode | None:
    return MERGE_NAMES[str(name).lower()]


def _merge_tag(mode: MergeMode | None) -> str:
    return "none" if mode is None else mode.value


def parse_pattern(spec: dict) -> ReadPattern:
    try:
        kind = PatternKind(spec["kind"])
    except (KeyError, ValueError):
        raise ConfigError(f"patterns: bad pattern kind in {spec!r}") from None
    idx = tuple(int(i) for i in spec.get("index", ()))
    if kind is PatternKind.WHOLE_DOMAIN:
        return ReadPattern.whole()
    if kind is PatternKind.SUB_VOLUME:
        if "corner" not in spec or "shape" not in spec:
            raise ConfigError(f"patterns: SubVolume needs corner and shape: {spec!r}")
        return ReadPattern.sub_volume(spec["corner"], spec["shape"])
    want = 2 if kind is PatternKind.LINE_Z else 1
    if len(idx) != want:
        raise ConfigError(f"patterns: {kind.value} needs {want} index value(s): {spec!r}")
    return ReadPattern(kind, idx)


def build_patterns(cfg: ExperimentConfig, grid) -> list[ReadPattern]:
    if cfg.patterns == "default":
        pats = default_patterns(grid)
    else:
        pats = [parse_pattern(p) for p in cfg.patterns]
    for p in pats:
        try:
            pattern_region(grid, p)
        except Exception as e:
            raise ConfigError(f"patterns: {p.label()}: {e}") from e
    return pats


def build_grid(cfg: ExperimentConfig):
    g = cfg.grid
    try:
        return make_grid(g.dims, g.block_shape, g.element_size)
    except NonDivisible as e:
        raise ConfigError(f"grid: NonDivisible: {e}") from e
    except ValueError as e:
        raise ConfigError(f"grid: {e}") from e


def build_assignment(cfg: ExperimentConfig):
    grid = build_grid(cfg)
    a = cfg.assignment
    try:
        return grid, assign_blocks(grid, a.ranks, a.ranks_per_node, a.seed, a.exchanges, a.locality_scale)
    except TooManyRanks as e:
        raise ConfigError(f"assignment: TooManyRanks: {e}") from e


def build_dataset(cfg: ExperimentConfig) -> Dataset:
    return make_dataset(*build_assignment(cfg))


def build_cost_params(cfg: ExperimentConfig) -> CostParams:
    c = cfg.cost
    if c.timing_table is not None and not Path(c.timing_table).is_file():
        raise ConfigError(f"cost.timing_table: file not found: {c.timing_table}")
    table = load_table(c.timing_table)
    table.interpolate = c.interpolate
    try:
        return CostParams(c.t_c, c.n, c.p, c.m, c.q, c.S, c.N, table)
    except ValueError as e:
        raise ConfigError(f"cost: {e}") from e


def device_of(cfg: ExperimentConfig) -> DeviceModel:
    try:
        return DeviceModel(**asdict(cfg.device))
    except ValueError as e:
        raise ConfigError(f"device: {e}") from e


def dataset_path(out: Path, mode: MergeMode | None) -> Path:
    return out / ("dataset.npz" if mode is None else f"merged-{mode.value}.npz")


def layout_base(out: Path, strategy: str, mode: MergeMode | None) -> Path:
    return out / "layouts" / f"{strategy}+{_merge_tag(mode)}" / "data"


def _load_dataset(path: Path) -> Dataset:
    if not path.is_file():
        raise FileNotFoundError(f"{path} not found; run the upstream command first")
    return Dataset.load(path)


# -- commands ----------------------------------------------------------------

def assignment_report(grid, asg) -> dict:
    per_rank = [len(v) for v in asg.rank_blocks().values()]
    per_node = [0] * asg.n_nodes
    for r, n in enumerate(per_rank):
        per_node[asg.node_of(r)] += n
    return {"schema": "gen/v1", "dims": list(grid.dims), "block_shape": list(grid.block_shape),
            "element_size": grid.element_size, "n_blocks": grid.n_blocks, "ranks": asg.n_ranks,
            "ranks_per_node": asg.ranks_per_node, "seed": asg.seed, "exchanges": asg.exchanges,
            "blocks_per_rank": per_rank, "blocks_per_node": per_node}


def cmd_gen(cfg: ExperimentConfig, rep: Reporter, out: Path) -> int:
    """Generate the block assignment and ground-truth payloads."""
    grid, asg = build_assignment(cfg)
    if cfg.materialize:
        make_dataset(grid, asg).save(dataset_path(out, None))
    rep.emit(assignment_report(grid, asg))
    return EXIT_OK


def cmd_merge(cfg: ExperimentConfig, rep: Reporter, out: Path) -> int:
    """Cluster and merge blocks per rank or per node."""
    mode = _merge_mode(cfg.merge) or MergeMode.INTRA_PROCESS
    ds = _load_dataset(dataset_path(out, None))
    merged, records = reduce_blocks(ds, mode)
    merged.save(dataset_path(out, mode))
    for r in records:
        rep.emit(r.as_dict())
    rep.emit({"schema": "merge/v1", "mode": mode.value, "blocks_before": len(ds.blocks),
              "blocks_after": len(merged.blocks)})
    return EXIT_OK


def cmd_write(cfg: ExperimentConfig, rep: Reporter, out: Path) -> int:
    """Write the dataset in one layout strategy."""
    mode = _merge_mode(cfg.merge)
    ds = _load_dataset(dataset_path(out, mode))
    base = layout_base(out, cfg.strategy, mode)
    base.parent.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    m = write_layout(ds, cfg.strategy, base)
    wall = time.perf_counter() - t0
    rep.emit({"schema": "write/v1", "strategy": cfg.strategy, "merge": _merge_tag(mode),
              "chunks": len(m.chunks), "subfile_count": m.subfile_count, "bytes": ds.grid.nbytes,
              "rearrangement_bytes": rearrangement_bytes(ds, m.strategy), "wall_write_s": wall})
    return EXIT_OK


def _read_record(pattern: ReadPattern, scheme, results, verified) -> dict:
    mets = [m for _, _, m in results]
    return {
        "pattern": pattern.label(), "readers": len(results), "scheme": list(scheme),
        "chunks_touched": sum(m.chunks_touched for m in mets),
        "subfiles_opened": sum(m.subfiles_opened for m in mets),
        "segments": sum(m.segments for m in mets),
        "bytes_read": sum(m.bytes_read for m in mets),
        # readers run concurrently, so the slowest one sets the time
        "estimated_time": max(m.estimated_time for m in mets),
        "oracle": "skipped" if verified is None else ("ok" if verified else "mismatch"),
    }


def _sweep(manifest, cfg, patterns, device, check: bool):
    """Yield (pattern, n_readers, [records over schemes])."""
    grid = manifest.grid
    for p in patterns:
        region = pattern_region(grid, p)
        for n in cfg.readers:
            recs = []
            for scheme in divisible_schemes(region, n):
                res = read_region(manifest, region, scheme, device=device)
                recs.append(_read_record(p, scheme, res, verify_buffers(grid, res) if check else None))
            yield p, n, recs


def cmd_read(cfg: ExperimentConfig, rep: Reporter, out: Path) -> int:
    """Read every pattern and decomposition back, checking the oracle."""
    mode = _merge_mode(cfg.merge)
    base = layout_base(out, cfg.strategy, mode)
    manifest = load_manifest(base)
    patterns = build_patterns(cfg, manifest.grid)
    device = device_of(cfg)
    bad = 0
    for _, _, recs in _sweep(manifest, cfg, patterns, device, cfg.oracle):
        for r in recs:
            bad += r["oracle"] == "mismatch"
            rep.emit({"schema": "read/v1", "strategy": cfg.strategy, "merge": _merge_tag(mode), **r})
    if bad:
        raise OracleMismatch(f"{bad} read(s) differ from ground truth")
    return EXIT_OK


def cmd_bench(cfg: ExperimentConfig, rep: Reporter, out: Path) -> int:
    """Sweep strategies, merge variants, patterns and reader counts.

    Every divisible decomposition is run; each cell reports best, median and max."""
    base_ds = build_dataset(cfg)
    device = device_of(cfg)
    patterns = build_patterns(cfg, base_ds.grid)
    variants = {None: base_ds}
    for mode in MergeMode:
        variants[mode], _ = reduce_blocks(base_ds, mode)
    bad = 0
    for strategy in cfg.strategies:
        for mode, ds in variants.items():
            target = layout_base(out / "bench", strategy, mode)
            target.parent.mkdir(parents=True, exist_ok=True)
            manifest = write_layout(ds, strategy, target)
            for p, n, recs in _sweep(manifest, cfg, patterns, device, cfg.oracle):
                if not recs:
                    continue
                bad += sum(r["oracle"] == "mismatch" for r in recs)
                times = [r["estimated_time"] for r in recs]
                best = min(recs, key=lambda r: (r["estimated_time"], r["scheme"]))
                rep.emit({
                    "schema": "bench/v1", "strategy": strategy, "merge": _merge_tag(mode),
                    "pattern": p.label(), "readers": n, "schemes": len(recs),
                    "best_scheme": best["scheme"], "best_time": best["estimated_time"],
                    "median_time": statistics.median(times), "max_time": max(times),
                    "chunks_touched": best["chunks_touched"], "segments": best["segments"],
                    "subfiles_opened": best["subfiles_opened"],
                    "oracle": "skipped" if not cfg.oracle else ("ok" if all(r["oracle"] == "ok" for r in recs) else "mismatch"),
                })
    if bad:
        raise OracleMismatch(f"{bad} read(s) differ from ground truth")
    return EXIT_OK


def cmd_cost(cfg: ExperimentConfig, rep: Reporter, out: Path) -> int:
    """Report post-hoc vs on-the-fly node-seconds."""
    rep.emit(cost_report(build_cost_params(cfg)))
    return EXIT_OK


def cmd_sim(cfg: ExperimentConfig, rep: Reporter, out: Path) -> int:
    """Simulate the staging pipeline and compare with the model."""
    P = build_cost_params(cfg)
    spec = PipelineSpec(P, buffer_depth=cfg.sim.buffer_depth)
    tl = simulate(spec)
    if cfg.sim.events:
        (out / "sim_events.ndjson").write_text(tl.ndjson())
    rec = {"schema": "sim/v1", "t_c": float(P.t_c), "N": P.N, "buffer_depth": spec.buffer_depth,
           "makespan_s": float(tl.makespan), "blocked_s": float(tl.blocked_time),
           "u_node_s": float(tl.utilization), "u_exact": str(tl.utilization), "events": len(tl.events)}
    rep.emit(rec)
    if spec.buffer_depth == 1:
        rep.emit(compare_with_model(spec))
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "write": cmd_write, "merge": cmd_merge, "read": cmd_read,
            "bench": cmd_bench, "cost": cmd_cost, "sim": cmd_sim}


# -- argument handling -------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    g = common.add_argument_group("global")
    g.add_argument("--config", type=Path, help="YAML experiment config")
    g.add_argument("--seed", type=int, help="assignment RNG seed (u64)")
    g.add_argument("--out", type=Path, help="output directory")
    g.add_argument("--json", action=argparse.BooleanOptionalAction,
                   help="emit NDJSON on stdout (default on)")
    o = common.add_argument_group("overrides")
    o.add_argument("--preset", help="named preset applied under the config file")
    o.add_argument("--strategy", help="Contiguous, Chunked, Subfiled-FPP or Subfiled-FPN")
    o.add_argument("--merge", help="none, IntraProcess or IntraNode")
    o.add_argument("--ranks", type=int)
    o.add_argument("--exchanges", type=int)
    o.add_argument("--readers", type=lambda s: [int(x) for x in s.split(",")], help="comma list, e.g. 1,2,4,8")
    o.add_argument("--no-oracle", action="store_true", help="skip ground-truth verification")
    o.add_argument("--report-only", action="store_true", help="gen: emit the assignment report without payloads")
    o.add_argument("--timing", help="timing table CSV for cost/sim")
    o.add_argument("--t-c", dest="t_c", help="compute seconds per output")
    o.add_argument("--outputs", "-N", dest="N", type=int, help="number of outputs N")
    o.add_argument("--buffer-depth", type=int)
    o.add_argument("--events", action="store_true", help="sim: also write sim_events.ndjson")

    p = argparse.ArgumentParser(prog="layoutlab", description=__doc__.splitlines()[0], parents=[common])
    sub = p.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=(fn.__doc__ or name).splitlines()[0])
    return p


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    """defaults < preset < config file < flags."""
    raw: dict = {}
    lines: dict = {}
    source = "<flags>"
    if getattr(args, "config", None) is not None:
        raw, lines, source = cfgmod.read_yaml(args.config)
    if getattr(args, "preset", None):
        raw.setdefault("preset", args.preset)
    flags = {
        ("assignment", "seed"): getattr(args, "seed", None),
        ("assignment", "ranks"): getattr(args, "ranks", None),
        ("assignment", "exchanges"): getattr(args, "exchanges", None),
        ("cost", "timing_table"): getattr(args, "timing", None),
        ("cost", "t_c"): getattr(args, "t_c", None),
        ("cost", "N"): getattr(args, "N", None),
        ("sim", "buffer_depth"): getattr(args, "buffer_depth", None),
        (None, "strategy"): getattr(args, "strategy", None),
        (None, "merge"): getattr(args, "merge", None),
        (None, "readers"): getattr(args, "readers", None),
        (None, "out"): None if getattr(args, "out", None) is None else str(args.out),
    }
    for (section, key), v in flags.items():
        if v is None:
            continue
        if section is None:
            raw[key] = v
        else:
            raw.setdefault(section, {})
            if not isinstance(raw[section], dict):
                raise ConfigError(f"{source}: {section}: expected a mapping")
            raw[section][key] = v
    if getattr(args, "no_oracle", False):
        raw["oracle"] = False
    if getattr(args, "report_only", False):
        raw["materialize"] = False
    if getattr(args, "events", False):
        raw.setdefault("sim", {})["events"] = True
    return cfgmod.from_dict(raw, lines, source)


def main(argv=None, stream=None) -> int:
    stream = stream or sys.stdout
    parser = build_parser()
    args = parser.parse_args(argv)
    err = sys.stderr

    def fail(code, kind, e):
        print(json.dumps({"schema": "error/v1", "kind": kind, "error": type(e).__name__, "message": str(e)}),
              file=err)
        return code

    try:
        cfg = resolve_config(args)
        out = Path(cfg.out)
        rep = Reporter(out, args.command, getattr(args, "json", True), stream)
    except ConfigError as e:
        return fail(EXIT_CONFIG, "config", e)
    try:
        return COMMANDS[args.command](cfg, rep, out)
    except ConfigError as e:
        return fail(EXIT_CONFIG, "config", e)
    except (OracleMismatch, ModelMismatch) as e:
        return fail(EXIT_ORACLE, "oracle", e)
    except Exception as e:  # module errors surface as runtime failures
        return fail(EXIT_RUNTIME, "runtime", e)
    finally:
        rep.close()


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
