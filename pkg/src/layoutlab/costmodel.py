"""Node-second cost model: post-hoc vs on-the-fly layout reorganization.

All quantities are :class:`fractions.Fraction` so regime boundaries and
breakeven counts are decided exactly. Symbols:

    t_c  compute time between two outputs (s)
    n, p simulation nodes, processes per node
    m, q reorganization nodes, processes per node
    S    size of one output (GB)
    N    number of outputs
    t_w, t_r, t_s  write / read / stage times looked up in a TimingTable
"""
from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Union

Number = Union[int, float, str, Fraction]


class MissingTimingEntry(KeyError):
    pass


def _q(x: Number) -> Fraction:
    # str() keeps decimal literals such as 19.4 exact
    return x if isinstance(x, Fraction) else Fraction(str(x)) if isinstance(x, float) else Fraction(x)


class Role(enum.Enum):
    WRITE = "write"
    READ = "read"
    STAGE = "stage"


@dataclass(frozen=True)
class TimingKey:
    role: Role
    nodes: int
    ppn: int
    size_gb: Fraction
    src_nodes: int | None = None  # producer side of a stage entry
    src_ppn: int | None = None


@dataclass
class TimingTable:
    """Measured seconds keyed by (role, nodes, ppn, size[, producer nodes, ppn])."""

    entries: dict[TimingKey, Fraction] = field(default_factory=dict)
    interpolate: bool = False

    def add(self, role, nodes, ppn, size_gb, seconds, src_nodes=None, src_ppn=None) -> "TimingTable":
        role = Role(role)
        seconds = _q(seconds)
        if seconds < 0:
            raise ValueError(f"negative time {seconds}")
        if role is Role.STAGE and (src_nodes is None or src_ppn is None):
            raise ValueError("stage entries need the producer's nodes and ppn")
        key = TimingKey(role, int(nodes), int(ppn), _q(size_gb),
                        None if src_nodes is None else int(src_nodes), None if src_ppn is None else int(src_ppn))
        self.entries[key] = seconds
        return self

    def lookup(self, role, nodes, ppn, size_gb, src_nodes=None, src_ppn=None) -> Fraction:
        role, size = Role(role), _q(size_gb)
        key = TimingKey(role, nodes, ppn, size, src_nodes, src_ppn)
        if key in self.entries:
            return self.entries[key]
        if self.interpolate:
            pts = sorted((k.size_gb, v) for k, v in self.entries.items()
                         if replace(k, size_gb=size) == key)
            for (s0, v0), (s1, v1) in zip(pts, pts[1:]):
                if s0 <= size <= s1:
                    return v0 + (v1 - v0) * (size - s0) / (s1 - s0)
        raise MissingTimingEntry(f"no {role.value} timing for nodes={nodes} ppn={ppn} size={size}"
                                 + (f" producer=({src_nodes},{src_ppn})" if role is Role.STAGE else ""))

    def aggregate(self, role, nodes, ppn, size_gb, n_outputs: int) -> Fraction:
        """Time for ``n_outputs`` outputs at once: a measured aggregate entry if
        present, otherwise ``n_outputs`` times the per-output time."""
        key = TimingKey(Role(role), nodes, ppn, _q(size_gb) * n_outputs)
        if key in self.entries:
            return self.entries[key]
        return n_outputs * self.lookup(role, nodes, ppn, size_gb)

    def aggregate_counts(self, role, nodes, ppn, size_gb) -> list[int]:
        size = _q(size_gb)
        out = []
        for k in self.entries:
            if k.role is Role(role) and (k.nodes, k.ppn) == (nodes, ppn) and k.size_gb != size:
                ratio = k.size_gb / size
                if ratio.denominator == 1 and ratio > 1:
                    out.append(int(ratio))
        return sorted(out)

    @classmethod
    def load(cls, path, interpolate: bool = False) -> "TimingTable":
        """Read CSV rows ``role,nodes,ppn,size_gb,seconds[,src_nodes,src_ppn]``.

        Blank lines and lines starting with ``#`` are skipped.
        """
        table = cls(interpolate=interpolate)
        with open(path, newline="") as f:
            rows = [r for r in csv.reader(line for line in f if line.strip() and not line.lstrip().startswith("#"))]
        if rows and rows[0][0].strip() == "role":
            rows = rows[1:]
        for lineno, row in enumerate(rows, 1):
            row = [c.strip() for c in row]
            try:
                role, nodes, ppn, size, secs = row[:5]
                src = [int(c) for c in row[5:7] if c] or [None, None]
                table.add(role, int(nodes), int(ppn), Fraction(size), Fraction(secs), *src)
            except (ValueError, IndexError) as e:
                raise ValueError(f"{path}: row {lineno}: {e}") from e
        return table


def reference_table() -> TimingTable:
    """The staging experiment's measurements (256x6 simulation, 2x32 staging, 256 GB)."""
    return (TimingTable()
            .add("stage", 2, 32, 256, "19.4", src_nodes=256, src_ppn=6)
            .add("write", 2, 32, 256, "13.6")
            .add("write", 256, 6, 256, "1.4")
            .add("read", 2, 32, 256, "11.1"))


@dataclass(frozen=True)
class CostParams:
    t_c: Fraction
    n: int
    p: int
    m: int
    q: int
    S: Fraction
    N: int
    timing: TimingTable = field(compare=False, repr=False, hash=False)

    def __post_init__(self):
        object.__setattr__(self, "t_c", _q(self.t_c))
        object.__setattr__(self, "S", _q(self.S))
        if min(self.n, self.p, self.m, self.q, self.N) < 1:
            raise ValueError("node/process/output counts must be >= 1")
        if self.t_c < 0 or self.S <= 0:
            raise ValueError("t_c must be >= 0 and S > 0")

    def with_(self, **kw) -> "CostParams":
        return replace(self, **kw)

    # measured terms
    def t_w_sim(self) -> Fraction:
        return self.timing.lookup(Role.WRITE, self.n, self.p, self.S)

    def t_s(self) -> Fraction:
        return self.timing.lookup(Role.STAGE, self.m, self.q, self.S, self.n, self.p)

    def t_w_reorg(self) -> Fraction:
        return self.timing.lookup(Role.WRITE, self.m, self.q, self.S)

    def d(self) -> Fraction:
        """Stage plus reorganized write for one output."""
        return self.t_s() + self.t_w_reorg()

    def posthoc_job(self, N: int | None = None) -> Fraction:
        """Read plus write time of the separate reorganization job over N outputs."""
        N = self.N if N is None else N
        return (self.timing.aggregate(Role.READ, self.m, self.q, self.S, N)
                + self.timing.aggregate(Role.WRITE, self.m, self.q, self.S, N))


def reference_params(t_c: Number, N: int = 1) -> CostParams:
    return CostParams(_q(t_c), 256, 6, 2, 32, Fraction(256), N, reference_table())


class Regime(enum.Enum):
    POST_HOC = "PostHoc"
    ON_THE_FLY_NON_BLOCKING = "OnTheFlyNonBlocking"
    ON_THE_FLY_BLOCKING = "OnTheFlyBlocking"


@dataclass(frozen=True)
class Utilization:
    u: Fraction  # node-seconds
    regime: Regime
    makespan: Fraction  # seconds

    def as_dict(self) -> dict:
        return {"u_node_s": float(self.u), "u_exact": str(self.u), "regime": self.regime.value,
                "makespan_s": float(self.makespan)}


def u_posthoc(P: CostParams) -> Utilization:
    sim = P.N * (P.t_c + P.t_w_sim())
    job = P.posthoc_job()
    return Utilization(P.n * sim + P.m * job, Regime.POST_HOC, sim + job)


def onthefly_makespan(t_c: Fraction, d: Fraction, N: int) -> Fraction:
    return N * t_c + d if d <= t_c else t_c + N * d


def u_onthefly(P: CostParams) -> Utilization:
    d = P.d()
    regime = Regime.ON_THE_FLY_NON_BLOCKING if d <= P.t_c else Regime.ON_THE_FLY_BLOCKING
    span = onthefly_makespan(P.t_c, d, P.N)
    return Utilization((P.n + P.m) * span, regime, span)


def breakeven_outputs(P: CostParams) -> int | None:
    """Smallest N >= 1 for which on-the-fly uses fewer node-seconds, else None."""
    # measured aggregate entries break linearity for N up to the largest one
    counts = (P.timing.aggregate_counts(Role.READ, P.m, P.q, P.S)
              + P.timing.aggregate_counts(Role.WRITE, P.m, P.q, P.S))
    K = max(counts, default=0)
    for N in range(1, K + 1):
        Q = P.with_(N=N)
        if u_onthefly(Q).u < u_posthoc(Q).u:
            return N
    # beyond K both utilizations are affine in N: u = slope * N + const
    d, t_c = P.d(), P.t_c
    post_slope = P.n * (t_c + P.t_w_sim()) + P.m * (P.timing.lookup(Role.READ, P.m, P.q, P.S)
                                                    + P.timing.lookup(Role.WRITE, P.m, P.q, P.S))
    if d <= t_c:
        otf_slope, otf_const = (P.n + P.m) * t_c, (P.n + P.m) * d
    else:
        otf_slope, otf_const = (P.n + P.m) * d, (P.n + P.m) * t_c
    gain = post_slope - otf_slope
    if gain <= 0:
        return None
    return max(K + 1, math.floor(otf_const / gain) + 1)


@dataclass(frozen=True)
class Interval:
    """Open or half-open range of t_c values; ``None`` bounds are unbounded."""

    lower: Fraction | None
    upper: Fraction | None
    lower_closed: bool = False
    upper_closed: bool = False

    @property
    def empty(self) -> bool:
        if self.lower is None or self.upper is None:
            return False
        if self.lower < self.upper:
            return False
        return not (self.lower == self.upper and self.lower_closed and self.upper_closed)

    def __contains__(self, x) -> bool:
        x = _q(x)
        if self.lower is not None and (x < self.lower or (x == self.lower and not self.lower_closed)):
            return False
        if self.upper is not None and (x > self.upper or (x == self.upper and not self.upper_closed)):
            return False
        return True

    def __str__(self) -> str:
        if self.empty:
            return "empty"
        lo = "-inf" if self.lower is None else f"{float(self.lower):.4g}"
        hi = "inf" if self.upper is None else f"{float(self.upper):.4g}"
        return f"{'[' if self.lower_closed else '('}{lo}, {hi}{']' if self.upper_closed else ')'}"

    def as_dict(self) -> dict:
        f = lambda v: None if v is None else float(v)  # noqa: E731
        return {"lower": f(self.lower), "upper": f(self.upper), "lower_closed": self.lower_closed,
                "upper_closed": self.upper_closed, "empty": self.empty}


EMPTY = Interval(Fraction(0), Fraction(0))


def _intersect(a: Interval, b: Interval) -> Interval:
    lo, lc = a.lower, a.lower_closed
    if b.lower is not None and (lo is None or b.lower > lo or (b.lower == lo and not b.lower_closed)):
        lo, lc = b.lower, b.lower_closed
    hi, hc = a.upper, a.upper_closed
    if b.upper is not None and (hi is None or b.upper < hi or (b.upper == hi and not b.upper_closed)):
        hi, hc = b.upper, b.upper_closed
    out = Interval(lo, hi, lc, hc)
    return EMPTY if out.empty else out


@dataclass(frozen=True)
class FeasibleTc:
    blocking: Interval  # t_c < d
    non_blocking: Interval  # t_c >= d

    def __contains__(self, t_c) -> bool:
        return t_c in self.blocking or t_c in self.non_blocking

    def as_dict(self) -> dict:
        return {"blocking": self.blocking.as_dict(), "non_blocking": self.non_blocking.as_dict()}


ASYMPTOTIC = "asymptotic"


def feasible_tc_interval(P: CostParams, N: int | str | None = None) -> FeasibleTc:
    """t_c values for which on-the-fly beats post-hoc, per regime.

    ``N`` defaults to ``P.N``; pass ``ASYMPTOTIC`` for the N -> infinity limit
    (per-output linear post-hoc cost assumed there).
    """
    N = P.N if N is None else N
    n, m, d, w = P.n, P.m, P.d(), P.t_w_sim()
    blocking_range = Interval(Fraction(0), d, True, False)
    nonblocking_range = Interval(d, None, True, False)
    if N == ASYMPTOTIC:
        r = P.timing.lookup(Role.READ, P.m, P.q, P.S) + P.timing.lookup(Role.WRITE, P.m, P.q, P.S)
        blk = Interval(((n + m) * d - n * w - m * r) / n, None)
        nb = Interval(None, (n * w + m * r) / m)
        return FeasibleTc(_intersect(blk, blocking_range), _intersect(nb, nonblocking_range))

    N = int(N)
    R = P.posthoc_job(N)
    # blocking: (n+m)(t_c + N d) < n N (t_c + w) + m R  <=>  A t_c > C
    A = n * N - (n + m)
    C = (n + m) * N * d - n * N * w - m * R
    if A > 0:
        blk = Interval(C / A, None)
    elif A < 0:
        blk = Interval(None, C / A)
    else:
        blk = Interval(None, None) if C < 0 else EMPTY
    # non-blocking: (n+m)(N t_c + d) < n N (t_c + w) + m R  <=>  m N t_c < n N w + m R - (n+m) d
    nb = Interval(None, (n * N * w + m * R - (n + m) * d) / (m * N))
    return FeasibleTc(_intersect(blk, blocking_range), _intersect(nb, nonblocking_range))


@dataclass(frozen=True)
class Tradeoff:
    loss: float
    gain: float
    net: float


def node_seconds_tradeoff(writer_nodes: int, writer_overhead: float, reader_nodes: int, reader_saving: float) -> Tradeoff:
    """Writer-side node-seconds lost vs reader-side node-seconds saved by merging."""
    if min(writer_nodes, writer_overhead, reader_nodes, reader_saving) < 0:
        raise ValueError("inputs must be non-negative")
    loss = writer_nodes * writer_overhead
    gain = reader_nodes * reader_saving
    return Tradeoff(loss, gain, gain - loss)


def cost_report(P: CostParams) -> dict:
    post, otf = u_posthoc(P), u_onthefly(P)
    return {
        "schema": "cost/v1",
        "t_c": float(P.t_c), "N": P.N, "d": float(P.d()),
        "posthoc": post.as_dict(),
        "onthefly": otf.as_dict(),
        "breakeven_N": breakeven_outputs(P),
        "tc_interval": feasible_tc_interval(P).as_dict(),
        "tc_interval_asymptotic": feasible_tc_interval(P, ASYMPTOTIC).as_dict(),
    }


def load_table(path: str | Path | None) -> TimingTable:
    return reference_table() if path is None else TimingTable.load(path)
