"""Event-driven simulation of the simulation -> staging -> file-system pipeline.

The producer computes output k, then hands it to the staging buffer. The
reorganization pipeline stages and writes one output at a time. With buffer
depth 1 (the default) the handoff of output k waits until output k-1 has been
written; a deeper buffer is a what-if knob and goes beyond the closed-form
model. The clock is exact (``Fraction``).
"""
from __future__ import annotations

import enum
import heapq
import json
from collections import deque
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

from .costmodel import CostParams, _q, u_onthefly


class ModelMismatch(AssertionError):
    def __init__(self, simulated, modeled):
        super().__init__(f"simulated utilization {simulated} != model {modeled}")
        self.simulated = simulated
        self.modeled = modeled


class EventKind(enum.IntEnum):
    # value doubles as priority at equal times: finishing a write frees the
    # buffer before a simultaneous compute end tries to hand off
    WRITE_END = 0
    STAGE_END = 1
    COMPUTE_END = 2

    @property
    def label(self) -> str:
        return {0: "WriteEnd", 1: "StageEnd", 2: "ComputeEnd"}[self.value]


@dataclass
class PipelineSpec:
    params: CostParams
    t_c: Sequence | None = None
    t_s: Sequence | None = None
    t_w: Sequence | None = None
    buffer_depth: int = 1

    def __post_init__(self):
        N = self.params.N
        for name in ("t_c", "t_s", "t_w"):
            seq = getattr(self, name)
            if seq is not None:
                if len(seq) != N:
                    raise ValueError(f"{name} override has {len(seq)} entries, expected N={N}")
                setattr(self, name, [_q(v) for v in seq])
        if self.buffer_depth < 1:
            raise ValueError("buffer_depth must be >= 1")

    @property
    def constant(self) -> bool:
        return self.t_c is None and self.t_s is None and self.t_w is None

    def steps(self):
        P, N = self.params, self.params.N
        tc = self.t_c or [P.t_c] * N
        ts = self.t_s or [P.t_s()] * N
        tw = self.t_w or [P.t_w_reorg()] * N
        return tc, ts, tw


@dataclass
class Timeline:
    events: list[tuple[Fraction, str, int]]
    makespan: Fraction
    blocked_time: Fraction
    utilization: Fraction
    nodes: int = field(default=0)

    def ndjson(self) -> str:
        return "".join(json.dumps({"schema": "stagesim_event/v1", "t": float(t), "kind": k, "step": s}) + "\n"
                       for t, k, s in self.events)


def simulate(spec: PipelineSpec) -> Timeline:
    tc, ts, tw = spec.steps()
    N = spec.params.N
    nodes = spec.params.n + spec.params.m

    clock = Fraction(0)
    heap: list[tuple[Fraction, int, int, int]] = []
    seq = 0

    def schedule(t, kind, step):
        nonlocal seq
        heapq.heappush(heap, (t, int(kind), seq, step))
        seq += 1

    buffer: deque[int] = deque()  # handed off, not yet staged
    outstanding = 0  # handed off, not yet written
    busy = False
    waiting: int | None = None  # finished step whose handoff is blocked
    wait_since = Fraction(0)
    blocked = Fraction(0)
    events: list[tuple[Fraction, str, int]] = []

    def start_pipeline():
        nonlocal busy
        if not busy and buffer:
            k = buffer.popleft()
            busy = True
            schedule(clock + ts[k], EventKind.STAGE_END, k)

    def hand_off(k):
        nonlocal outstanding
        buffer.append(k)
        outstanding += 1
        if k + 1 < N:
            schedule(clock + tc[k + 1], EventKind.COMPUTE_END, k + 1)
        start_pipeline()

    schedule(tc[0], EventKind.COMPUTE_END, 0)
    while heap:
        clock, kind, _, k = heapq.heappop(heap)
        kind = EventKind(kind)
        events.append((clock, kind.label, k))
        if kind is EventKind.COMPUTE_END:
            if outstanding < spec.buffer_depth:
                hand_off(k)
            else:
                waiting, wait_since = k, clock
        elif kind is EventKind.STAGE_END:
            schedule(clock + tw[k], EventKind.WRITE_END, k)
        else:
            outstanding -= 1
            busy = False
            if waiting is not None:
                blocked += clock - wait_since
                w, waiting = waiting, None
                hand_off(w)
            start_pipeline()

    makespan = clock
    return Timeline(events, makespan, blocked, nodes * makespan, nodes)


def compare_with_model(spec: PipelineSpec, rel_tol: float = 1e-9) -> dict:
    if not spec.constant:
        raise ValueError("model comparison needs constant timings")
    sim = simulate(spec).utilization
    model = u_onthefly(spec.params).u
    if abs(sim - model) > Fraction(str(rel_tol)) * model:
        raise ModelMismatch(sim, model)
    return {"schema": "stagesim_compare/v1", "simulated": float(sim), "model": float(model),
            "exact_match": sim == model, "regime": u_onthefly(spec.params).regime.value}
