"""Pipelined execution over blocks of the internal-coordinate grid.

Each of P workers owns a contiguous block of internal indices.  Transport
moves information to the right only, so at every time step a worker needs
exactly one slice from its left neighbour: the last slice of that block at
the previous level.  Workers therefore form a linear pipeline connected by
ordered single-producer channels; after a fill-in phase of at most P-1 steps
all workers are busy simultaneously.

Workers run as in-process threads with exactly-once, in-order message
delivery.  Channel capacity equals the total number of messages a link can
ever carry, so sends never block and the acyclic left-to-right dependency
makes deadlock impossible.  Every worker performs the same floating point
operations as the sequential loop, so the assembled result is bitwise equal
to the sequential one under the direct solver.
"""

from __future__ import annotations

import queue
import threading
import time
from dataclasses import dataclass, field
from types import SimpleNamespace
from typing import Callable

import numpy as np

from .characteristics import CflViolationError, LGrid, TimeGrid, check_cfl
from .fem import FieldSlice, SolverConfig
from .mesh import BasisSet, SpatialMesh
from .stepper import (
    Operators,
    ProblemSpec,
    SolutionSurface,
    _advance,
    _check_compatibility,
    _project_boundary,
    _project_initial,
    precompute_operators,
)

__all__ = [
    "PipelinePlan",
    "BoundaryMessage",
    "PipelineRun",
    "TimingReport",
    "PipelineError",
    "ProtocolError",
    "partition",
    "run_pipeline",
    "timing_report",
]


class PipelineError(RuntimeError):
    """A worker failed; carries the (worker, step) context."""

    def __init__(self, worker: int, step: int, cause: BaseException):
        super().__init__(f"worker {worker} failed at step {step}: {cause!r}")
        self.worker = worker
        self.step = step
        self.cause = cause


class ProtocolError(RuntimeError):
    """A message arrived out of order or from the wrong sender."""


@dataclass(frozen=True)
class PipelinePlan:
    """Contiguous blocks of internal indices, one per worker, covering 0..M."""

    P: int
    blocks: tuple[range, ...]

    @property
    def M(self) -> int:
        return self.blocks[-1].stop - 1


def partition(M: int, P: int) -> PipelinePlan:
    """Split the M+1 internal indices into P contiguous blocks.

    Sizes differ by at most one; the remainder goes to the leftmost blocks.
    """
    count = M + 1
    if P < 1:
        raise ValueError(f"worker count must be >= 1, got {P}")
    if P > count:
        raise ValueError(
            f"{P} workers over {count} internal indices would leave a block empty"
        )
    base, extra = divmod(count, P)
    blocks = []
    start = 0
    for p in range(P):
        size = base + (1 if p < extra else 0)
        blocks.append(range(start, start + size))
        start += size
    return PipelinePlan(P=P, blocks=tuple(blocks))


@dataclass(frozen=True)
class BoundaryMessage:
    """Last slice of a block, handed to the right neighbour after a step."""

    sender: int
    n: int
    slice: FieldSlice


@dataclass(frozen=True)
class _Abort:
    """Sentinel flushed downstream when a worker dies."""

    worker: int
    step: int


@dataclass
class _RunStats:
    wall_seconds: float = 0.0
    worker_busy_seconds: list = field(default_factory=list)
    messages_sent: int = 0
    step_spans: list = field(default_factory=list)  # per worker: [(start, end), ...]


class _Worker(threading.Thread):
    """One pipeline stage: owns a block, advances it level by level."""

    def __init__(self, engine, p: int):
        super().__init__(name=f"pipeline-worker-{p}", daemon=True)
        self.engine = engine
        self.p = p
        self.block = engine.plan.blocks[p]
        self.busy = 0.0
        self.spans = []
        self.final = None
        self.failure = None
        self.current_step = 0

    def run(self):
        try:
            self._run()
        except _Aborted:
            pass
        except BaseException as exc:  # noqa: BLE001 - reported to the caller
            self.failure = (self.p, self.current_step, exc)
            self._flush_abort()

    def _run(self):
        eng = self.engine
        n_steps = eng.n_steps
        t0 = time.perf_counter()
        ctx = eng.worker_setup(self.p)
        values = {m: eng.init_slice(ctx, m) for m in self.block}
        self.busy += time.perf_counter() - t0
        self._send(0, values)

        for n in range(1, n_steps + 1):
            self.current_step = n
            left = self._receive(n) if self.p > 0 else None
            t0 = time.perf_counter()
            new = {}
            for m in self.block:
                if m == 0:
                    new[m] = eng.boundary_slice(ctx, n)
                else:
                    prev_left = values[m - 1] if m - 1 in values else left
                    new[m] = eng.advance_slice(ctx, n, m, prev_left, values[m])
            values = new
            t1 = time.perf_counter()
            self.busy += t1 - t0
            self.spans.append((t0, t1))
            self._send(n, values)
        self.final = values

    def _send(self, n: int, values) -> None:
        # level n feeds the neighbour's step n+1; the last level is never sent
        if self.p == self.engine.plan.P - 1 or n >= self.engine.n_steps:
            return
        msg = BoundaryMessage(sender=self.p, n=n, slice=values[self.block.stop - 1])
        self.engine.links[self.p].put_nowait(msg)
        self.engine.count_message()

    def _receive(self, n: int):
        msg = self.engine.links[self.p - 1].get()
        if isinstance(msg, _Abort):
            self._flush_abort()
            raise _Aborted()
        if msg.sender != self.p - 1 or msg.n != n - 1:
            raise ProtocolError(
                f"worker {self.p} at step {n} expected the level-{n - 1} slice "
                f"from worker {self.p - 1}, got level {msg.n} from worker {msg.sender}"
            )
        return msg.slice

    def _flush_abort(self):
        if self.p < self.engine.plan.P - 1:
            self.engine.links[self.p].put_nowait(_Abort(self.p, self.current_step))


class _Aborted(Exception):
    pass


class _Engine:
    """Wires workers, links, and the compute callbacks together."""

    def __init__(self, plan: PipelinePlan, n_steps: int, worker_setup, init_slice,
                 boundary_slice, advance_slice):
        self.plan = plan
        self.n_steps = n_steps
        self.worker_setup = worker_setup
        self.init_slice = init_slice
        self.boundary_slice = boundary_slice
        self.advance_slice = advance_slice
        # capacity covers every message the link can carry plus an abort token
        self.links = [queue.Queue(maxsize=n_steps + 1) for _ in range(plan.P - 1)]
        self._sent = 0
        self._sent_lock = threading.Lock()

    def count_message(self):
        with self._sent_lock:
            self._sent += 1

    def execute(self):
        t_start = time.perf_counter()
        workers = [_Worker(self, p) for p in range(self.plan.P)]
        for w in workers:
            w.start()
        for w in workers:
            w.join()
        wall = time.perf_counter() - t_start

        for w in workers:
            if w.failure is not None:
                p, n, exc = w.failure
                raise PipelineError(p, n, exc) from exc

        values = {}
        for w in workers:
            values.update(w.final)
        stats = _RunStats(
            wall_seconds=wall,
            worker_busy_seconds=[w.busy for w in workers],
            messages_sent=self._sent,
            step_spans=[w.spans for w in workers],
        )
        return values, stats


@dataclass(eq=False)
class PipelineRun:
    """Result of a pipelined run: final surface plus timing and traffic counters."""

    surface: SolutionSurface
    plan: PipelinePlan
    wall_seconds: float
    worker_busy_seconds: list
    messages_sent: int
    step_spans: list


def run_pipeline(
    spec: ProblemSpec,
    mesh: SpatialMesh,
    basis: BasisSet,
    lgrid: LGrid,
    tgrid: TimeGrid,
    P: int,
    solver_config: SolverConfig | None = None,
) -> PipelineRun:
    """Advance the surface to t=T with P pipelined workers over the internal grid."""
    cfl = check_cfl(tgrid.tau, lgrid, spec.G, require_positive=False)
    if not cfl.passed:
        raise CflViolationError(cfl.describe())
    plan = partition(lgrid.M, P)
    _check_compatibility(spec, mesh, lgrid)

    if tgrid.N == 0:
        shared = None
    else:
        shared = precompute_operators(mesh, basis, spec, tgrid.tau, lgrid, solver_config)

    def worker_setup(p: int):
        if shared is None:  # no stepping: only the projector is needed
            return SimpleNamespace(projector=_fresh_projector(mesh, basis, solver_config))
        # each worker factorizes privately; matrices and caches are shared read-only
        return shared.fork()

    def init_slice(ops: Operators, m: int) -> FieldSlice:
        if m == 0:
            return _project_boundary(ops.projector, spec, 0.0, 0)
        return _project_initial(ops.projector, spec, float(lgrid.nodes[m]), m)

    def boundary(ops: Operators, n: int) -> FieldSlice:
        return _project_boundary(ops.projector, spec, float(tgrid.times[n]), n)

    def advance(ops: Operators, n: int, m: int, left: FieldSlice, same: FieldSlice) -> FieldSlice:
        return _advance(ops, n, m, left, same)

    engine = _Engine(plan, tgrid.N, worker_setup, init_slice, boundary, advance)
    values, stats = engine.execute()
    slices = tuple(values[m] for m in range(lgrid.M + 1))
    surface = SolutionSurface(tgrid.N, slices)
    return PipelineRun(
        surface=surface,
        plan=plan,
        wall_seconds=stats.wall_seconds,
        worker_busy_seconds=stats.worker_busy_seconds,
        messages_sent=stats.messages_sent,
        step_spans=stats.step_spans,
    )


def _fresh_projector(mesh, basis, solver_config):
    from .fem import RitzProjector

    return RitzProjector(mesh, basis, solver_config=solver_config)


@dataclass(frozen=True)
class TimingReport:
    """Per-run timing summary in the shape of the scaling tables."""

    workers: int
    total_seconds: float
    speedup: float
    avg_worker_seconds: float
    max_worker_seconds: float


def timing_report(run: PipelineRun, baseline: PipelineRun | None = None) -> TimingReport:
    """Summarize a run; speedup is measured against the designated baseline."""
    busy = run.worker_busy_seconds
    base_wall = baseline.wall_seconds if baseline is not None else run.wall_seconds
    return TimingReport(
        workers=run.plan.P,
        total_seconds=run.wall_seconds,
        speedup=base_wall / run.wall_seconds,
        avg_worker_seconds=float(np.mean(busy)),
        max_worker_seconds=float(np.max(busy)),
    )
