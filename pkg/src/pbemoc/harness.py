"""Study harness: manufactured problem, convergence and scaling studies, CSV IO.

The built-in benchmark problem has the closed-form solution

    z(t, l, x, y) = exp(-t/10) sin(pi l) sin(pi x) sin(pi y)

on the unit square with unit diffusion, velocity (1, 1), growth rate
G(l) = 1/2 + 2(1-l)l on [0, 1], and T = 1.  The source term is derived
symbolically from the solution, so measured errors are pure discretization
errors.  Convergence studies sweep the mesh size with a coupling rule for
the two step sizes; scaling studies sweep the worker count.
"""

from __future__ import annotations

import os
import threading
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np
import sympy

from .characteristics import CflViolationError, LGrid, TimeGrid, check_cfl
from .fem import ErrorEvaluator, SolverConfig
from .mesh import Rectangle, UNIT_SQUARE, build_structured_mesh, reference_basis
from .pipeline import PipelineRun, TimingReport, run_pipeline, timing_report
from .stepper import ProblemSpec, run_sequential

__all__ = [
    "MMSProblem",
    "StudyConfig",
    "ConvergenceRow",
    "ScalingRow",
    "mms_problem",
    "convergence_study",
    "characteristics_study",
    "scaling_study",
    "write_convergence_csv",
    "read_convergence_csv",
    "write_scaling_csv",
    "read_scaling_csv",
    "COUPLINGS",
]

DECAY_RATE = 0.1

# (tau, iota) as a function of mesh size
COUPLINGS: dict[str, Callable[[float], tuple[float, float]]] = {
    "h2": lambda h: (h * h, h * h),
    "h3": lambda h: (h**3, h**3),
    "equal": lambda h: (h, h),
}


@dataclass(frozen=True)
class MMSProblem(ProblemSpec):
    """Benchmark problem plus its exact solution and the grids it lives on."""

    exact: Callable = None
    exact_grad: Callable = None
    f_reference: Callable = None  # raw symbolic source, for cross-checks
    domain: Rectangle = UNIT_SQUARE
    l_min: float = 0.0
    l_max: float = 1.0

    def lgrid(self, M: int) -> LGrid:
        return LGrid(self.l_min, self.l_max, M)

    def exact_at(self, t: float, l: float):
        """Freeze (t, l): returns (field, gradient) callables over (x, y)."""
        return (
            lambda x, y: self.exact(t, l, x, y),
            lambda x, y: self.exact_grad(t, l, x, y),
        )


def _broadcast_to_arg(fn: Callable, shape_arg: int) -> Callable:
    """Wrap a lambdified expression so the result always matches one argument's shape."""

    def wrapped(*args):
        ref = np.asarray(args[shape_arg], dtype=float)
        out = np.asarray(fn(*args), dtype=float)
        if out.shape != ref.shape:
            out = np.broadcast_to(out, ref.shape).copy()
        return out

    return wrapped


def _pair(fx: Callable, fy: Callable) -> Callable:
    def wrapped(*args):
        return fx(*args), fy(*args)

    return wrapped


def _fast_mms_source() -> Callable:
    """Hand-separated form of the benchmark source term.

    The source factors as exp(-t/10) * (A(l)*S(x,y) + B(l)*C(x,y)) with
    S = sin(pi x) sin(pi y) and C = cos(pi x) sin(pi y) + sin(pi x) cos(pi y).
    The spatial factors are cached per quadrature-point set, so repeated
    evaluation at new (t, l) costs a handful of array operations.  Agreement
    with the raw symbolic expression is enforced by the test suite.
    """
    pi = np.pi
    prefactor = 2.0 * pi * pi - DECAY_RATE
    slot: list = [None]
    lock = threading.Lock()

    def source(t, l, x, y):
        entry = slot[0]
        if entry is None or entry[0] is not x or entry[1] is not y:
            sx, cx = np.sin(pi * np.asarray(x, dtype=float)), np.cos(pi * np.asarray(x, dtype=float))
            sy, cy = np.sin(pi * np.asarray(y, dtype=float)), np.cos(pi * np.asarray(y, dtype=float))
            entry = (x, y, sx * sy, cx * sy + sx * cy)
            with lock:
                slot[0] = entry
        sxy, cxy = entry[2], entry[3]
        growth = 0.5 + 2.0 * (1.0 - l) * l
        sin_l, cos_l = np.sin(pi * l), np.cos(pi * l)
        amp = np.exp(-DECAY_RATE * t)
        return amp * ((prefactor * sin_l + pi * growth * cos_l) * sxy + (pi * sin_l) * cxy)

    return source


@lru_cache(maxsize=1)
def mms_problem() -> MMSProblem:
    """The manufactured benchmark problem with a symbolically derived source."""
    t, l, x, y = sympy.symbols("t l x y", real=True)
    a = sympy.Rational(1, 10)
    eps = 1
    b = (1, 1)
    z = sympy.exp(-a * t) * sympy.sin(sympy.pi * l) * sympy.sin(sympy.pi * x) * sympy.sin(sympy.pi * y)
    growth = sympy.Rational(1, 2) + 2 * (1 - l) * l

    source = (
        sympy.diff(z, t)
        + growth * sympy.diff(z, l)
        - eps * (sympy.diff(z, x, 2) + sympy.diff(z, y, 2))
        + b[0] * sympy.diff(z, x)
        + b[1] * sympy.diff(z, y)
    )

    def lam(args, expr, shape_arg):
        return _broadcast_to_arg(sympy.lambdify(args, expr, modules="numpy"), shape_arg)

    z_x, z_y = sympy.diff(z, x), sympy.diff(z, y)
    return MMSProblem(
        epsilon=float(eps),
        b=(float(b[0]), float(b[1])),
        G=lam((l,), growth, 0),
        f=_fast_mms_source(),
        f_reference=lam((t, l, x, y), source, 2),
        z_init=lam((l, x, y), z.subs(t, 0), 1),
        z_init_grad=_pair(
            lam((l, x, y), z_x.subs(t, 0), 1), lam((l, x, y), z_y.subs(t, 0), 1)
        ),
        z_bdry=lam((t, x, y), z.subs(l, 0), 1),
        z_bdry_grad=_pair(
            lam((t, x, y), z_x.subs(l, 0), 1), lam((t, x, y), z_y.subs(l, 0), 1)
        ),
        T=1.0,
        exact=lam((t, l, x, y), z, 2),
        exact_grad=_pair(lam((t, l, x, y), z_x, 2), lam((t, l, x, y), z_y, 2)),
    )


@dataclass(frozen=True)
class StudyConfig:
    """Parameters of one study run.

    kind selects the study; convergence-type studies use levels/coupling,
    the single run uses (h, tau, iota), and scaling uses the worker sweep
    plus fixed discretization parameters.
    """

    kind: str = "single"
    element_order: int = 1
    levels: tuple[float, ...] = ()  # mesh sizes h, strictly decreasing
    coupling: str = "h2"
    workers: tuple[int, ...] = ()
    out: str | None = None
    h: float | None = None
    tau: float | None = None
    iota: float | None = None
    T: float = 1.0
    scaling_mode: str = "strong"
    block: int = 8
    n_steps: int = 32
    snapshots: tuple[int, ...] = ()
    solver: SolverConfig | None = None

    def __post_init__(self):
        if self.kind not in ("single", "convergence", "characteristics", "scaling"):
            raise ValueError(f"unknown study kind {self.kind!r}")
        if self.element_order not in (1, 2):
            raise ValueError(f"unsupported element order {self.element_order}")
        if self.coupling not in COUPLINGS:
            raise ValueError(
                f"unknown coupling {self.coupling!r}; expected one of {sorted(COUPLINGS)}"
            )
        if self.levels and any(
            b >= a for a, b in zip(self.levels, self.levels[1:])
        ):
            raise ValueError(f"mesh levels must be strictly decreasing, got {self.levels}")
        if self.scaling_mode not in ("strong", "weak"):
            raise ValueError(f"unknown scaling mode {self.scaling_mode!r}")


@dataclass(frozen=True)
class ConvergenceRow:
    """One refinement level: mesh size, step sizes, errors, and observed orders."""

    h: float
    tau: float
    iota: float
    l2_error: float
    l2_order: float | None
    h1_error: float
    h1_order: float | None


def _grids_for(problem: MMSProblem, h: float, tau: float, iota: float, T: float):
    span = problem.l_max - problem.l_min
    M = int(round(span / iota))
    N = int(round(T / tau))
    if M < 1 or abs(M * iota - span) > 1e-9 * span:
        raise ValueError(f"iota={iota} does not divide the internal interval of length {span}")
    if N < 1 or abs(N * tau - T) > 1e-9 * T:
        raise ValueError(f"tau={tau} does not divide the final time {T}")
    return problem.lgrid(M), TimeGrid(T, N)


def run_single(
    problem: MMSProblem,
    h: float,
    tau: float,
    iota: float,
    order: int = 1,
    workers: int | None = None,
    T: float | None = None,
    solver: SolverConfig | None = None,
    snapshot_steps: Sequence[int] = (),
    snapshot_dir=None,
) -> tuple[float, float]:
    """One run at fixed parameters; returns the worst-slice (L2, H1) errors at t=T."""
    T = problem.T if T is None else T
    lgrid, tgrid = _grids_for(problem, h, tau, iota, T)
    mesh = build_structured_mesh(problem.domain, h, order)
    basis = reference_basis(order)
    if workers is not None and workers > 1:
        surface = run_pipeline(problem, mesh, basis, lgrid, tgrid, workers, solver).surface
    else:
        surface = run_sequential(
            problem, mesh, basis, lgrid, tgrid, solver,
            snapshot_steps=snapshot_steps, snapshot_dir=snapshot_dir,
        )
    evaluator = ErrorEvaluator(mesh, basis)
    worst_l2 = worst_h1 = 0.0
    for m in range(1, lgrid.M + 1):
        exact, exact_grad = problem.exact_at(T, float(lgrid.nodes[m]))
        l2, h1 = evaluator.norms(surface.slices[m].values, exact, exact_grad)
        worst_l2 = max(worst_l2, l2)
        worst_h1 = max(worst_h1, h1)
    return worst_l2, worst_h1


def _precheck_cfl(problem: MMSProblem, levels, coupling: str) -> None:
    rule = COUPLINGS[coupling]
    for h in levels:
        tau, iota = rule(h)
        span = problem.l_max - problem.l_min
        M = int(round(span / iota))
        report = check_cfl(tau, problem.lgrid(max(M, 1)), problem.G)
        if not report.passed:
            raise CflViolationError(f"level h={h}: {report.describe()}")


def convergence_study(config: StudyConfig, problem: MMSProblem | None = None) -> list[ConvergenceRow]:
    """Error table over a sweep of mesh sizes with coupled step sizes.

    Order columns are log2 ratios of successive errors (levels halve).
    """
    if not config.levels:
        raise ValueError("convergence study needs at least one mesh level")
    problem = problem if problem is not None else mms_problem()
    _precheck_cfl(problem, config.levels, config.coupling)
    rule = COUPLINGS[config.coupling]
    workers = config.workers[0] if config.workers else None

    rows: list[ConvergenceRow] = []
    for h in config.levels:
        tau, iota = rule(h)
        l2, h1 = run_single(
            problem, h, tau, iota, config.element_order, workers, solver=config.solver
        )
        if rows:
            l2_order = float(np.log2(rows[-1].l2_error / l2))
            h1_order = float(np.log2(rows[-1].h1_error / h1))
        else:
            l2_order = h1_order = None
        rows.append(ConvergenceRow(h, tau, iota, l2, l2_order, h1, h1_order))
    return rows


def characteristics_study(config: StudyConfig, problem: MMSProblem | None = None) -> list[ConvergenceRow]:
    """Internal-coordinate refinement: quadratic elements with h = iota = tau.

    Spatial error is then negligible against the first-order transport error,
    so both norms converge at order one in the step size.
    """
    if config.element_order != 2:
        raise ValueError("the internal-coordinate study requires quadratic elements")
    if config.coupling != "equal":
        raise ValueError("the internal-coordinate study requires the coupling tau = iota = h")
    return convergence_study(config, problem)


@dataclass(frozen=True)
class ScalingRow:
    """One worker count of a scaling sweep."""

    workers: int
    total_seconds: float
    speedup: float
    avg_worker_seconds: float
    max_worker_seconds: float
    oversubscribed: bool = False


def scaling_study(config: StudyConfig, problem: MMSProblem | None = None) -> list[ScalingRow]:
    """Sweep worker counts; strong mode fixes the problem, weak mode fixes the block size.

    Both modes run with tau = iota (the tightest stable step) over n_steps
    steps, so the integration horizon is n_steps * iota.  Worker counts above
    the machine's core count are annotated as oversubscribed.
    """
    problem = problem if problem is not None else mms_problem()
    workers = config.workers or (1, 2)
    h = config.h if config.h is not None else 2.0**-5
    order = config.element_order
    mesh = build_structured_mesh(problem.domain, h, order)
    basis = reference_basis(order)
    cores = os.cpu_count() or 1

    rows: list[ScalingRow] = []
    baseline: PipelineRun | None = None
    for P in workers:
        if config.scaling_mode == "strong":
            iota = config.iota if config.iota is not None else (problem.l_max - problem.l_min) / 128
        else:
            M = config.block * P - 1
            iota = (problem.l_max - problem.l_min) / M
        span = problem.l_max - problem.l_min
        lgrid = problem.lgrid(int(round(span / iota)))
        tau = lgrid.iota
        tgrid = TimeGrid(config.n_steps * tau, config.n_steps)
        run = run_pipeline(problem, mesh, basis, lgrid, tgrid, P, config.solver)
        if baseline is None:
            baseline = run
        report = timing_report(run, baseline)
        rows.append(
            ScalingRow(
                workers=report.workers,
                total_seconds=report.total_seconds,
                speedup=report.speedup,
                avg_worker_seconds=report.avg_worker_seconds,
                max_worker_seconds=report.max_worker_seconds,
                oversubscribed=P > cores,
            )
        )
    return rows


# ---------------------------------------------------------------------------
# CSV formats

CONVERGENCE_HEADER = "h,tau,iota,l2_error,l2_order,h1_error,h1_order"
SCALING_HEADER = "workers,total_seconds,speedup,avg_worker_seconds,max_worker_seconds"


def _fmt_error(v: float) -> str:
    return f"{v:.5E}"  # six significant digits


def _fmt_order(v: float | None) -> str:
    return "" if v is None else f"{v:.4f}"


def format_convergence_rows(rows: Sequence[ConvergenceRow]) -> str:
    lines = [CONVERGENCE_HEADER]
    for r in rows:
        lines.append(
            f"{r.h:.6G},{r.tau:.6G},{r.iota:.6G},"
            f"{_fmt_error(r.l2_error)},{_fmt_order(r.l2_order)},"
            f"{_fmt_error(r.h1_error)},{_fmt_order(r.h1_order)}"
        )
    return "\n".join(lines) + "\n"


def write_convergence_csv(rows: Sequence[ConvergenceRow], path) -> None:
    with open(path, "w") as fh:
        fh.write(format_convergence_rows(rows))


def read_convergence_csv(path) -> list[ConvergenceRow]:
    rows = []
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip() and not ln.startswith("#")]
    if not lines or lines[0] != CONVERGENCE_HEADER:
        raise ValueError(f"{path}: not a convergence table")
    for ln in lines[1:]:
        parts = ln.split(",")
        rows.append(
            ConvergenceRow(
                h=float(parts[0]),
                tau=float(parts[1]),
                iota=float(parts[2]),
                l2_error=float(parts[3]),
                l2_order=float(parts[4]) if parts[4] else None,
                h1_error=float(parts[5]),
                h1_order=float(parts[6]) if parts[6] else None,
            )
        )
    return rows


def format_scaling_rows(rows: Sequence[ScalingRow]) -> str:
    lines = []
    if rows:
        # unlike the reference tables, speedup is measured against the
        # smallest configured worker count, not a fixed 8-worker run
        lines.append(f"# speedup baseline: {rows[0].workers} worker(s)")
    if any(r.oversubscribed for r in rows):
        over = ",".join(str(r.workers) for r in rows if r.oversubscribed)
        lines.append(f"# oversubscribed worker counts (more workers than cores): {over}")
    lines.append(SCALING_HEADER)
    for r in rows:
        lines.append(
            f"{r.workers},{r.total_seconds:.6f},{r.speedup:.4f},"
            f"{r.avg_worker_seconds:.6f},{r.max_worker_seconds:.6f}"
        )
    return "\n".join(lines) + "\n"


def write_scaling_csv(rows: Sequence[ScalingRow], path) -> None:
    with open(path, "w") as fh:
        fh.write(format_scaling_rows(rows))


def read_scaling_csv(path) -> list[ScalingRow]:
    rows = []
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    over_counts: set[int] = set()
    for ln in lines:
        if ln.startswith("# oversubscribed"):
            tail = ln.rsplit(":", 1)[-1].strip()
            over_counts = {int(v) for v in tail.split(",") if v}
    lines = [ln for ln in lines if not ln.startswith("#")]
    if not lines or lines[0] != SCALING_HEADER:
        raise ValueError(f"{path}: not a scaling table")
    for ln in lines[1:]:
        parts = ln.split(",")
        rows.append(
            ScalingRow(
                workers=int(parts[0]),
                total_seconds=float(parts[1]),
                speedup=float(parts[2]),
                avg_worker_seconds=float(parts[3]),
                max_worker_seconds=float(parts[4]),
                oversubscribed=int(parts[0]) in over_counts,
            )
        )
    return rows
