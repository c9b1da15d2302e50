"""Deterministic inexact dual dynamic programming.

Each iteration runs a forward pass (stage solves against the current
polyhedral continuation models, to the scheduled inexactness) and a backward
pass (fresh stage solves against the already-updated models, turned into
cuts via the cut machinery).  The reported lower bound is the certified dual
side of an exact first-stage solve, so it is valid regardless of how sloppy
the scheduled solves were; a feasible forward trajectory provides the upper
side and the incumbent.

The error-budget report turns the boundedness constants of the convergence
analysis into computable diagnostics: per-stage bounds on cut inexactness
and the resulting global suboptimality guarantees for bounded noise.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import cuts as cutmod
from . import dualbound, subproblems
from .model import MultistageProblem, SlaterCertificate, slater_probe
from .subsolver import EXACT_TOL, solve_eps


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-iteration inexactness tolerances eps_t^k.

    kinds: "zero", "constant" (c), "harmonic" (c/k), "geometric" (c*gamma^k).
    A per-stage mapping overrides the global schedule for selected stages.
    """

    kind: str = "zero"
    c: float = 0.0
    gamma: float = 0.5
    per_stage: dict | None = None

    def __post_init__(self):
        if self.kind not in ("zero", "constant", "harmonic", "geometric"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.c < 0 or not (0.0 <= self.gamma):
            raise ValueError("schedule parameters must be nonnegative")

    def value(self, t: int, k: int) -> float:
        if self.per_stage and t in self.per_stage:
            return self.per_stage[t].value(t, k)
        if self.kind == "zero":
            return 0.0
        if self.kind == "constant":
            return self.c
        if self.kind == "harmonic":
            return self.c / max(k, 1)
        return self.c * self.gamma ** max(k, 1)

    def bound(self, t: int) -> float:
        """sup over k >= 1 of eps_t^k."""
        if self.per_stage and t in self.per_stage:
            return self.per_stage[t].bound(t)
        if self.kind == "zero":
            return 0.0
        if self.kind == "constant":
            return self.c
        if self.kind == "harmonic":
            return self.c
        return self.c * self.gamma

    def vanishing(self) -> bool:
        base = self.kind in ("zero", "harmonic") or \
            (self.kind == "geometric" and self.gamma < 1.0) or self.c == 0.0
        if self.per_stage:
            base = base and all(s.vanishing() for s in self.per_stage.values())
        return base


def parse_schedule(spec: str) -> NoiseSchedule:
    """Parse "zero", "const:c", "harmonic:c" or "geom:c:g"."""
    parts = spec.split(":")
    kind = parts[0]
    if kind == "zero":
        return NoiseSchedule("zero")
    if kind in ("const", "constant"):
        return NoiseSchedule("constant", c=float(parts[1]))
    if kind == "harmonic":
        return NoiseSchedule("harmonic", c=float(parts[1]))
    if kind in ("geom", "geometric"):
        return NoiseSchedule("geometric", c=float(parts[1]),
                             gamma=float(parts[2]))
    raise ValueError(f"cannot parse schedule spec {spec!r}")


# ---------------------------------------------------------------------------
# trace
# ---------------------------------------------------------------------------


@dataclass
class TraceRow:
    k: int
    lb: float
    ub_mean: float
    ub_std: float
    eps: tuple
    eta: tuple
    incumbent: float
    wall_ms: float
    f1_approx: float = float("nan")


@dataclass
class RunTrace:
    """Machine-readable run record: header, per-iteration rows, final block."""

    header: dict
    T: int
    rows: list = field(default_factory=list)
    err_report: dict | None = None
    final: dict = field(default_factory=dict)

    def add_row(self, row: TraceRow):
        self.rows.append(row)

    @property
    def lb(self):
        return self.rows[-1].lb if self.rows else float("nan")

    def csv_text(self) -> str:
        cols = ["k", "lb", "ub_mean", "ub_std"]
        cols += [f"eps_{t}" for t in range(1, self.T + 1)]
        cols += [f"eta_{t}" for t in range(2, self.T + 1)]
        cols += ["incumbent", "wall_ms"]
        lines = [",".join(cols)]
        for r in self.rows:
            vals = [repr(r.k), repr(r.lb), repr(r.ub_mean), repr(r.ub_std)]
            vals += [repr(v) for v in r.eps]
            vals += [repr(v) for v in r.eta]
            vals += [repr(r.incumbent), repr(r.wall_ms)]
            lines.append(",".join(vals))
        return "\n".join(lines) + "\n"

    def write_csv(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.csv_text())

    def summary_dict(self) -> dict:
        out = {"header": self.header,
               "iterations": len([r for r in self.rows if r.k > 0]),
               "lb": self.lb,
               "incumbent": self.rows[-1].incumbent if self.rows else None,
               "f1_approx": [r.f1_approx for r in self.rows],
               "final": self.final}
        if self.err_report is not None:
            out["err_report"] = self.err_report
        return out


# ---------------------------------------------------------------------------
# passes
# ---------------------------------------------------------------------------


def _solver_mode(eps):
    return "first_hit" if eps > 10.0 * EXACT_TOL else "polish"


@dataclass
class ForwardResult:
    xs: list                 # x_1 .. x_T
    model_values: list       # stage objective + continuation model values
    f1_approx: float


def forward_pass(problem: MultistageProblem, pools, schedule, k) -> ForwardResult:
    """Stage-by-stage eps-optimal simulation against the current models."""
    xs = []
    vals = []
    x_prev = problem.x0
    for t in range(1, problem.T + 1):
        stage = problem.stage(t)
        eps = schedule.value(t, k)
        sub = subproblems.stage_subproblem(stage, x_prev, pools[t + 1])
        sol = solve_eps(sub, eps, mode=_solver_mode(eps))
        xs.append(sol.y)
        vals.append(sol.primal_val)
        x_prev = sol.y
    return ForwardResult(xs=xs, model_values=vals, f1_approx=vals[0])


def backward_pass(problem: MultistageProblem, pools, xs, schedule, k,
                  min_costs=None):
    """Build one cut per stage t = T..2 anchored at the forward states.

    Coupled stages are probed for strict feasibility first; the probe point
    doubles as the barrier start and its certificate feeds the refined
    anchor bound.  Returns the per-stage cut reports (stage order 2..T).
    """
    reports = {}
    for t in range(problem.T, 1, -1):
        stage = problem.stage(t)
        x_prev = xs[t - 2]
        eps = schedule.value(t, k)
        sub = subproblems.stage_subproblem(stage, x_prev, pools[t + 1])
        slater = None
        interior = None
        if stage.constraint_type == "S2":
            slater = slater_probe(stage, x_prev)
            interior = slater.point
        sol = solve_eps(sub, eps, mode=_solver_mode(eps), interior=interior)
        if stage.constraint_type == "S1":
            report = cutmod.cut_from_primal(stage, x_prev, sol, pools[t + 1],
                                            iteration=k)
        else:
            lower = None
            if min_costs is not None:
                lower = min_costs[t] + pools[t + 1].initial_bound
            report = cutmod.cut_from_primal_dual(
                stage, x_prev, sol, pools[t + 1], iteration=k,
                slater=slater, value_lower_bound=lower)
        pools[t].add(report.cut)
        reports[t] = report
    return [reports[t] for t in range(2, problem.T + 1)]


def lower_bound(problem: MultistageProblem, pools) -> float:
    """Certified first-stage lower bound against the current models."""
    stage = problem.stage(1)
    sub = subproblems.stage_subproblem(stage, problem.x0, pools[2])
    interior = None
    if stage.constraint_type == "S2":
        interior = slater_probe(stage, problem.x0).point
    sol = solve_eps(sub, 0.0, interior=interior)
    return sol.dual_val


def run_iddp(problem: MultistageProblem, schedule: NoiseSchedule, K: int,
             stop_gap: float = 0.0, header: dict | None = None) -> RunTrace:
    """Alternate forward and backward passes for K iterations.

    Stops early when the incumbent's true cost minus the certified model
    bound drops to stop_gap.  Row k = 0 records the bound of the freshly
    seeded pools; noise and cut-slack columns for it are zero.
    """
    trace = RunTrace(header=header or {}, T=problem.T)
    pools = subproblems.initial_pools(problem)
    min_costs = subproblems.stage_min_costs(problem)
    incumbent = float("inf")
    best_xs = None
    start = time.perf_counter()
    lb = lower_bound(problem, pools)
    trace.add_row(TraceRow(k=0, lb=lb, ub_mean=float("nan"), ub_std=0.0,
                           eps=tuple(0.0 for _ in range(problem.T)),
                           eta=tuple(0.0 for _ in range(problem.T - 1)),
                           incumbent=float("inf"),
                           wall_ms=(time.perf_counter() - start) * 1e3))
    for k in range(1, K + 1):
        tic = time.perf_counter()
        fw = forward_pass(problem, pools, schedule, k)
        cost = problem.trajectory_cost(fw.xs)
        if cost < incumbent:
            incumbent = cost
            best_xs = fw.xs
        reports = backward_pass(problem, pools, fw.xs, schedule, k, min_costs)
        lb = lower_bound(problem, pools)
        trace.add_row(TraceRow(
            k=k, lb=lb, ub_mean=incumbent, ub_std=0.0,
            eps=tuple(schedule.value(t, k) for t in range(1, problem.T + 1)),
            eta=tuple(r.cut.inexactness for r in reports),
            incumbent=incumbent,
            wall_ms=(time.perf_counter() - tic) * 1e3,
            f1_approx=fw.f1_approx))
        if incumbent - lb <= stop_gap:
            break
    trace.final = {"lb": lb, "incumbent": incumbent,
                   "best_trajectory": None if best_xs is None
                   else [x.tolist() for x in best_xs]}
    return trace


# ---------------------------------------------------------------------------
# error budget (bounded-noise guarantees)
# ---------------------------------------------------------------------------


@dataclass
class StageErr:
    t: int
    kind: str
    obj_min: float
    obj_max: float
    lip_obj: float           # bound on the stage-cost gradient norm
    lip_ineq: float          # bound on the inequality gradient norms
    ineq_max: float          # bound on ||g||
    slope_bound: float       # Lipschitz bound carried by the cut slopes
    eta_bound: float         # bound on the cut inexactness
    eps_bound: float
    err: float               # eta_bound + eps_bound (+eps again when coupled)
    delta: float             # cut-distance part of the corollary bound
    dual_bound: float | None = None
    kappa: float | None = None
    radius: float | None = None
    image_radius: float | None = None

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class ErrReport:
    stages: list
    weighted_total: float    # sum over t of t * err_t
    coarse_total: float      # T(T+1)/2 * (delta_max + eps_max)
    delta_max: float
    eps_max: float

    def stage(self, t) -> StageErr:
        return next(s for s in self.stages if s.t == t)

    def to_dict(self):
        return {"stages": [s.to_dict() for s in self.stages],
                "weighted_total": self.weighted_total,
                "coarse_total": self.coarse_total,
                "delta_max": self.delta_max,
                "eps_max": self.eps_max}


def _prev_probe_states(problem, t):
    """Vertices of the previous state box (the slack is concave in the
    previous state, so its minimum over the box sits at a vertex)."""
    if t == 1:
        return [problem.x0]
    box = problem.stage(t - 1).box
    free = box.free_mask
    pts = []
    import itertools as it
    choices = [(box.lower[i], box.upper[i]) if free[i] else (box.lower[i],)
               for i in range(box.dim)]
    for combo in it.product(*choices):
        pts.append(np.array(combo))
    return pts


def err_report(problem: MultistageProblem, schedule: NoiseSchedule) -> ErrReport:
    """Computable per-stage error budget for bounded noise.

    Backward recursion over stages: each coupled stage first bounds its dual
    multipliers by the explicit dual-norm bound (with the model Lipschitz
    constant of the next stage in place of the true one), then bounds the
    cut inexactness and the cut slopes.  The two aggregates bound the
    suboptimality of any accumulation point of the forward trajectories.
    """
    T = problem.T
    mins = subproblems.stage_min_costs(problem)
    ranges = {}
    for t in range(1, T + 1):
        lo, hi = subproblems._prev_box(problem, t)
        ranges[t] = subproblems.stage_cost_range(problem.stage(t), lo, hi)
    # upper bound on the cost-to-go from stage t on, and the pool floor
    cum_max = {T + 1: 0.0}
    cum_min = {T + 1: 0.0}
    for t in range(T, 0, -1):
        cum_max[t] = cum_max[t + 1] + ranges[t][1]
        cum_min[t] = cum_min[t + 1] + mins[t]

    rows = {}
    slope_next = 0.0  # Lipschitz bound carried by the stage-(t+1) cut pool
    for t in range(T, 1, -1):
        stage = problem.stage(t)
        lo, hi = subproblems._prev_box(problem, t)
        jlo = np.concatenate([stage.box.lower, lo])
        jhi = np.concatenate([stage.box.upper, hi])
        from .model import BoxSet
        jbox = BoxSet(jlo, jhi)
        lip_obj = dualbound.lipschitz_over_box(stage.objective, jbox)
        lip_ineq = max((dualbound.lipschitz_over_box(g, jbox)
                        for g in stage.ineq), default=0.0)
        ineq_max = float(np.sqrt(sum(
            subproblems.quad_abs_max(g, jlo, jhi) ** 2 for g in stage.ineq))) \
            if stage.ineq else 0.0
        eps_b = schedule.bound(t)
        diam = stage.box.diameter
        if stage.constraint_type == "S1":
            eta_b = (lip_obj + slope_next) * diam
            row = StageErr(t=t, kind="S1", obj_min=ranges[t][0],
                           obj_max=ranges[t][1], lip_obj=lip_obj,
                           lip_ineq=lip_ineq, ineq_max=ineq_max,
                           slope_bound=lip_obj, eta_bound=eta_b,
                           eps_bound=eps_b, err=eta_b + eps_b, delta=eta_b)
            slope_next = lip_obj
        else:
            certs = [slater_probe(stage, xp) for xp in _prev_probe_states(problem, t)]
            kappa = min(c.margin for c in certs)
            radius = min(c.radius for c in certs)
            if lip_ineq > 0:
                radius = min(radius, kappa / (2.0 * lip_ineq))
            rho = dualbound.min_image_radius(stage.A, stage.box.free_mask, radius)
            p = max(stage.n_ineq, 1)
            u_num = (lip_obj + slope_next) * radius + eps_b \
                + ranges[t][1] + cum_max[t + 1] - cum_min[t]
            u_t = u_num / min(rho, kappa / 2.0)
            a_norm = 0.0 if stage.A is None else float(np.linalg.norm(stage.A.T, 2))
            b_norm = 0.0 if stage.B is None else float(np.linalg.norm(stage.B.T, 2))
            coef = np.sqrt(2.0) * max(a_norm, lip_ineq * np.sqrt(p)) * u_t
            eta_b = (lip_obj + coef + slope_next) * diam
            slope_t = lip_obj + np.sqrt(2.0) * max(b_norm, lip_ineq * np.sqrt(p)) * u_t
            row = StageErr(t=t, kind="S2", obj_min=ranges[t][0],
                           obj_max=ranges[t][1], lip_obj=lip_obj,
                           lip_ineq=lip_ineq, ineq_max=ineq_max,
                           slope_bound=slope_t, eta_bound=eta_b,
                           eps_bound=eps_b, err=eta_b + 2.0 * eps_b,
                           delta=eta_b + eps_b, dual_bound=u_t, kappa=kappa,
                           radius=radius, image_radius=rho)
            slope_next = slope_t
        rows[t] = row
    eps1 = schedule.bound(1)
    rows[1] = StageErr(t=1, kind=problem.stage(1).constraint_type,
                       obj_min=ranges[1][0], obj_max=ranges[1][1],
                       lip_obj=0.0, lip_ineq=0.0, ineq_max=0.0,
                       slope_bound=0.0, eta_bound=0.0, eps_bound=eps1,
                       err=eps1, delta=0.0)
    stages = [rows[t] for t in range(1, T + 1)]
    weighted = sum(t * rows[t].err for t in range(1, T + 1))
    delta_max = max(rows[t].delta for t in range(1, T + 1))
    eps_max = max(rows[t].eps_bound for t in range(1, T + 1))
    coarse = T * (T + 1) / 2.0 * (delta_max + eps_max)
    return ErrReport(stages=stages, weighted_total=weighted,
                     coarse_total=coarse, delta_max=delta_max,
                     eps_max=eps_max)
