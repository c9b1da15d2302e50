"""Assembly of stage subproblems and initial lower bounds.

Bridges the problem data to the subsolver: substitutes the previous state
into stage quadratics, attaches the continuation cut pool as an epigraph
term, and computes the global quadratic-over-box bounds used to seed pools
with finite trivial cuts (the paper-style minus-infinity initialization is
replaced by a valid finite floor so the first iteration is already bounded).
"""

from __future__ import annotations

import itertools

import numpy as np

from .cuts import CutPool
from .model import MultistageProblem, ScenarioTree, StageModel
from .subsolver import ConvexSubproblem, quad_box_min


def stage_subproblem(stage: StageModel, x_prev, pool_next: CutPool | None) \
        -> ConvexSubproblem:
    """Stage problem at a given previous state with the current model."""
    x_prev = np.asarray(x_prev, dtype=float)
    obj = stage.objective.restrict_current(stage.n, x_prev)
    epi = pool_next.as_epigraph(stage.box) if pool_next is not None else None
    kwargs = {}
    if stage.constraint_type == "S2":
        kwargs["ineq"] = stage.ineq_restricted(x_prev)
        if stage.A is not None:
            kwargs["eq_A"] = stage.A
            kwargs["eq_b"] = stage.eq_rhs(x_prev)
    return ConvexSubproblem(objective=obj, lo=stage.box.lower,
                            hi=stage.box.upper, epi=epi, **kwargs)


def _joint_box(stage: StageModel, prev_lo, prev_hi):
    lo = np.concatenate([stage.box.lower, prev_lo])
    hi = np.concatenate([stage.box.upper, prev_hi])
    return lo, hi


def stage_cost_range(stage: StageModel, prev_lo, prev_hi):
    """(min, max) of the stage cost over the joint state box.

    The minimum comes from exact quadratic-over-box minimization; the convex
    maximum is attained at a vertex, enumerated when the joint dimension is
    small and replaced by a certified interval bound otherwise.
    """
    lo, hi = _joint_box(stage, prev_lo, prev_hi)
    f = stage.objective
    mn = quad_box_min(f.H, f.c, lo, hi, f.d)[0]
    d = lo.shape[0]
    if d <= 12:
        mx = -np.inf
        for combo in itertools.product(*[(lo[i], hi[i]) for i in range(d)]):
            mx = max(mx, f.value(np.array(combo)))
    else:
        center = 0.5 * (lo + hi)
        rad = float(np.linalg.norm(0.5 * (hi - lo)))
        gnorm = float(np.linalg.norm(f.grad(center)))
        mx = f.value(center) + gnorm * rad \
            + 0.5 * float(np.linalg.norm(f.H, 2)) * rad ** 2
    return float(mn), float(mx)


def quad_abs_max(fn, lo, hi):
    """Certified bound on |fn| over a box (max at a vertex, min exact)."""
    d = lo.shape[0]
    mn = quad_box_min(fn.H, fn.c, lo, hi, fn.d)[0]
    if d <= 12:
        mx = max(fn.value(np.array(combo)) for combo in
                 itertools.product(*[(lo[i], hi[i]) for i in range(d)]))
    else:
        center = 0.5 * (lo + hi)
        rad = float(np.linalg.norm(0.5 * (hi - lo)))
        mx = fn.value(center) + float(np.linalg.norm(fn.grad(center))) * rad \
            + 0.5 * float(np.linalg.norm(fn.H, 2)) * rad ** 2
    return max(abs(mn), abs(mx))


def _prev_box(problem, t):
    """Bounds of the stage-(t-1) state (the initial state for t = 1)."""
    if t == 1:
        x0 = problem.x0
        return x0, x0
    box = problem.stage(t - 1).box
    return box.lower, box.upper


def stage_min_costs(problem) -> dict:
    """Per-stage minimal cost over the joint box; realization-min on trees."""
    out = {}
    if isinstance(problem, MultistageProblem):
        for t in range(1, problem.T + 1):
            lo, hi = _prev_box(problem, t)
            out[t] = stage_cost_range(problem.stage(t), lo, hi)[0]
        return out
    tree: ScenarioTree = problem
    for t in range(1, tree.T + 1):
        lo, hi = _prev_box(tree, t)
        models = {id(n.model): n.model for nid in tree.stage_nodes(t)
                  for n in [tree.node(nid)]}
        out[t] = min(stage_cost_range(m, lo, hi)[0] for m in models.values())
    return out


def initial_pools(problem) -> dict:
    """Cut pools for stages 2..T+1 seeded with valid finite floors.

    The floor of the stage-t pool is the sum over remaining stages of the
    global minimum stage cost, a lower bound on the cost-to-go everywhere;
    the stage-(T+1) pool is the fixed zero function.
    """
    T = problem.T
    mins = stage_min_costs(problem)
    pools = {T + 1: CutPool(T + 1, 0.0)}
    acc = 0.0
    for t in range(T, 1, -1):
        acc += mins[t]
        pools[t] = CutPool(t, acc)
    return pools
