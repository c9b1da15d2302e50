"""Problem data: stages, boxes, quadratics, scenario trees, validation.

A multistage problem is a chain (deterministic) or a scenario tree
(stochastic) of stage models.  Each stage couples the current state x_t to
the previous state x_{t-1} through a convex quadratic cost and, for coupled
stages, quadratic inequalities g(x_t, x_{t-1}) <= 0 plus linear dynamics
A x_t + B x_{t-1} = b.  States live in boxes; coordinates with equal bounds
are fixed and define the affine span used by the dual-norm machinery.

All types are immutable after load and safe to share across workers.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import subsolver
from .subsolver import Quadratic, SlaterError, InfeasibleError

PSD_TOL = 1e-10
PROB_TOL = 1e-12


@dataclass(frozen=True)
class BoxSet:
    """Axis-aligned box; coordinates with lower == upper are fixed."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "lower", np.asarray(self.lower, dtype=float))
        object.__setattr__(self, "upper", np.asarray(self.upper, dtype=float))
        if self.lower.shape != self.upper.shape or self.lower.ndim != 1:
            raise ValueError("box bounds must be 1-d arrays of equal length")
        if np.any(self.lower > self.upper):
            raise ValueError("box has lower > upper")

    @property
    def dim(self):
        return self.lower.shape[0]

    @property
    def fixed_mask(self):
        return self.upper == self.lower

    @property
    def free_mask(self):
        return self.upper > self.lower

    @property
    def center(self):
        return 0.5 * (self.lower + self.upper)

    @property
    def halfwidth(self):
        return 0.5 * (self.upper - self.lower)

    @property
    def diameter(self):
        return float(np.linalg.norm(self.upper - self.lower))

    def contains(self, y, tol=1e-9):
        return bool(np.all(y >= self.lower - tol) and np.all(y <= self.upper + tol))

    def sample(self, rng, size=None):
        if size is None:
            return rng.uniform(self.lower, self.upper)
        return rng.uniform(self.lower, self.upper, size=(size, self.dim))


@dataclass(frozen=True)
class QuadraticFn:
    """``0.5 z'Hz + c'z + d`` over the joint variable z = (x_t, x_{t-1})."""

    H: np.ndarray
    c: np.ndarray
    d: float = 0.0

    def __post_init__(self):
        H = np.asarray(self.H, dtype=float)
        c = np.asarray(self.c, dtype=float)
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "c", c)
        if H.shape != (c.shape[0], c.shape[0]):
            raise ValueError("H and c dimensions disagree")
        if not np.allclose(H, H.T, atol=1e-12):
            raise ValueError("H must be symmetric")

    @property
    def dim(self):
        return self.c.shape[0]

    def value(self, z):
        z = np.asarray(z, dtype=float)
        return 0.5 * float(z @ self.H @ z) + float(self.c @ z) + self.d

    def grad(self, z):
        return self.H @ np.asarray(z, dtype=float) + self.c

    def min_eig(self):
        return float(np.linalg.eigvalsh(self.H).min()) if self.dim else 0.0

    def is_psd(self, tol=PSD_TOL):
        return self.min_eig() >= -tol

    # -- stage-wise views: first ny coordinates are x_t, the rest x_{t-1} --

    def restrict_current(self, ny, x_prev) -> Quadratic:
        """Quadratic in x_t obtained by substituting x_{t-1} = x_prev."""
        x_prev = np.asarray(x_prev, dtype=float)
        Hyy = self.H[:ny, :ny]
        Hyx = self.H[:ny, ny:]
        Hxx = self.H[ny:, ny:]
        q = self.c[:ny] + Hyx @ x_prev
        c0 = self.d + 0.5 * float(x_prev @ Hxx @ x_prev) + float(self.c[ny:] @ x_prev)
        return Quadratic(Hyy, q, c0)

    def grad_current(self, ny, y, x_prev):
        z = np.concatenate([y, x_prev])
        return self.grad(z)[:ny]

    def grad_previous(self, ny, y, x_prev):
        z = np.concatenate([y, x_prev])
        return self.grad(z)[ny:]

    def current_block_norm(self, ny):
        """Spectral norm of the x_t block: Lipschitz constant of the
        x_t-gradient at fixed x_{t-1}."""
        blk = self.H[:ny, :ny]
        return float(np.linalg.norm(blk, 2)) if ny else 0.0


def stack_value(fn: QuadraticFn, y, x_prev):
    return fn.value(np.concatenate([np.asarray(y, float), np.asarray(x_prev, float)]))


@dataclass(frozen=True)
class StageModel:
    """Data of one decision stage.

    constraint_type "S1": the feasible set is just the state box.
    constraint_type "S2": additionally A x_t + B x_{t-1} = b and
    g_i(x_t, x_{t-1}) <= 0.
    """

    t: int
    objective: QuadraticFn
    box: BoxSet
    constraint_type: str = "S1"
    ineq: tuple[QuadraticFn, ...] = ()
    A: np.ndarray | None = None
    B: np.ndarray | None = None
    b: np.ndarray | None = None

    def __post_init__(self):
        if self.constraint_type not in ("S1", "S2"):
            raise ValueError("constraint_type must be 'S1' or 'S2'")
        for name in ("A", "B", "b"):
            v = getattr(self, name)
            if v is not None:
                object.__setattr__(self, name, np.asarray(v, dtype=float))
        object.__setattr__(self, "ineq", tuple(self.ineq))
        if self.constraint_type == "S1" and (self.ineq or self.A is not None
                                             or self.B is not None or self.b is not None):
            raise ValueError("S1 stages carry no coupling constraints")

    @property
    def n(self):
        return self.box.dim

    @property
    def n_ineq(self):
        return len(self.ineq)

    @property
    def n_eq(self):
        return 0 if self.A is None else self.A.shape[0]

    def cost(self, y, x_prev):
        return stack_value(self.objective, y, x_prev)

    def ineq_values(self, y, x_prev):
        z = np.concatenate([np.asarray(y, float), np.asarray(x_prev, float)])
        return np.array([g.value(z) for g in self.ineq])

    def ineq_restricted(self, x_prev):
        return tuple(g.restrict_current(self.n, x_prev) for g in self.ineq)

    def eq_rhs(self, x_prev):
        if self.A is None:
            return None
        return self.b - self.B @ np.asarray(x_prev, dtype=float)


@dataclass(frozen=True)
class SlaterCertificate:
    """Witness of strict feasibility for a coupled stage at a given x_prev.

    point satisfies the equalities to ``equality_residual``, every inequality
    with slack at least ``margin`` and sits at distance at least ``radius``
    from the box faces along non-fixed coordinates.
    """

    point: np.ndarray
    margin: float
    radius: float
    equality_residual: float

    def verify(self, stage: StageModel, x_prev, tol=1e-7):
        ok = stage.box.contains(self.point, tol)
        if stage.n_ineq:
            ok &= bool(np.all(stage.ineq_values(self.point, x_prev)
                              <= -self.margin + tol))
        free = stage.box.free_mask
        if free.any():
            dist = float(np.min(np.minimum(self.point - stage.box.lower,
                                           stage.box.upper - self.point)[free]))
            ok &= dist >= self.radius - tol
        return ok and self.equality_residual <= 1e-9


def slater_probe(stage: StageModel, x_prev) -> SlaterCertificate:
    """Maximize the joint slack of a coupled stage at x_prev.

    Solves max t s.t. g(y, x_prev) <= -t, A y = b - B x_prev and the box
    margins y in [lo + t, hi - t] on non-fixed coordinates, then reports the
    achieved constraint margin and box radius at the maximizer.  Raises
    SlaterError when the maximal slack falls below 1e-8 (interiority, and
    with it boundedness of the dual, cannot be certified at this x_prev).
    """
    if stage.constraint_type != "S2":
        raise ValueError("slater_probe applies to S2 stages")
    x_prev = np.asarray(x_prev, dtype=float)
    quads = stage.ineq_restricted(x_prev)
    rhs = stage.eq_rhs(x_prev)
    y0, t = subsolver.max_slack_point(list(quads), stage.box.lower,
                                      stage.box.upper, stage.A, rhs)
    if t <= subsolver.SLATER_TOL:
        raise SlaterError(f"stage {stage.t}: maximized slack {t:.3e} <= "
                          f"{subsolver.SLATER_TOL} at the probed state")
    margin = float(np.min(-stage.ineq_values(y0, x_prev))) if stage.n_ineq else t
    free = stage.box.free_mask
    radius = (float(np.min(np.minimum(y0 - stage.box.lower,
                                      stage.box.upper - y0)[free]))
              if free.any() else t)
    resid = 0.0
    if stage.A is not None:
        resid = float(np.linalg.norm(stage.A @ y0 - rhs))
    return SlaterCertificate(point=y0, margin=margin, radius=radius,
                             equality_residual=resid)


def stage_cost(stage: StageModel, x_t, x_prev) -> float:
    return stage.cost(x_t, x_prev)


# ---------------------------------------------------------------------------
# problems: deterministic chains and scenario trees
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MultistageProblem:
    """Deterministic chain: stages[t-1] holds the stage-t model."""

    stages: tuple[StageModel, ...]
    x0: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        object.__setattr__(self, "x0", np.asarray(self.x0, dtype=float))

    @property
    def T(self):
        return len(self.stages)

    @property
    def n(self):
        return self.stages[0].n

    def stage(self, t):
        return self.stages[t - 1]

    def trajectory_cost(self, xs):
        """Total cost of a feasible trajectory xs[0..T-1]."""
        total = 0.0
        prev = self.x0
        for t, x in enumerate(xs, start=1):
            total += self.stage(t).cost(x, prev)
            prev = x
        return total


@dataclass(frozen=True)
class TreeNode:
    nid: int
    parent: int | None
    prob: float
    stage: int
    model: StageModel | None           # None for the root
    children: tuple[int, ...] = ()
    overrides: dict = field(default_factory=dict)


class ScenarioTree:
    """Finite scenario tree of depth T+1 (root at stage 0 holds x0).

    Stage models are composed from per-stage base data plus per-node
    overrides; stagewise independence (identical child realization sets
    across the nodes of a stage) is what lets one cut pool per stage serve
    every node, and is enforced by validate_problem.
    """

    def __init__(self, base_stages, node_specs, x0):
        self.base_stages = tuple(base_stages)
        self.x0 = np.asarray(x0, dtype=float)
        nodes = {}
        children = {}
        for spec in node_specs:
            nid = spec["id"]
            parent = spec.get("parent")
            children.setdefault(parent, []).append(nid)
            nodes[nid] = spec
        if None not in children or len(children[None]) != 1:
            raise ValueError("tree must have exactly one root")
        self.nodests = {}
        built = {}
        order = []

        def visit(nid, stage):
            spec = nodes[nid]
            overrides = spec.get("overrides") or {}
            model = None
            if stage >= 1:
                base = self.base_stages[stage - 1]
                model = _apply_overrides(base, overrides)
            built[nid] = TreeNode(
                nid=nid, parent=spec.get("parent"),
                prob=float(spec.get("p", 1.0)), stage=stage, model=model,
                children=tuple(sorted(children.get(nid, []))),
                overrides=overrides)
            order.append(nid)
            for c in sorted(children.get(nid, [])):
                visit(c, stage + 1)

        visit(children[None][0], 0)
        self.nodes = built
        self.order = order
        self.root = children[None][0]
        self.T = max(n.stage for n in built.values())

    def node(self, nid) -> TreeNode:
        return self.nodes[nid]

    def stage_nodes(self, t):
        return [nid for nid in self.order if self.nodes[nid].stage == t]

    @property
    def n(self):
        return self.base_stages[0].n

    def stage(self, t):
        return self.base_stages[t - 1]

    def path_probability(self, nid):
        p = 1.0
        node = self.nodes[nid]
        while node.parent is not None:
            p *= node.prob
            node = self.nodes[node.parent]
        return p


def _apply_overrides(base: StageModel, overrides) -> StageModel:
    if not overrides:
        return base
    kw = {}
    if "f" in overrides:
        kw["objective"] = _quadratic_from_json(overrides["f"])
    if "g" in overrides:
        kw["ineq"] = tuple(_quadratic_from_json(gj) for gj in overrides["g"])
    for key in ("A", "B", "b"):
        if key in overrides:
            kw[key] = np.asarray(overrides[key], dtype=float)
    return StageModel(
        t=base.t,
        objective=kw.get("objective", base.objective),
        box=base.box,
        constraint_type=base.constraint_type,
        ineq=kw.get("ineq", base.ineq),
        A=kw.get("A", base.A),
        B=kw.get("B", base.B),
        b=kw.get("b", base.b),
    )


def chain_as_tree(problem: MultistageProblem) -> ScenarioTree:
    specs = [{"id": 0, "parent": None, "p": 1.0}]
    for t in range(1, problem.T + 1):
        specs.append({"id": t, "parent": t - 1, "p": 1.0})
    return ScenarioTree(problem.stages, specs, problem.x0)


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------


@dataclass
class CheckItem:
    check: str
    location: str
    passed: bool
    detail: str = ""


@dataclass
class ValidationReport:
    items: list

    @property
    def ok(self):
        return all(it.passed for it in self.items)

    def failures(self):
        return [it for it in self.items if not it.passed]

    def add(self, check, location, passed, detail=""):
        self.items.append(CheckItem(check, location, bool(passed), detail))


def _validate_stage(report, stage: StageModel, n, loc, x_probe):
    if stage.objective.dim != 2 * n:
        report.add("dimensions", loc, False,
                   f"objective dim {stage.objective.dim} != {2 * n}")
        return
    report.add("dimensions", loc, True)
    me = stage.objective.min_eig()
    report.add("objective convexity", loc, me >= -PSD_TOL,
               f"min eigenvalue {me:.3e}")
    for i, g in enumerate(stage.ineq):
        if g.dim != 2 * n:
            report.add("dimensions", f"{loc} g[{i}]", False,
                       f"dim {g.dim} != {2 * n}")
            continue
        meg = g.min_eig()
        report.add("inequality convexity", f"{loc} g[{i}]", meg >= -PSD_TOL,
                   f"min eigenvalue {meg:.3e}")
    if stage.A is not None:
        okA = stage.A.shape[1] == n and stage.B.shape == stage.A.shape \
            and stage.b.shape == (stage.A.shape[0],)
        report.add("coupling dimensions", loc, okA)
    if stage.constraint_type == "S2":
        try:
            cert = slater_probe(stage, x_probe)
            report.add("slater probe", loc, True,
                       f"margin {cert.margin:.3e}, radius {cert.radius:.3e}")
        except (SlaterError, InfeasibleError, subsolver.SubsolverError) as exc:
            report.add("slater probe", loc, False, str(exc))


def validate_problem(problem) -> ValidationReport:
    """Structural, convexity, probability and interiority checks.

    Works on deterministic chains and scenario trees; each check becomes one
    pass/fail item so callers can render a full report.  Slater probes run at
    the center of the previous stage box (at x0 for the first stage).
    """
    report = ValidationReport(items=[])
    if isinstance(problem, MultistageProblem):
        n = problem.n
        prev_center = problem.x0
        for t in range(1, problem.T + 1):
            st = problem.stage(t)
            report.add("box", f"stage {t}", st.box.dim == n,
                       "state dimension mismatch" if st.box.dim != n else "")
            _validate_stage(report, st, n, f"stage {t}", prev_center)
            prev_center = st.box.center
        return report

    tree: ScenarioTree = problem
    n = tree.n
    for t in range(1, tree.T + 1):
        base = tree.stage(t)
        report.add("box", f"stage {t}", base.box.dim == n)
    # transition probabilities
    for nid in tree.order:
        node = tree.node(nid)
        if not node.children:
            continue
        s = sum(tree.node(c).prob for c in node.children)
        report.add("probability sum", f"node {nid}", abs(s - 1.0) <= PROB_TOL,
                   f"children sum {s!r}")
    leaf_mass = sum(tree.path_probability(nid) for nid in tree.order
                    if not tree.node(nid).children)
    report.add("leaf probability mass", "tree", abs(leaf_mass - 1.0) <= 1e-10,
               f"total {leaf_mass!r}")
    # uniform depth
    depths = {tree.node(nid).stage for nid in tree.order
              if not tree.node(nid).children}
    report.add("uniform depth", "tree", depths == {tree.T},
               f"leaf stages {sorted(depths)}")
    # stagewise independence: identical child (p, overrides) multisets
    for t in range(1, tree.T):
        sets = set()
        for nid in tree.stage_nodes(t):
            node = tree.node(nid)
            key = tuple(sorted(
                (repr(tree.node(c).prob),
                 json.dumps(tree.node(c).overrides, sort_keys=True))
                for c in node.children))
            sets.add(key)
        report.add("stagewise independence", f"stage {t}", len(sets) <= 1,
                   "child realization sets differ across nodes")
    # per-node stage checks (convexity per realization, slater at parent box)
    for nid in tree.order:
        node = tree.node(nid)
        if node.stage == 0:
            continue
        if node.stage == 1:
            x_probe = tree.x0
        else:
            x_probe = tree.stage(node.stage - 1).box.center
        _validate_stage(report, node.model, n, f"node {nid}", x_probe)
    return report


# ---------------------------------------------------------------------------
# file format
# ---------------------------------------------------------------------------


def _quadratic_from_json(obj) -> QuadraticFn:
    return QuadraticFn(H=np.asarray(obj["H"], dtype=float),
                       c=np.asarray(obj["c"], dtype=float),
                       d=float(obj.get("d", 0.0)))


def _quadratic_to_json(fn: QuadraticFn):
    return {"H": fn.H.tolist(), "c": fn.c.tolist(), "d": fn.d}


def _stage_from_json(obj, n) -> StageModel:
    kind = obj.get("type", "S1")
    box = BoxSet(np.asarray(obj["box"]["lower"], dtype=float),
                 np.asarray(obj["box"]["upper"], dtype=float))
    kw = {}
    if kind == "S2":
        kw["ineq"] = tuple(_quadratic_from_json(g) for g in obj.get("g", []))
        for key in ("A", "B", "b"):
            if obj.get(key) is not None:
                kw[key] = np.asarray(obj[key], dtype=float)
    return StageModel(t=int(obj["t"]), objective=_quadratic_from_json(obj["f"]),
                      box=box, constraint_type=kind, **kw)


def _stage_to_json(stage: StageModel):
    obj = {"t": stage.t, "type": stage.constraint_type,
           "f": _quadratic_to_json(stage.objective),
           "box": {"lower": stage.box.lower.tolist(),
                   "upper": stage.box.upper.tolist()}}
    if stage.constraint_type == "S2":
        obj["g"] = [_quadratic_to_json(g) for g in stage.ineq]
        obj["A"] = None if stage.A is None else stage.A.tolist()
        obj["B"] = None if stage.B is None else stage.B.tolist()
        obj["b"] = None if stage.b is None else stage.b.tolist()
    return obj


def problem_from_dict(data):
    n = int(data["n"])
    stages = [_stage_from_json(s, n) for s in data["stages"]]
    stages.sort(key=lambda s: s.t)
    x0 = np.asarray(data["x0"], dtype=float)
    tree = data.get("tree")
    if not tree:
        return MultistageProblem(stages=tuple(stages), x0=x0)
    return ScenarioTree(stages, tree["nodes"], x0)


def problem_to_dict(problem):
    if isinstance(problem, MultistageProblem):
        return {"T": problem.T, "n": problem.n,
                "stages": [_stage_to_json(s) for s in problem.stages],
                "tree": None, "x0": problem.x0.tolist()}
    tree: ScenarioTree = problem
    nodes = []
    for nid in tree.order:
        node = tree.node(nid)
        nodes.append({"id": node.nid, "parent": node.parent, "p": node.prob,
                      "overrides": node.overrides or None})
    return {"T": tree.T, "n": tree.n,
            "stages": [_stage_to_json(s) for s in tree.base_stages],
            "tree": {"nodes": nodes}, "x0": tree.x0.tolist()}


def load_problem(path):
    with open(path, "r", encoding="utf-8") as fh:
        return problem_from_dict(json.load(fh))


def save_problem(problem, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(problem_to_dict(problem), fh, indent=1, sort_keys=True)
        fh.write("\n")


def problem_hash(problem) -> str:
    canon = json.dumps(problem_to_dict(problem), sort_keys=True)
    return hashlib.sha256(canon.encode()).hexdigest()
