"""Certified convex subproblem solvers.

This module is the numerical engine of the package.  It solves small dense
convex subproblems of the form

    min  0.5 y'P y + q'y + c0  (+ s)
    s.t. A y = b
         g_i(y) <= 0                      (convex quadratics)
         s >= offset_j + slope_j'y        (epigraph of a cut collection)
         lo <= y <= hi,  s in [floor, ceiling]

to a *certified* duality gap: the returned solution carries a feasible primal
point together with a dual-feasible multiplier pair whose dual value is
recomputed independently (minimizing the Lagrangian over the box), so the
reported gap is a rigorous bound on suboptimality.  The solver is a log-barrier
interior method; a deliberate-inexactness mode stops at the first iterate whose
certified gap drops below the requested tolerance, which is what produces
genuinely inexact solutions for the cut machinery built on top.

Linear programs are solved exactly (to ``LP_TOL``) through scipy's HiGHS
interface with deterministic lexicographic tie-breaking.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

EXACT_TOL = 1e-9
LP_TOL = 1e-9
SLATER_TOL = 1e-8
MAX_NEWTON_STEPS = 10_000

# largest dimension for which quadratic-over-box minimization enumerates
# active-set patterns exactly; above this a rigorous spectral lower bound
# is used instead (only the extensive-form solves get that large)
BOXQP_ENUM_MAX = 8


class SubsolverError(Exception):
    """Base class for solver failures."""


class InfeasibleError(SubsolverError):
    """Constraint system admits no feasible point."""


class SlaterError(SubsolverError):
    """No strictly feasible point: the dual may be unbounded."""


class LpInfeasibleError(SubsolverError):
    """Linear program is infeasible (corrupted constraint data)."""


class NoConvergenceError(SubsolverError):
    """Barrier iteration cap reached before certifying the target gap."""

    def __init__(self, msg, best_gap=None):
        super().__init__(msg)
        self.best_gap = best_gap


@dataclass(frozen=True)
class Quadratic:
    """Convex quadratic ``0.5 y'P y + q'y + c`` in a single variable block."""

    P: np.ndarray
    q: np.ndarray
    c: float = 0.0

    def value(self, y):
        return 0.5 * float(y @ self.P @ y) + float(self.q @ y) + self.c

    def grad(self, y):
        return self.P @ y + self.q

    @property
    def dim(self):
        return self.q.shape[0]


@dataclass(frozen=True)
class EpigraphTerm:
    """Piecewise-affine term ``max(floor, max_j offsets_j + slopes_j'y)``.

    Enters subproblems through an epigraph variable s with the rows
    ``s >= offsets_j + slopes_j'y`` and the finite range [floor, ceiling];
    the ceiling is a valid upper bound of the term over the box, kept finite
    so the barrier domain stays bounded.
    """

    slopes: np.ndarray   # (J, n)
    offsets: np.ndarray  # (J,)
    floor: float
    ceiling: float

    def value(self, y):
        v = self.floor
        if self.offsets.size:
            v = max(v, float(np.max(self.offsets + self.slopes @ y)))
        return v


@dataclass(frozen=True)
class ConvexSubproblem:
    """One stage subproblem with the previous state already substituted."""

    objective: Quadratic
    lo: np.ndarray
    hi: np.ndarray
    epi: EpigraphTerm | None = None
    ineq: tuple[Quadratic, ...] = ()
    eq_A: np.ndarray | None = None
    eq_b: np.ndarray | None = None

    @property
    def dim(self):
        return self.lo.shape[0]

    def objective_value(self, y):
        v = self.objective.value(y)
        if self.epi is not None:
            v += self.epi.value(y)
        return v


@dataclass
class EpsSolution:
    """Feasible primal point plus a dual-feasible pair with a certified gap.

    ``dual_val`` is the value of the Lagrangian dual function at
    (eq_mult, ineq_mult), recomputed by minimizing the Lagrangian over the
    box (see :func:`dual_value`), hence ``dual_val <= optimum <= primal_val``.
    """

    y: np.ndarray
    y_epi: float | None
    eq_mult: np.ndarray
    ineq_mult: np.ndarray
    primal_val: float
    dual_val: float
    gap: float
    target_eps: float
    newton_steps: int = 0


# ---------------------------------------------------------------------------
# quadratic over a box
# ---------------------------------------------------------------------------


def quad_box_min(P, q, lo, hi, c0=0.0):
    """Global minimum of ``0.5 y'P y + q'y + c0`` over the box [lo, hi].

    Enumerates active-set patterns: every face of the box whose reduced
    Hessian is nonsingular contributes its stationary point when that point
    lies on the face.  A minimizer whose own reduced Hessian is singular can
    be translated along a null direction (at constant value) until it hits a
    bound, so some enumerated face always contains a minimizer.  Exact up to
    dense linear algebra; intended for small dimensions.
    """
    n = len(q)
    if n == 0:
        return c0, np.zeros(0)
    if n > BOXQP_ENUM_MAX:
        raise ValueError(f"quad_box_min enumeration limited to {BOXQP_ENUM_MAX} dims")
    P = np.asarray(P, dtype=float)
    q = np.asarray(q, dtype=float)
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)

    best_val = np.inf
    best_y = None

    def consider(y):
        nonlocal best_val, best_y
        y = np.clip(y, lo, hi)
        v = 0.5 * float(y @ P @ y) + float(q @ y) + c0
        if v < best_val:
            best_val, best_y = v, y

    idx = np.arange(n)
    for free_bits in range(2 ** n):
        free = idx[[(free_bits >> i) & 1 == 1 for i in range(n)]]
        fixed = idx[[(free_bits >> i) & 1 == 0 for i in range(n)]]
        bounds = [(lo[i], hi[i]) for i in fixed]
        if free.size == 0:
            for combo in itertools.product(*bounds):
                y = np.array(combo, dtype=float)
                full = np.empty(n)
                full[fixed] = y
                consider(full)
            continue
        Pff = P[np.ix_(free, free)]
        try:
            chol = np.linalg.cholesky(Pff)
        except np.linalg.LinAlgError:
            continue  # singular face: its minimizers are covered by sub-faces
        if fixed.size:
            combos = np.array(list(itertools.product(*bounds)))
            rhs = -(q[free][:, None] + P[np.ix_(free, fixed)] @ combos.T)
        else:
            combos = np.zeros((1, 0))
            rhs = -q[free][:, None]
        sol = np.linalg.solve(chol.T, np.linalg.solve(chol, rhs))
        for j in range(combos.shape[0]):
            yf = sol[:, j]
            if np.all(yf >= lo[free] - 1e-9) and np.all(yf <= hi[free] + 1e-9):
                full = np.empty(n)
                full[fixed] = combos[j]
                full[free] = yf
                consider(full)
    # cheap extra candidate: clipped least-squares stationary point
    consider(np.linalg.lstsq(P, -q, rcond=None)[0])
    return best_val, best_y


def quad_box_lower(P, q, lo, hi, c0=0.0):
    """Rigorous lower bound on the box minimum, any dimension.

    Splits the linear term into the range of P (handled by the unconstrained
    minimum) and its orthogonal remainder, which is bounded separably over
    the box.  Used for stacked extensive-form problems where active-set
    enumeration is out of reach.
    """
    n = len(q)
    if n == 0:
        return c0
    if n <= BOXQP_ENUM_MAX:
        return quad_box_min(P, q, lo, hi, c0)[0]
    w, V = np.linalg.eigh(0.5 * (P + P.T))
    tol = 1e-12 * max(float(w.max(initial=0.0)), 1.0)
    qv = V.T @ q
    pos = w > tol
    quad_part = -0.5 * float(np.sum(qv[pos] ** 2 / w[pos]))
    r = V[:, ~pos] @ qv[~pos]
    lin_part = float(np.sum(np.minimum(r * lo, r * hi)))
    return quad_part + lin_part + c0


# ---------------------------------------------------------------------------
# linear programming
# ---------------------------------------------------------------------------


@dataclass
class LpSolution:
    value: float
    x: np.ndarray


def solve_lp(c, *, G=None, h=None, A=None, b=None, lb=None, ub=None,
             maximize=False, tie_break=True):
    """Solve a small dense LP exactly (to ``LP_TOL``) via HiGHS.

    With ``tie_break`` the returned point is refined to the lexicographically
    smallest optimal vertex (coordinates minimized in order over the optimal
    face), which keeps downstream runs deterministic.
    """
    c = np.asarray(c, dtype=float)
    n = c.shape[0]
    sign = -1.0 if maximize else 1.0
    lb = np.full(n, -np.inf) if lb is None else np.asarray(lb, dtype=float)
    ub = np.full(n, np.inf) if ub is None else np.asarray(ub, dtype=float)
    bounds = list(zip(lb, ub))
    opts = {"presolve": True,
            "primal_feasibility_tolerance": 1e-10,
            "dual_feasibility_tolerance": 1e-10}

    def run(cc, Gx, hx, Ax, bx):
        res = linprog(cc, A_ub=Gx, b_ub=hx, A_eq=Ax, b_eq=bx, bounds=bounds,
                      method="highs", options=opts)
        if res.status == 2:
            raise LpInfeasibleError("LP infeasible")
        if res.status != 0:
            raise SubsolverError(f"LP solver failure (status {res.status})")
        return res

    res = run(sign * c, G, h, A, b)
    x = res.x
    value = float(c @ x)
    if tie_break and n > 1:
        # pin the objective, then minimize coordinates in lexicographic order
        pin = sign * value + LP_TOL * max(1.0, abs(value))
        Gx = np.vstack([G, sign * c[None, :]]) if G is not None else sign * c[None, :]
        hx = np.concatenate([h, [pin]]) if h is not None else np.array([pin])
        Ax = None if A is None else np.asarray(A, dtype=float)
        bx = None if b is None else np.asarray(b, dtype=float)
        for i in range(n):
            e = np.zeros(n)
            e[i] = 1.0
            try:
                r = run(e, Gx, hx, Ax, bx)
            except SubsolverError:
                break
            row = np.zeros(n)
            row[i] = 1.0
            Ax = row[None, :] if Ax is None else np.vstack([Ax, row])
            bx = np.array([r.x[i]]) if bx is None else np.concatenate([bx, [r.x[i]]])
            x = r.x
    return LpSolution(value=value, x=x)


# ---------------------------------------------------------------------------
# interior points / maximum slack
# ---------------------------------------------------------------------------


def _margin_point(lo, hi, A=None, b=None):
    """Point satisfying the equalities with maximal scaled box margin."""
    n = lo.shape[0]
    width = hi - lo
    free = width > 0
    if A is None:
        return 0.5 * (lo + hi)
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    y_ls, *_ = np.linalg.lstsq(A, b, rcond=None)
    if np.linalg.norm(A @ y_ls - b) > 1e-8 * max(1.0, float(np.linalg.norm(b))):
        raise InfeasibleError("equality system is inconsistent")
    if not free.any():
        y = 0.5 * (lo + hi)
        if np.linalg.norm(A @ y - b) > 1e-8 * max(1.0, float(np.linalg.norm(b))):
            raise InfeasibleError("fixed coordinates violate the equalities")
        return y
    # max m  s.t.  A y = b,  lo + m*w <= y <= hi - m*w  on free coords
    w = np.where(free, width, 0.0)
    c = np.zeros(n + 1)
    c[n] = -1.0
    rows, rhs = [], []
    for i in range(n):
        if not free[i]:
            continue
        r = np.zeros(n + 1)
        r[i], r[n] = -1.0, w[i]
        rows.append(r)
        rhs.append(-lo[i])
        r = np.zeros(n + 1)
        r[i], r[n] = 1.0, w[i]
        rows.append(r)
        rhs.append(hi[i])
    Aeq = np.hstack([A, np.zeros((A.shape[0], 1))])
    lbx = np.concatenate([lo, [0.0]])
    ubx = np.concatenate([hi, [0.5]])
    sol = solve_lp(c, G=np.array(rows), h=np.array(rhs), A=Aeq, b=b,
                   lb=lbx, ub=ubx, tie_break=False)
    y, m = sol.x[:n], sol.x[n]
    if m <= 1e-12:
        raise SlaterError("no strictly feasible point inside the box")
    return y


def max_slack_point(ineq, lo, hi, A=None, b=None, target_tol=1e-9):
    """Maximize the joint slack t of ``g_i(y) <= -t`` and the box margins.

    Solves  max t  s.t.  g_i(y) + t <= 0,  A y = b,
                         lo_i + t <= y_i <= hi_i - t   (non-fixed coords).
    A positive optimum witnesses Slater-type interiority: the point sits at
    distance >= t from the box faces with constraint slack >= t.  Affine-only
    systems reduce to an LP; quadratic constraints go through the barrier on
    the lifted variable (y, t).
    """
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    n = lo.shape[0]
    free = (hi - lo) > 0
    t_cap = 1e6 if not free.any() else float(np.min((hi - lo)[free]) / 2.0)

    margin_rows = []
    for i in range(n):
        if not free[i]:
            continue
        r = np.zeros(n + 1)
        r[i], r[n] = -1.0, 1.0
        margin_rows.append((r, -lo[i]))
        r = np.zeros(n + 1)
        r[i], r[n] = 1.0, 1.0
        margin_rows.append((r, hi[i]))

    all_affine = all(np.allclose(g.P, 0.0, atol=1e-14) for g in ineq)
    if all_affine:
        c = np.zeros(n + 1)
        c[n] = 1.0
        rows = [np.concatenate([g.q, [1.0]]) for g in ineq]
        rhs = [-g.c for g in ineq]
        for r, v in margin_rows:
            rows.append(r)
            rhs.append(v)
        Aeq = None if A is None else np.hstack([A, np.zeros((A.shape[0], 1))])
        lbx = np.concatenate([lo, [-1e7]])
        ubx = np.concatenate([hi, [t_cap]])
        sol = solve_lp(c, G=np.array(rows) if rows else None,
                       h=np.array(rhs) if rhs else None,
                       A=Aeq, b=b, lb=lbx, ub=ubx, maximize=True, tie_break=False)
        return sol.x[:n], float(sol.x[n])

    # lifted barrier on (y, t): minimize -t with the margin rows as
    # zero-curvature inequality blocks
    y0 = _margin_point(lo, hi, A, b)
    g0 = max((g.value(y0) for g in ineq), default=-1.0)
    m0 = float(np.min(np.minimum(y0 - lo, hi - y0)[free])) if free.any() else t_cap
    t0 = min(-g0 - 1.0, m0 / 2.0, t_cap / 2.0)

    d = n + 1
    quads = []
    for g in ineq:
        Pg = np.zeros((d, d))
        Pg[:n, :n] = g.P
        quads.append(Quadratic(Pg, np.concatenate([g.q, [1.0]]), g.c))
    for r, v in margin_rows:
        quads.append(Quadratic(np.zeros((d, d)), r, -v))
    q = np.zeros(d)
    q[n] = -1.0
    lox = np.concatenate([lo, [min(t0, -1.0) * 2.0]])
    hix = np.concatenate([hi, [t_cap]])
    Aeqx = None if A is None else np.hstack([A, np.zeros((A.shape[0], 1))])
    prob = ConvexSubproblem(Quadratic(np.zeros((d, d)), q, 0.0), lox, hix,
                            None, tuple(quads), Aeqx, b)
    z0 = np.concatenate([y0, [t0]])
    sol = solve_eps(prob, 0.0, exact_tol=target_tol, interior=z0)
    return sol.y[:n], float(sol.y[n])


# ---------------------------------------------------------------------------
# barrier form (fixed coordinates eliminated, epigraph lifted)
# ---------------------------------------------------------------------------


class _Reduced:
    def __init__(self, problem: ConvexSubproblem):
        lo, hi = problem.lo, problem.hi
        self.problem = problem
        self.free = (hi - lo) > 0
        self.fixed_vals = np.where(self.free, 0.0, lo)
        self.nf = int(np.count_nonzero(self.free))
        self.has_epi = problem.epi is not None
        self.d = self.nf + (1 if self.has_epi else 0)

        f = self.free
        xfix = self.fixed_vals

        def restrict(quad):
            Pg = quad.P[np.ix_(f, f)]
            qg = quad.q[f] + quad.P[np.ix_(f, ~f)] @ xfix[~f]
            cg = quad.c + 0.5 * float(xfix[~f] @ quad.P[np.ix_(~f, ~f)] @ xfix[~f]) \
                + float(quad.q[~f] @ xfix[~f])
            return Quadratic(Pg, qg, cg)

        obj = restrict(problem.objective)
        self.P, self.q, self.c0 = obj.P, obj.q, obj.c
        self.lo = lo[f]
        self.hi = hi[f]
        self.quads = [restrict(g) for g in problem.ineq]

        if problem.eq_A is not None and problem.eq_A.shape[0] > 0:
            self.eq_A = problem.eq_A[:, f]
            self.eq_b = problem.eq_b - problem.eq_A[:, ~f] @ xfix[~f]
        else:
            self.eq_A = None
            self.eq_b = None

        if self.has_epi:
            epi = problem.epi
            if epi.slopes.size:
                self.cut_slopes = epi.slopes[:, f]
                self.cut_offsets = epi.offsets + epi.slopes[:, ~f] @ xfix[~f]
            else:
                self.cut_slopes = np.zeros((0, self.nf))
                self.cut_offsets = np.zeros(0)
            self.epi_floor = epi.floor
            self.epi_ceiling = epi.ceiling
        else:
            self.cut_slopes = np.zeros((0, self.nf))
            self.cut_offsets = np.zeros(0)

        # affine inequality rows  G z <= h  over z = (y_free [, s])
        rows, rhs, kinds = [], [], []
        for j in range(self.nf):
            r = np.zeros(self.d)
            r[j] = -1.0
            rows.append(r)
            rhs.append(-self.lo[j])
            kinds.append("box")
            r = np.zeros(self.d)
            r[j] = 1.0
            rows.append(r)
            rhs.append(self.hi[j])
            kinds.append("box")
        if self.has_epi:
            for jj in range(self.cut_offsets.shape[0]):
                r = np.zeros(self.d)
                r[: self.nf] = self.cut_slopes[jj]
                r[self.nf] = -1.0
                rows.append(r)
                rhs.append(-self.cut_offsets[jj])
                kinds.append("cut")
            r = np.zeros(self.d)
            r[self.nf] = -1.0
            rows.append(r)
            rhs.append(-self.epi_floor)
            kinds.append("cut")      # the floor acts as the trivial cut row
            r = np.zeros(self.d)
            r[self.nf] = 1.0
            rows.append(r)
            rhs.append(self.epi_ceiling)
            kinds.append("cut")
        self.G = np.array(rows) if rows else np.zeros((0, self.d))
        self.h = np.array(rhs) if rhs else np.zeros(0)
        self.is_box_row = np.array([k == "box" for k in kinds], dtype=bool)
        self.n_ineq_total = self.G.shape[0] + len(self.quads)

        self.Pz = np.zeros((self.d, self.d))
        self.Pz[: self.nf, : self.nf] = self.P
        self.qz = np.zeros(self.d)
        self.qz[: self.nf] = self.q
        if self.has_epi:
            self.qz[self.nf] = 1.0
        self.Az = None
        if self.eq_A is not None:
            self.Az = np.zeros((self.eq_A.shape[0], self.d))
            self.Az[:, : self.nf] = self.eq_A

    def embed(self, yf):
        y = self.fixed_vals.copy()
        y[self.free] = yf
        return y

    def f(self, z):
        return 0.5 * float(z @ self.Pz @ z) + float(self.qz @ z) + self.c0

    def quad_vals(self, z):
        y = z[: self.nf]
        return np.array([g.value(y) for g in self.quads])

    def epi_value(self, yf):
        if not self.has_epi:
            return 0.0
        v = self.epi_floor
        if self.cut_offsets.size:
            v = max(v, float(np.max(self.cut_offsets + self.cut_slopes @ yf)))
        return v

    def snapped_primal(self, z):
        """Objective at (y, s) with s snapped down onto the cut envelope."""
        yf = z[: self.nf]
        v = 0.5 * float(yf @ self.P @ yf) + float(self.q @ yf) + self.c0
        if self.has_epi:
            v += self.epi_value(yf)
        return v

    def certificate(self, z, t):
        """Multipliers at barrier parameter t plus a rigorous lower bound.

        Box rows are not dualized: the partial Lagrangian (equality, quadratic
        and cut-row multipliers only) is minimized exactly over the box and the
        epigraph interval, which lower-bounds the optimum by weak duality no
        matter how far z sits from the central path.
        """
        slacks = self.h - self.G @ z
        mu_aff = 1.0 / (t * slacks) if slacks.size else np.zeros(0)
        gv = self.quad_vals(z)
        mu_quad = 1.0 / (t * (-gv)) if gv.size else np.zeros(0)

        lam = np.zeros(0)
        if self.Az is not None:
            y = z[: self.nf]
            grad = self.Pz @ z + self.qz
            if slacks.size:
                grad += self.G.T @ mu_aff
            for g, m in zip(self.quads, mu_quad):
                grad[: self.nf] += m * g.grad(y)
            lam = np.linalg.lstsq(self.Az.T, -grad, rcond=None)[0]

        return lam, mu_quad, mu_aff, self.lagrangian_lower(lam, mu_quad, mu_aff)

    def certificate_polished(self, z):
        """Active-set least-squares multipliers, independent of the barrier.

        Near an optimum the barrier estimate 1/(t*slack) degrades once slacks
        reach float resolution; fitting multipliers of the near-active
        constraints to the stationarity residual instead gives certificates
        down to machine precision.  Any clipping to mu >= 0 only loosens the
        (still rigorous) Lagrangian bound.
        """
        y = z[: self.nf]
        scale = max(1.0, float(np.linalg.norm(z)))
        slacks = self.h - self.G @ z
        gv = self.quad_vals(z)
        grad0 = self.Pz @ z + self.qz
        cols = []
        tags = []  # ("aff", i) / ("quad", i)
        for i in range(self.G.shape[0]):
            if slacks[i] <= 1e-5 * scale:
                cols.append(self.G[i])
                tags.append(("aff", i))
        for i, g in enumerate(self.quads):
            if -gv[i] <= 1e-5 * scale:
                col = np.zeros(self.d)
                col[: self.nf] = g.grad(y)
                cols.append(col)
                tags.append(("quad", i))
        n_eq = 0 if self.Az is None else self.Az.shape[0]
        if not cols and n_eq == 0:
            return np.zeros(0), np.zeros(len(self.quads)), np.zeros(self.G.shape[0])
        # nonnegative fit for the inequality columns, free equality columns
        # (expressed as a difference of two nonnegative blocks for nnls)
        blocks = [np.array(cols).T] if cols else []
        if n_eq:
            blocks += [self.Az.T, -self.Az.T]
        M = np.hstack(blocks) if blocks else np.zeros((self.d, 0))
        try:
            coef, _ = _nnls(M, -grad0)
        except Exception:
            coef = np.clip(np.linalg.lstsq(M, -grad0, rcond=None)[0], 0.0, None)
        mu_aff = np.zeros(self.G.shape[0])
        mu_quad = np.zeros(len(self.quads))
        for j, (kind, i) in enumerate(tags):
            v = max(coef[j], 0.0)
            if kind == "aff":
                mu_aff[i] = v
            else:
                mu_quad[i] = v
        if n_eq:
            lam = coef[len(cols):len(cols) + n_eq] \
                - coef[len(cols) + n_eq:len(cols) + 2 * n_eq]
        else:
            lam = np.zeros(0)
        return lam, mu_quad, mu_aff

    def lagrangian_lower(self, lam, mu_quad, mu_aff):
        PL = self.P.copy()
        qL = self.q.copy()
        const = self.c0
        for g, m in zip(self.quads, mu_quad):
            PL += m * g.P
            qL += m * g.q
            const += m * g.c
        if self.eq_A is not None and lam.size:
            qL = qL + self.eq_A.T @ lam
            const -= float(self.eq_b @ lam)
        s_coef = 1.0 if self.has_epi else 0.0
        for i in np.flatnonzero(~self.is_box_row):
            m = mu_aff[i]
            row = self.G[i]
            qL = qL + m * row[: self.nf]
            if self.has_epi:
                s_coef += m * row[self.nf]
            const -= m * self.h[i]
        if self.nf == 0:
            val = 0.0
        elif self.nf <= BOXQP_ENUM_MAX:
            val = quad_box_min(PL, qL, self.lo, self.hi)[0]
        else:
            val = quad_box_lower(PL, qL, self.lo, self.hi)
        lower = val + const
        if self.has_epi:
            lower += min(s_coef * self.epi_floor, s_coef * self.epi_ceiling)
        return lower - 1e-12 * max(1.0, abs(lower))


def _interior_start(red: _Reduced):
    if red.nf == 0:
        yf = np.zeros(0)
    elif red.quads:
        yf, t = max_slack_point(red.quads, red.lo, red.hi, red.eq_A, red.eq_b)
        if t <= SLATER_TOL:
            raise SlaterError(f"maximized constraint slack {t:.2e} <= {SLATER_TOL}")
    else:
        yf = _margin_point(red.lo, red.hi, red.eq_A, red.eq_b)
    if not red.has_epi:
        return yf
    env = red.epi_value(yf)
    s0 = min(env + max(1.0, 0.1 * (red.epi_ceiling - env)),
             0.5 * (env + red.epi_ceiling))
    if not s0 > env:
        s0 = env + 0.5 * max(red.epi_ceiling - env, 1e-6)
    return np.concatenate([yf, [s0]])


def _strictly_feasible(red: _Reduced, z):
    if red.G.shape[0] and np.any(red.h - red.G @ z <= 0.0):
        return False
    gv = red.quad_vals(z)
    return not (gv.size and np.any(gv >= 0.0))


def _barrier_merit(red, z, t):
    slacks = red.h - red.G @ z
    gv = red.quad_vals(z)
    if (slacks.size and np.any(slacks <= 0)) or (gv.size and np.any(gv >= 0)):
        return np.inf
    val = t * red.f(z)
    if slacks.size:
        val -= float(np.sum(np.log(slacks)))
    if gv.size:
        val -= float(np.sum(np.log(-gv)))
    return val


def _newton_step(red, z, t):
    slacks = red.h - red.G @ z
    grad = t * (red.Pz @ z + red.qz)
    H = t * red.Pz.copy()
    if slacks.size:
        inv_s = 1.0 / slacks
        grad = grad + red.G.T @ inv_s
        Gs = red.G * inv_s[:, None]
        H = H + Gs.T @ Gs
    y = z[: red.nf]
    for g in red.quads:
        gv = g.value(y)
        gg = g.grad(y)
        H[: red.nf, : red.nf] += np.outer(gg, gg) / gv ** 2 + g.P / (-gv)
        grad[: red.nf] += gg / (-gv)
    if not (np.all(np.isfinite(grad)) and np.all(np.isfinite(H))):
        return np.zeros(red.d), 0.0
    reg = 1e-14 * max(1.0, float(np.max(np.abs(H))))
    if red.Az is None:
        try:
            dz = np.linalg.solve(H, -grad)
        except np.linalg.LinAlgError:
            dz = np.linalg.solve(H + reg * np.eye(red.d), -grad)
        return dz, float(-grad @ dz)
    m = red.Az.shape[0]
    K = np.zeros((red.d + m, red.d + m))
    K[: red.d, : red.d] = H
    K[: red.d, red.d:] = red.Az.T
    K[red.d:, : red.d] = red.Az
    rhs = np.concatenate([-grad, red.eq_b - red.Az @ z])
    try:
        sol = np.linalg.solve(K, rhs)
    except np.linalg.LinAlgError:
        K[: red.d, : red.d] += reg * np.eye(red.d)
        try:
            sol = np.linalg.solve(K, rhs)
        except np.linalg.LinAlgError:
            return np.zeros(red.d), 0.0
    dz = sol[: red.d]
    return dz, float(-grad @ dz)


def solve_eps(problem: ConvexSubproblem, eps: float, *, mode: str = "polish",
              exact_tol: float = EXACT_TOL, interior: np.ndarray | None = None,
              max_newton: int = MAX_NEWTON_STEPS) -> EpsSolution:
    """Solve to a certified gap ``<= max(eps, exact_tol * scale)``.

    mode="polish" keeps centering until the certified gap is below target;
    mode="first_hit" returns at the first barrier iterate whose certified gap
    reaches eps, so the solution is genuinely about eps-suboptimal rather than
    polished.  The certificate never trusts the barrier's internal progress
    estimate: it re-minimizes the Lagrangian over the box at each checkpoint.

    ``interior`` is an optional strictly feasible point in the full y-space.
    """
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    if mode not in ("polish", "first_hit"):
        raise ValueError(f"unknown mode {mode!r}")
    red = _Reduced(problem)

    def finish(z, lam, mu, lower, steps):
        yf = z[: red.nf]
        y = red.embed(yf)
        primal = red.snapped_primal(z)
        if lam.size or mu.size or not red.has_epi:
            dual = max(dual_value(problem, lam, mu), lower)
        else:
            dual = lower  # nothing is dualized: the certificate is the value
        y_epi = red.epi_value(yf) if red.has_epi else None
        target = max(eps, exact_tol * max(1.0, abs(primal)))
        return EpsSolution(y=y, y_epi=y_epi, eq_mult=lam, ineq_mult=mu,
                           primal_val=primal, dual_val=dual,
                           gap=primal - dual, target_eps=target,
                           newton_steps=steps)

    if red.d == 0:
        y = red.embed(np.zeros(0))
        gv = red.quad_vals(np.zeros(0))
        if gv.size and np.any(gv > 1e-9):
            raise InfeasibleError("fixed coordinates violate the inequalities")
        if red.eq_A is not None and np.linalg.norm(red.eq_b) > 1e-8:
            raise InfeasibleError("fixed coordinates violate the equalities")
        val = red.c0
        lam = np.zeros(0 if red.eq_A is None else red.eq_A.shape[0])
        return EpsSolution(y=y, y_epi=None, eq_mult=lam,
                           ineq_mult=np.zeros(len(red.quads)),
                           primal_val=val, dual_val=val, gap=0.0,
                           target_eps=max(eps, exact_tol))

    if interior is not None:
        yf0 = np.asarray(interior, dtype=float)[red.free]
        if red.has_epi:
            env = red.epi_value(yf0)
            z = np.concatenate([yf0, [min(env + 1.0, 0.5 * (env + red.epi_ceiling))]])
        else:
            z = yf0
    else:
        z = _interior_start(red)
    if not _strictly_feasible(red, z):
        raise SubsolverError("interior start is not strictly feasible")

    scale0 = max(1.0, abs(red.snapped_primal(z)))
    t = red.n_ineq_total / (10.0 * scale0)
    t_factor = 5.0 if mode == "first_hit" else 10.0
    steps = 0
    best = None

    def check(z, t, polish_mult=True):
        nonlocal best
        primal = red.snapped_primal(z)
        lam, mu, _, lower = red.certificate(z, t)
        gap = primal - lower
        if polish_mult:
            lam2, mu2, mu_aff2 = red.certificate_polished(z)
            lower2 = red.lagrangian_lower(lam2, mu2, mu_aff2)
            if lower2 > lower:
                lam, mu, lower, gap = lam2, mu2, lower2, primal - lower2
        if best is None or gap < best[0]:
            best = (gap, z.copy(), lam, mu, lower)
        ok = gap <= max(eps, exact_tol * max(1.0, abs(primal)))
        return ok, lam, mu, lower

    if mode == "first_hit":
        ok, lam, mu, lower = check(z, t, polish_mult=False)
        if ok:
            return finish(z, lam, mu, lower, steps)

    stall = 0
    prev_best = np.inf
    while steps < max_newton:
        for _ in range(60):  # center at the current t
            if steps >= max_newton:
                break
            dz, dec = _newton_step(red, z, t)
            steps += 1
            alpha = 1.0
            slacks = red.h - red.G @ z
            Gd = red.G @ dz
            pos = Gd > 0
            if pos.any():
                alpha = min(alpha, 0.99 * float(np.min(slacks[pos] / Gd[pos])))
            merit0 = _barrier_merit(red, z, t)
            moved = False
            for _ in range(60):
                zn = z + alpha * dz
                if _barrier_merit(red, zn, t) < merit0 + 1e-12 * max(1.0, abs(merit0)):
                    z = zn
                    moved = True
                    break
                alpha *= 0.5
            if mode == "first_hit":
                ok, lam, mu, lower = check(z, t, polish_mult=False)
                if ok:
                    return finish(z, lam, mu, lower, steps)
            if not moved or abs(dec) / 2.0 <= 1e-6:
                break
        ok, lam, mu, lower = check(z, t)
        if ok:
            return finish(z, lam, mu, lower, steps)
        if best[0] > 0.5 * prev_best:
            stall += 1
            if stall >= 5:
                break
        else:
            stall = 0
        prev_best = best[0]
        if t > 1e14:
            break
        t *= t_factor

    # one last polished attempt at the best iterate seen
    ok, lam, mu, lower = check(best[1], t)
    if ok:
        return finish(best[1], lam, mu, lower, steps)
    raise NoConvergenceError(
        f"barrier did not certify the gap target after {steps} Newton steps "
        f"(best gap {best[0]:.3e})", best_gap=best[0] if best else None)


def dual_value(problem: ConvexSubproblem, lam, mu) -> float:
    """Value of the Lagrangian dual function at the pair (lam, mu).

    Minimizes  f(y) + cut-envelope(y) + lam'(A y - b) + mu'g(y)  over the box:
    the quadratic part is assembled and minimized exactly; when a cut envelope
    is present the piecewise term goes through the affine-only barrier with
    its own rigorous certificate, and the certified lower side is returned
    (the safe direction for weak duality).  Accurate to about 1e-10 on
    desk-scale data.
    """
    lam = np.asarray(lam, dtype=float)
    mu = np.asarray(mu, dtype=float)
    if mu.size and float(np.min(mu)) < -1e-12:
        raise ValueError("inequality multipliers must be nonnegative")
    obj = problem.objective
    P = obj.P.copy()
    q = obj.q.copy()
    c = obj.c
    for g, m in zip(problem.ineq, mu):
        P = P + m * g.P
        q = q + m * g.q
        c += m * g.c
    if problem.eq_A is not None and lam.size:
        q = q + problem.eq_A.T @ lam
        c -= float(problem.eq_b @ lam)
    shifted = ConvexSubproblem(Quadratic(P, q, c), problem.lo, problem.hi,
                               epi=problem.epi)
    red = _Reduced(shifted)
    if not red.has_epi:
        if red.nf == 0:
            return red.c0
        if red.nf <= BOXQP_ENUM_MAX:
            return quad_box_min(red.P, red.q, red.lo, red.hi, red.c0)[0]
        return quad_box_lower(red.P, red.q, red.lo, red.hi, red.c0)
    sol = solve_eps(shifted, 0.0, exact_tol=1e-11)
    return sol.dual_val
