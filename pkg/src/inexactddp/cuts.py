"""Lower-bounding cuts for recourse functions from inexact stage solutions.

A cut anchored at x̄ evaluates  value_at_anchor - inexactness + slope'(x - x̄)
and stays below the stage value function everywhere as long as the
inexactness deduction covers the first-order optimality slack of the
(possibly eps-suboptimal) solution it was built from:

  * box-only stages need just the primal point: the deduction is the largest
    first-order decrease of the linearized objective over the feasible set
    (an LP over the box and the cut epigraph), and the model value at the
    anchor exceeds the cut by at most that slack;
  * coupled stages additionally use a dual-feasible multiplier pair; the
    slack is taken on the Lagrangian gradient and the anchor gap is bounded
    by eps plus the slack.

Pools hold the cuts of one stage (append-only, so the polyhedral model only
grows) together with a finite initial lower bound that plays the role of a
trivial first cut and keeps every subproblem bounded.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import BoxSet, SlaterCertificate, StageModel
from .subsolver import EpigraphTerm, EpsSolution, solve_lp


@dataclass(frozen=True)
class Cut:
    """Affine minorant anchored at a trial state."""

    anchor: np.ndarray
    value_at_anchor: float      # model value estimate at the anchor
    inexactness: float          # nonnegative deduction preserving validity
    slope: np.ndarray
    stage: int = 0
    iteration: int = 0

    def __post_init__(self):
        object.__setattr__(self, "anchor", np.asarray(self.anchor, dtype=float))
        object.__setattr__(self, "slope", np.asarray(self.slope, dtype=float))
        if self.inexactness < 0:
            raise ValueError("cut inexactness must be nonnegative")

    def value(self, x):
        x = np.asarray(x, dtype=float)
        return self.value_at_anchor - self.inexactness \
            + float(self.slope @ (x - self.anchor))

    def offset(self):
        """Constant part when written as offset + slope'x."""
        return self.value_at_anchor - self.inexactness \
            - float(self.slope @ self.anchor)


class CutPool:
    """Append-only cut collection for one stage's recourse function.

    eval(x) = max(initial_bound, max_j cut_j(x)); appending can only raise it,
    which is what the convergence argument leans on.  Additions must be
    serialized by the caller; evaluation is pure.
    """

    def __init__(self, stage: int, initial_bound: float):
        self.stage = stage
        self.initial_bound = float(initial_bound)
        self.cuts: list[Cut] = []

    def __len__(self):
        return len(self.cuts)

    def add(self, cut: Cut):
        if cut.anchor.ndim != 1:
            raise ValueError("cut anchor must be a vector")
        self.cuts.append(cut)

    def eval(self, x):
        v = self.initial_bound
        for cut in self.cuts:
            v = max(v, cut.value(x))
        return v

    def eval_many(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        vals = np.full(X.shape[0], self.initial_bound)
        for cut in self.cuts:
            vals = np.maximum(vals, cut.value_at_anchor - cut.inexactness
                              + (X - cut.anchor) @ cut.slope)
        return vals

    def as_epigraph(self, box: BoxSet, pad: float = 1.0) -> EpigraphTerm:
        """Epigraph data over the given box with a finite ceiling."""
        if self.cuts:
            slopes = np.array([c.slope for c in self.cuts])
            offsets = np.array([c.offset() for c in self.cuts])
            tops = offsets + slopes @ box.center \
                + np.abs(slopes) @ box.halfwidth
            ceiling = max(self.initial_bound, float(np.max(tops))) + pad
        else:
            slopes = np.zeros((0, box.dim))
            offsets = np.zeros(0)
            ceiling = self.initial_bound + pad
        return EpigraphTerm(slopes=slopes, offsets=offsets,
                            floor=self.initial_bound, ceiling=ceiling)


@dataclass
class CutReport:
    """A constructed cut plus the quantities behind its anchor-gap bound."""

    cut: Cut
    slack: float                    # first-order slack used as the deduction
    eps_used: float
    anchor_gap_bound: float         # slack (primal) or eps + slack (dual)
    refined_bound: float | None = None


def first_order_slack(grad, pool: CutPool | None, box: BoxSet, y_hat,
                      epi_hat: float = 0.0) -> float:
    """Largest first-order decrease over the feasible set, solved as an LP.

    Returns max over (y, s) feasible of  grad'(y_hat - y) + epi_hat - s,
    the s-part present only with a pool.  Equals
    grad'y_hat + epi_hat - min over the box of (grad'y + pool.eval(y)), and
    is nonnegative whenever (y_hat, epi_hat) is itself feasible.
    """
    grad = np.asarray(grad, dtype=float)
    y_hat = np.asarray(y_hat, dtype=float)
    n = box.dim
    if pool is None:
        sol = solve_lp(grad, lb=box.lower, ub=box.upper, tie_break=False)
        return float(grad @ y_hat) - sol.value
    if epi_hat < pool.eval(y_hat) - 1e-9:
        raise ValueError("epi_hat must dominate the pool value at y_hat")
    epi = pool.as_epigraph(box)
    c = np.concatenate([grad, [1.0]])
    rows = [np.concatenate([epi.slopes[j], [-1.0]])
            for j in range(epi.offsets.shape[0])]
    rhs = [-epi.offsets[j] for j in range(epi.offsets.shape[0])]
    rows.append(np.concatenate([np.zeros(n), [-1.0]]))
    rhs.append(-epi.floor)
    lb = np.concatenate([box.lower, [-np.inf]])
    ub = np.concatenate([box.upper, [np.inf]])
    sol = solve_lp(c, G=np.array(rows), h=np.array(rhs), lb=lb, ub=ub,
                   tie_break=False)
    return float(grad @ y_hat) + float(epi_hat) - sol.value


def lagrangian_slack(grad_lagrangian, pool, box, y_hat, epi_hat=0.0) -> float:
    """first_order_slack evaluated on a Lagrangian gradient (coupled stages)."""
    return first_order_slack(grad_lagrangian, pool, box, y_hat, epi_hat)


def cut_from_primal(stage: StageModel, x_bar, sol: EpsSolution,
                    pool_next: CutPool, iteration: int = 0) -> CutReport:
    """Cut for a box-only stage from an eps-optimal primal solution.

    value_at_anchor is the stage cost plus the continuation model at the
    solution; the deduction equals the first-order slack, so the model value
    at the anchor exceeds the cut value by a quantity in [0, slack].
    """
    x_bar = np.asarray(x_bar, dtype=float)
    y = sol.y
    epi_hat = pool_next.eval(y)
    grad_y = stage.objective.grad_current(stage.n, y, x_bar)
    slack = first_order_slack(grad_y, pool_next, stage.box, y, epi_hat)
    eta = max(slack, 0.0)
    theta = stage.cost(y, x_bar) + epi_hat
    beta = stage.objective.grad_previous(stage.n, y, x_bar)
    cut = Cut(anchor=x_bar, value_at_anchor=theta, inexactness=eta,
              slope=beta, stage=stage.t, iteration=iteration)
    refined = refine_anchor_bound(
        eta, stage.objective.current_block_norm(stage.n), stage.box.diameter)
    return CutReport(cut=cut, slack=slack, eps_used=sol.target_eps,
                     anchor_gap_bound=eta, refined_bound=refined)


def cut_from_primal_approx_slack(stage: StageModel, x_bar, sol: EpsSolution,
                                 pool_next: CutPool, tilde_y, eps2: float,
                                 tilde_epi: float | None = None,
                                 iteration: int = 0) -> CutReport:
    """Box-only cut when the slack LP itself was solved eps2-approximately.

    tilde_y (with epigraph value tilde_epi) must be an eps2-optimal solution
    of the slack LP; the deduction becomes eps2 plus the achieved decrease,
    which keeps the cut valid at the price of a looser anchor bound.
    """
    x_bar = np.asarray(x_bar, dtype=float)
    tilde_y = np.asarray(tilde_y, dtype=float)
    y = sol.y
    epi_hat = pool_next.eval(y)
    if tilde_epi is None:
        tilde_epi = pool_next.eval(tilde_y)
    grad_y = stage.objective.grad_current(stage.n, y, x_bar)
    slack_hat = float(grad_y @ (y - tilde_y)) + epi_hat - tilde_epi
    exact = first_order_slack(grad_y, pool_next, stage.box, y, epi_hat)
    if exact - eps2 > slack_hat + 1e-9:
        raise ValueError("tilde_y is not an eps2-optimal slack solution")
    eta = eps2 + slack_hat
    theta = stage.cost(y, x_bar) + epi_hat
    beta = stage.objective.grad_previous(stage.n, y, x_bar)
    cut = Cut(anchor=x_bar, value_at_anchor=theta, inexactness=max(eta, 0.0),
              slope=beta, stage=stage.t, iteration=iteration)
    refined = refine_anchor_bound_approx(
        slack_hat, eps2, stage.objective.current_block_norm(stage.n),
        stage.box.diameter)
    return CutReport(cut=cut, slack=slack_hat, eps_used=sol.target_eps,
                     anchor_gap_bound=eps2 + max(slack_hat, 0.0),
                     refined_bound=refined)


def cut_from_primal_dual(stage: StageModel, x_bar, sol: EpsSolution,
                         pool_next: CutPool, iteration: int = 0,
                         slater: SlaterCertificate | None = None,
                         value_lower_bound: float | None = None) -> CutReport:
    """Cut for a coupled stage from an eps-optimal primal/dual pair.

    value_at_anchor is the Lagrangian at the solution; the deduction is the
    first-order slack of the Lagrangian gradient, and the model value at the
    anchor exceeds the cut by at most eps + slack.  When a Slater certificate
    and a valid lower bound on the stage value are supplied, the refined
    anchor bound based on the multiplier-norm estimate is also reported.
    """
    x_bar = np.asarray(x_bar, dtype=float)
    y = sol.y
    lam = np.asarray(sol.eq_mult, dtype=float)
    mu = np.asarray(sol.ineq_mult, dtype=float)
    if mu.size and float(np.min(mu)) < -1e-12:
        raise ValueError("invalid dual: negative inequality multiplier")
    mu = np.clip(mu, 0.0, None) if mu.size else mu

    n = stage.n
    epi_hat = pool_next.eval(y)
    theta = stage.cost(y, x_bar) + epi_hat
    grad_L = stage.objective.grad_current(n, y, x_bar)
    beta = stage.objective.grad_previous(n, y, x_bar)
    if stage.A is not None and lam.size:
        resid = stage.A @ y + stage.B @ x_bar - stage.b
        theta += float(lam @ resid)
        grad_L = grad_L + stage.A.T @ lam
        beta = beta + stage.B.T @ lam
    gvals = stage.ineq_values(y, x_bar)
    for i, g in enumerate(stage.ineq):
        theta += mu[i] * gvals[i]
        grad_L = grad_L + mu[i] * g.grad_current(n, y, x_bar)
        beta = beta + mu[i] * g.grad_previous(n, y, x_bar)

    slack = lagrangian_slack(grad_L, pool_next, stage.box, y, epi_hat)
    eta = max(slack, 0.0)
    eps = sol.target_eps
    cut = Cut(anchor=x_bar, value_at_anchor=theta, inexactness=eta,
              slope=beta, stage=stage.t, iteration=iteration)
    refined = None
    if slater is not None and value_lower_bound is not None:
        if stage.n_ineq:
            obj_at_point = stage.cost(slater.point, x_bar) \
                + pool_next.eval(slater.point)
            u_bar = multiplier_scale_bound(obj_at_point, value_lower_bound,
                                           eps, slater.margin)
        else:
            u_bar = 0.0
        lip_obj = stage.objective.current_block_norm(n)
        lip_ineq = max((g.current_block_norm(n) for g in stage.ineq), default=0.0)
        refined = refine_anchor_bound_dual(eta, lip_obj, lip_ineq, u_bar,
                                           stage.box.diameter, eps)
    return CutReport(cut=cut, slack=slack, eps_used=eps,
                     anchor_gap_bound=eps + eta, refined_bound=refined)


# ---------------------------------------------------------------------------
# refined anchor-gap bounds
# ---------------------------------------------------------------------------


def refine_anchor_bound(slack: float, lip_grad: float, diam: float) -> float:
    """Sharper anchor-gap bound under a Lipschitz gradient.

    Returns slack*(2*M - slack)/(2*M) with M = lip_grad*diam**2 when
    slack <= M, else slack/2; always in [0, slack].
    """
    if slack <= 0.0:
        return 0.0
    m = lip_grad * diam ** 2
    if slack <= m:
        return slack * (2.0 * m - slack) / (2.0 * m)
    return 0.5 * slack


def refine_anchor_bound_approx(slack_hat: float, eps2: float,
                               lip_grad: float, diam: float) -> float:
    """Refined bound when the slack LP was solved eps2-approximately."""
    if slack_hat <= 0.0:
        return eps2 + slack_hat
    m = lip_grad * diam ** 2
    if slack_hat <= m:
        return eps2 + slack_hat * (2.0 * m - slack_hat) / (2.0 * m)
    return eps2 + 0.5 * slack_hat


def multiplier_scale_bound(obj_at_point: float, value_lower_bound: float,
                           eps: float, min_slack: float) -> float:
    """Bound on the l1 norm of optimal inequality multipliers.

    Uses a strictly feasible point with inequality slack >= min_slack:
    any eps-optimal dual value is squeezed between the lower bound minus eps
    and the objective at the point minus min_slack times the multiplier mass.
    """
    if min_slack <= 0.0:
        raise ValueError("Slater margin must be positive")
    return (obj_at_point - value_lower_bound + eps) / min_slack


def refine_anchor_bound_dual(slack: float, lip_obj: float, lip_ineq: float,
                             mult_bound: float, diam: float,
                             eps: float) -> float:
    """Refined anchor-gap bound for coupled-stage cuts.

    The Lagrangian gradient is Lipschitz with constant at most
    lip_obj + mult_bound*lip_ineq; the bound improves eps + slack by the
    curvature term and never exceeds it.
    """
    if slack <= 0.0:
        return eps
    m3 = (lip_obj + mult_bound * lip_ineq) * diam ** 2
    if slack <= m3:
        return eps + slack - slack ** 2 / (2.0 * m3)
    return eps + 0.5 * slack
