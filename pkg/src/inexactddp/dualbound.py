"""Explicit norm bounds for eps-optimal dual solutions.

For a convex problem  min f(y) s.t. A y = b, g(y) <= 0, y in Y  with a
strictly feasible point y0 (slack kappa, interior radius r in the affine
span of Y), every eps-optimal dual pair of the reduced dual satisfies

    ||(lam, mu)|| <= (f(y0) - lower + eps + L(f) * r) / min(rho*, kappa/2)

provided r <= kappa / (2 L(g)).  rho* is the smallest radius at which the
ball around the origin intersected with the image A*V_Y is still covered by
the image of the interior ball; for the span of the non-fixed box
coordinates it equals r times the smallest nonzero singular value of A
restricted to those columns.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class DualBoundInputs:
    """Ingredients of the dual-norm bound (see :func:`dual_norm_bound`).

    ``obj_at_point`` may be the objective itself or any convex Lipschitz
    upper-bounding function evaluated at the interior point, with ``lip_obj``
    the matching Lipschitz constant.
    """

    obj_at_point: float      # f(y0) or an upper bound fbar(y0)
    lower_bound: float       # any lower bound on the optimal value
    eps: float
    lip_obj: float           # L(f) or L(fbar)
    radius: float            # r
    kappa: float
    image_radius: float      # rho*
    lip_ineq: float          # L(g), for the r <= kappa/(2 L(g)) precondition

    def validate(self):
        if self.radius <= 0 or self.kappa <= 0 or self.image_radius <= 0:
            raise ValueError("radius, kappa and image_radius must be positive")
        if self.lip_ineq > 0 and self.radius > self.kappa / (2.0 * self.lip_ineq) + 1e-12:
            raise ValueError(
                f"radius {self.radius!r} exceeds kappa/(2 L(g)) = "
                f"{self.kappa / (2.0 * self.lip_ineq)!r}; shrink the radius")


def lipschitz_over_box(fn, box) -> float:
    """Certified Lipschitz bound of a quadratic over a box.

    Returns ||H|| * R + ||grad(center)|| with R the box circumradius; the
    true supremum of the gradient norm never exceeds this, so downstream
    error budgets only get conservative.
    """
    H = getattr(fn, "H", None)
    if H is None:
        H = fn.P
        c = fn.q
    else:
        c = fn.c
    center = box.center
    radius = float(np.linalg.norm(box.halfwidth))
    grad_c = H @ center + c
    return float(np.linalg.norm(H, 2)) * radius + float(np.linalg.norm(grad_c))


def min_image_radius(A, free_mask, r) -> float:
    """rho*: reach of the equality image of the interior ball.

    With V the span of the non-fixed coordinates, any unit z in A*V is the
    image of a point of norm at most 1/sigma_min_nonzero(A|V), so the image
    of the radius-r ball covers the ball of radius r*sigma_min_nonzero.
    When the restricted matrix vanishes the image is {0} and any positive
    value works; 1 is returned by convention.
    """
    if r <= 0:
        raise ValueError("interior radius must be positive")
    if A is None:
        return 1.0
    A = np.asarray(A, dtype=float)
    free_mask = np.asarray(free_mask, dtype=bool)
    Av = A[:, free_mask]
    if Av.size == 0 or not np.any(Av):
        return 1.0
    sigma = np.linalg.svd(Av, compute_uv=False)
    nonzero = sigma[sigma > 1e-12 * max(1.0, float(sigma.max()))]
    if nonzero.size == 0:
        return 1.0
    return float(r * nonzero.min())


def image_radius_sampled(A, free_mask, r, n_samples=1000, rng=None) -> float:
    """Variational estimate of rho* by sampling unit directions of A*V.

    For each sampled unit z in the image, the definitional value is
    r / ||w_min|| with w_min the least-norm preimage in V.  The minimum over
    samples upper-bounds the true rho*; including the worst singular
    direction makes it exact.  Kept as the independent check of
    :func:`min_image_radius`.
    """
    if A is None:
        return 1.0
    rng = np.random.default_rng(0) if rng is None else rng
    A = np.asarray(A, dtype=float)
    free_mask = np.asarray(free_mask, dtype=bool)
    Av = A[:, free_mask]
    if Av.size == 0 or not np.any(Av):
        return 1.0
    pinv = np.linalg.pinv(Av)
    U, sigma, _ = np.linalg.svd(Av)
    nonzero = sigma > 1e-12 * max(1.0, float(sigma.max()))
    dirs = [U[:, np.argmin(np.where(nonzero, sigma, np.inf))]]
    for _ in range(n_samples - 1):
        w = rng.normal(size=Av.shape[1])
        z = Av @ w
        nz = np.linalg.norm(z)
        if nz > 1e-12:
            dirs.append(z / nz)
    best = np.inf
    for z in dirs:
        w = pinv @ z
        nw = float(np.linalg.norm(w))
        if nw > 1e-14:
            best = min(best, r / nw)
    return best if np.isfinite(best) else 1.0


def dual_norm_bound(inputs: DualBoundInputs) -> float:
    """Evaluate the dual-norm bound after validating its preconditions."""
    inputs.validate()
    num = inputs.obj_at_point - inputs.lower_bound + inputs.eps \
        + inputs.lip_obj * inputs.radius
    return num / min(inputs.image_radius, inputs.kappa / 2.0)
