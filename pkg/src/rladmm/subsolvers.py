"""Subproblem solvers for one ADMM iteration.

Generators are boxed scalar quadratics with closed-form minimizers. Branches
are 4-variable bound-constrained nonconvex problems in the squared voltage
magnitudes and angles of their end buses, solved by trust-region Newton.
Buses are diagonal QPs with two linear balance equalities, solved in closed
form through a 2x2 system.

The single-instance functions are the reference implementations; the
``*_batch`` functions are the vectorized forms the engine calls.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import _tr, kernels

TWO_PI = 2.0 * math.pi
DEFAULT_LIMIT_WEIGHT = 1e3


class SolverFailure(RuntimeError):
    def __init__(self, message: str, component=None, start=None):
        super().__init__(message)
        self.component = component
        self.start = start


class ModelError(ValueError):
    pass


# ---------------------------------------------------------------------------
# generators


@dataclass
class GenSubproblem:
    cost: tuple[float, float]          # (c2, c1)
    bounds: tuple[float, float, float, float]  # (pmin, pmax, qmin, qmax)
    xbar: tuple[float, float]
    y: tuple[float, float]
    rho: tuple[float, float]


def solve_generator(sub: GenSubproblem) -> tuple[float, float]:
    c2, c1 = sub.cost
    pmin, pmax, qmin, qmax = sub.bounds
    rp, rq = sub.rho
    denom = 2.0 * c2 + rp
    if not (denom > 0 and rq > 0):
        raise ValueError("invalid penalty: generator subproblem is not strictly convex")
    p = (rp * sub.xbar[0] - sub.y[0] - c1) / denom
    q = (rq * sub.xbar[1] - sub.y[1]) / rq
    return min(max(p, pmin), pmax), min(max(q, qmin), qmax)


def solve_generators_batch(c2, c1, pmin, pmax, qmin, qmax, xbar, y, rho):
    """Vectorized :func:`solve_generator`; ``xbar, y, rho`` have shape ``(n, 2)``."""
    p = (rho[:, 0] * xbar[:, 0] - y[:, 0] - c1) / (2.0 * c2 + rho[:, 0])
    q = (rho[:, 1] * xbar[:, 1] - y[:, 1]) / rho[:, 1]
    return np.clip(p, pmin, pmax), np.clip(q, qmin, qmax)


# ---------------------------------------------------------------------------
# branches


@dataclass
class BranchSubproblem:
    adm: Sequence[float]
    rate: float
    bounds: tuple[tuple[float, float], tuple[float, float]]  # w_i and w_j boxes
    xbar: Sequence[float]
    y: Sequence[float]
    rho: Sequence[float]
    start: Sequence[float]
    mu: float = DEFAULT_LIMIT_WEIGHT

    def box(self) -> tuple[list[float], list[float]]:
        (wil, wiu), (wjl, wju) = self.bounds
        return [wil, wjl, -TWO_PI, -TWO_PI], [wiu, wju, TWO_PI, TWO_PI]


@dataclass
class BranchResult:
    u: tuple[float, float, float, float]
    z: tuple[float, ...]
    iterations: int
    status: int
    objective: float = field(default=math.nan)


def branch_objective(sub: BranchSubproblem, u) -> tuple[float, list[float], tuple]:
    """``(F(u), grad F(u), z(u))`` for the branch augmented-Lagrangian term."""
    return kernels.branch_eval(list(u), list(sub.adm), list(sub.xbar), list(sub.y),
                               list(sub.rho), sub.rate * sub.rate, sub.mu)


def solve_branch(sub: BranchSubproblem, tol: float = 1e-8, max_iter: int = 200) -> BranchResult:
    lo, hi = sub.box()
    start = [min(max(v, lo[i]), hi[i]) for i, v in enumerate(sub.start)]
    if not math.isfinite(branch_objective(sub, start)[0]):
        start = [0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1]), 0.0, 0.0]
        if not math.isfinite(branch_objective(sub, start)[0]):
            raise SolverFailure("non-finite branch objective at warm start", start=tuple(sub.start))
    u = np.array([start], dtype=float)
    z = np.zeros((1, 8))
    it = np.zeros(1, dtype=np.int64)
    st = np.zeros(1, dtype=np.int64)
    kernels.solve_branches(
        u, np.array([lo]), np.array([hi]), np.array([sub.adm], dtype=float),
        np.array([sub.xbar], dtype=float), np.array([sub.y], dtype=float),
        np.array([sub.rho], dtype=float), np.array([sub.rate * sub.rate]),
        float(sub.mu), float(tol), int(max_iter), z, it, st)
    uu = tuple(float(v) for v in u[0])
    return BranchResult(uu, tuple(float(v) for v in z[0]), int(it[0]), int(st[0]),
                        branch_objective(sub, uu)[0])


def polar_products(u) -> tuple[float, float]:
    """``(w^R, w^I)`` of the branch for ``u = (w_i, w_j, θ_i, θ_j)``."""
    s = math.sqrt(u[0] * u[1])
    return s * math.cos(u[2] - u[3]), s * math.sin(u[2] - u[3])


# ---------------------------------------------------------------------------
# buses


@dataclass
class BusSubproblem:
    """One bus block.

    ``coef_p``/``coef_q`` are each variable's coefficients in the real and
    reactive balance rows ``coef . v = demand``; ``xhat``, ``y`` and ``rho``
    are lists (one entry per coupling constraint) for every variable.
    """

    demand: tuple[float, float]
    coef_p: Sequence[float]
    coef_q: Sequence[float]
    xhat: Sequence[Sequence[float]]
    y: Sequence[Sequence[float]]
    rho: Sequence[Sequence[float]]
    fixed: Sequence[float | None] = ()


def solve_bus(sub: BusSubproblem) -> np.ndarray:
    """Exact minimizer of the bus consensus objective under both balances."""
    nv = len(sub.coef_p)
    a = np.asarray(sub.coef_p, dtype=float)
    b = np.asarray(sub.coef_q, dtype=float)
    rbar = np.array([float(sum(r)) for r in sub.rho])
    num = np.array([float(sum(r * x + yy for r, x, yy in zip(rs, xs, ys)))
                    for rs, xs, ys in zip(sub.rho, sub.xhat, sub.y)])
    fixed = list(sub.fixed) + [None] * (nv - len(sub.fixed))
    v = np.zeros(nv)
    active = np.zeros(nv, dtype=bool)
    for m in range(nv):
        if fixed[m] is not None:
            v[m] = fixed[m]
        elif rbar[m] > 0:
            v[m] = num[m] / rbar[m]
            active[m] = True
    return _balance_correct(v, a, b, rbar, active, *sub.demand)


def _balance_correct(v, a, b, rbar, active, pd, qd):
    inv = np.where(active, 1.0 / np.where(active, rbar, 1.0), 0.0)
    m11 = np.sum(a * a * inv)
    m12 = np.sum(a * b * inv)
    m22 = np.sum(b * b * inv)
    r1 = pd - np.dot(a, v)
    r2 = qd - np.dot(b, v)
    det = m11 * m22 - m12 * m12
    scale = max(m11 * m22, 1e-300)
    if not det > 1e-14 * scale:
        raise ModelError("bus balance system is singular (isolated bus?)")
    nu_p = (m22 * r1 - m12 * r2) / det
    nu_q = (m11 * r2 - m12 * r1) / det
    return v + (a * nu_p + b * nu_q) * inv


def solve_buses_batch(layout, x, y, rho, pd, qd, xbar_prev):
    """All bus blocks at once. Returns the new ``x̄``."""
    slots = layout.xbar_slot
    n_xbar = layout.n_xbar
    rbar = np.bincount(slots, weights=rho, minlength=n_xbar)
    num = np.bincount(slots, weights=rho * x + y, minlength=n_xbar)
    active = rbar > 0
    v = np.where(active, num / np.where(active, rbar, 1.0), xbar_prev)
    v[layout.theta_slot[layout.slack]] = 0.0
    active[layout.theta_slot] = False  # angles are absent from the balances

    a, b = layout.slot_a, layout.slot_b
    bus = layout.slot_bus
    nb = len(layout.w_slot)
    inv = np.where(active, 1.0 / np.where(active, rbar, 1.0), 0.0)
    m11 = np.bincount(bus, weights=a * a * inv, minlength=nb)
    m12 = np.bincount(bus, weights=a * b * inv, minlength=nb)
    m22 = np.bincount(bus, weights=b * b * inv, minlength=nb)
    r1 = pd - np.bincount(bus, weights=a * v, minlength=nb)
    r2 = qd - np.bincount(bus, weights=b * v, minlength=nb)
    det = m11 * m22 - m12 * m12
    bad = ~(det > 1e-14 * np.maximum(m11 * m22, 1e-300))
    if np.any(bad):
        raise ModelError(f"bus balance system is singular at bus index {int(np.argmax(bad))}")
    nu_p = (m22 * r1 - m12 * r2) / det
    nu_q = (m11 * r2 - m12 * r1) / det
    return v + (a * nu_p[bus] + b * nu_q[bus]) * inv


# ---------------------------------------------------------------------------
# generic trust-region Newton


@dataclass
class TrustRegionResult:
    x: np.ndarray
    fun: float
    iterations: int
    status: int
    projected_gradient: float
    converged: bool
    failed: bool


def trust_region_newton(f: Callable[[np.ndarray], float],
                        grad: Callable[[np.ndarray], np.ndarray],
                        lower, upper, u0, tol: float = 1e-8,
                        max_iter: int = 200) -> TrustRegionResult:
    """Minimize a smooth ``f`` over a box by trust-region Newton.

    The Hessian is approximated by central differences of ``grad``. The
    ``failed`` flag is set when the iteration cap is hit with a projected
    gradient above ``1e3 * tol``.
    """
    lo = [float(v) for v in lower]
    hi = [float(v) for v in upper]
    if not math.isfinite(f(np.clip(np.asarray(u0, dtype=float), lo, hi))):
        raise SolverFailure("objective is not finite at the starting point", start=tuple(u0))

    def fun(u):
        return float(f(np.asarray(u)))

    def gr(u):
        return [float(v) for v in grad(np.asarray(u))]

    u, fu, it, status, pgn = _tr.minimize(fun, gr, lo, hi, [float(v) for v in u0], tol, max_iter)
    return TrustRegionResult(
        x=np.array(u), fun=fu, iterations=it, status=status, projected_gradient=pgn,
        converged=pgn <= tol,
        failed=status == _tr.MAX_ITER and pgn > 1e3 * tol,
    )
