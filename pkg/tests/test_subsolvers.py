import math

import numpy as np
import pytest

from oracles import branch_flows, branch_objective as oracle_objective, bus_kkt, pi_admittances
from rladmm.netdata import compute_admittance
from rladmm.subsolvers import (BranchSubproblem, BusSubproblem, GenSubproblem, ModelError,
                               SolverFailure, branch_objective, polar_products, solve_branch,
                               solve_bus, solve_generator, trust_region_newton)

# --------------------------------------------------------------------------- generators


def test_generator_vertex():
    sub = GenSubproblem((1.0, 0.0), (0, 10, -1, 1), (1.0, 0.0), (0.0, 0.0), (2.0, 2.0))
    assert solve_generator(sub) == (0.5, 0.0)


def test_generator_clamps():
    sub = GenSubproblem((0.1, -50.0), (0, 1, -1, 1), (3.0, 5.0), (0.0, 0.0), (10.0, 10.0))
    assert solve_generator(sub) == (1, 1)


def test_generator_invalid_penalty():
    sub = GenSubproblem((0.0, 0.0), (0, 1, 0, 1), (0, 0), (0, 0), (0.0, 1.0))
    with pytest.raises(ValueError):
        solve_generator(sub)


def _grid_argmin(f, lo, hi, step=1e-6):
    g = np.linspace(lo, hi, int(round((hi - lo) / step)) + 1)
    return g[np.argmin(f(g))], g[1] - g[0]


def test_generator_grid_oracle():
    rng = np.random.default_rng(11)
    for _ in range(1000):
        c2, c1 = rng.uniform(0, 2000), rng.uniform(-500, 500)
        rp, rq = rng.uniform(100, 1000, 2)
        xb, y = rng.normal(size=2), rng.normal(scale=50, size=2)
        pmin, qmin = rng.normal(size=2)
        pmax, qmax = pmin + rng.uniform(1e-3, 0.02), qmin + rng.uniform(1e-3, 0.02)
        p, q = solve_generator(GenSubproblem((c2, c1), (pmin, pmax, qmin, qmax), tuple(xb),
                                             tuple(y), (rp, rq)))
        gp, hp = _grid_argmin(lambda v: c2 * v * v + c1 * v + y[0] * (v - xb[0])
                              + rp / 2 * (v - xb[0]) ** 2, pmin, pmax)
        gq, hq = _grid_argmin(lambda v: y[1] * (v - xb[1]) + rq / 2 * (v - xb[1]) ** 2, qmin, qmax)
        assert abs(p - gp) <= hp and abs(q - gq) <= hq


def test_generator_idempotent():
    sub = GenSubproblem((0.0, 0.0), (0, 2, -1, 1), (0.7, 0.3), (0.0, 0.0), (5.0, 5.0))
    p, q = solve_generator(sub)
    again = solve_generator(GenSubproblem((0.0, 0.0), (0, 2, -1, 1), (p, q), (0, 0), (5.0, 5.0)))
    assert again == (p, q)


# --------------------------------------------------------------------------- branches

CASE9_LINES = [(0.0, 0.0576, 0.0), (0.017, 0.092, 0.158), (0.039, 0.17, 0.358),
               (0.0, 0.0586, 0.0), (0.0119, 0.1008, 0.209), (0.0085, 0.072, 0.149),
               (0.0, 0.0625, 0.0), (0.032, 0.161, 0.306), (0.01, 0.085, 0.176)]
CASE9_RATES = [2.5, 2.5, 1.5, 3.0, 1.5, 2.5, 2.5, 2.5, 2.5]
VBOX = ((0.81, 1.21), (0.81, 1.21))


def random_branch(rng):
    k = int(rng.integers(len(CASE9_LINES)))
    r, x, bc = CASE9_LINES[k]
    u0 = [rng.uniform(0.85, 1.15), rng.uniform(0.85, 1.15), rng.uniform(-0.3, 0.3),
          rng.uniform(-0.3, 0.3)]
    xbar = list(rng.normal(scale=1.0, size=4)) + [rng.uniform(0.85, 1.15), rng.uniform(0.85, 1.15),
                                                  rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3)]
    y = list(rng.normal(scale=20.0, size=8))
    rho = list(rng.uniform(100, 1000, 4)) + list(rng.uniform(500, 70000, 4))
    sub = BranchSubproblem(compute_admittance(r, x, bc), CASE9_RATES[k], VBOX, xbar, y, rho, u0)
    return sub, pi_admittances(r, x, bc)


def projected_gradient(sub, u):
    lo, hi = sub.box()
    g = np.array(branch_objective(sub, u)[1])
    u = np.array(u)
    return float(np.linalg.norm(np.clip(u - g, lo, hi) - u))


def test_branch_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(100):
        sub, _ = random_branch(rng)
        u = np.array(sub.start)
        _, g, _ = branch_objective(sub, u)
        for i in range(4):
            # fourth-order central stencil: truncation and rounding both far below 1e-6
            h = 1e-4 * max(1.0, abs(u[i]))
            e = np.zeros(4)
            e[i] = h
            fv = [branch_objective(sub, u + k * e)[0] for k in (-2, -1, 1, 2)]
            fd = (fv[0] - 8 * fv[1] + 8 * fv[2] - fv[3]) / (12 * h)
            worst = max(worst, abs(fd - g[i]) / max(1.0, abs(g[i])))
    assert worst <= 1e-6


def test_branch_objective_matches_complex_oracle():
    rng = np.random.default_rng(4)
    for _ in range(50):
        sub, Y = random_branch(rng)
        f, _, z = branch_objective(sub, sub.start)
        ref = oracle_objective(sub.start, Y, sub.xbar, sub.y, sub.rho, sub.rate, sub.mu)
        assert f == pytest.approx(float(ref), rel=1e-12)
        np.testing.assert_allclose(z[:4], branch_flows(sub.start, Y), rtol=1e-12, atol=1e-12)


def test_polar_identity():
    rng = np.random.default_rng(5)
    for _ in range(1000):
        u = (rng.uniform(0.81, 1.21), rng.uniform(0.81, 1.21), rng.uniform(-6, 6), rng.uniform(-6, 6))
        wr, wi = polar_products(u)
        assert abs(wr * wr + wi * wi - u[0] * u[1]) <= 4 * np.finfo(float).eps


def test_branch_warm_start_already_optimal():
    adm = compute_admittance(0.01, 0.085, 0.176)
    u0 = (1.0, 0.98, 0.05, -0.02)
    sub = BranchSubproblem(adm, 2.5, VBOX, [0.0] * 8, [0.0] * 8, [400] * 4 + [4e4] * 4, u0)
    z = branch_objective(sub, u0)[2]
    sub.xbar = list(z)
    res = solve_branch(sub)
    np.testing.assert_allclose(res.u, u0, atol=1e-12)
    assert res.objective == pytest.approx(0.0, abs=1e-20)


def test_branch_penalty_dominance():
    adm = compute_admittance(0.01, 0.085, 0.176)
    target = [1.03, 0.95, 0.1, -0.1]
    sub = BranchSubproblem(adm, 0.0, VBOX, [0.3, -0.1, 0.2, 0.4] + target, [0.0] * 8,
                           [1.0] * 4 + [1e6] * 4, (1.0, 1.0, 0.0, 0.0))
    res = solve_branch(sub)
    assert np.linalg.norm(np.array(res.u) - target) <= 1e-4


def _grid_minimum(sub, Y, n=21):
    lo, hi = sub.box()
    axes = [np.linspace(a, b, n) for a, b in zip(lo, hi)]
    wi, wj, ti = np.meshgrid(axes[0], axes[1], axes[2], indexing="ij")
    best = math.inf
    for tj in axes[3]:
        v = oracle_objective((wi, wj, ti, np.full_like(wi, tj)), Y, sub.xbar, sub.y, sub.rho,
                             sub.rate, sub.mu)
        best = min(best, float(v.min()))
    return best


def test_branch_random_instances_stationary_and_beat_grid():
    rng = np.random.default_rng(2024)
    for _ in range(200):
        sub, Y = random_branch(rng)
        f0 = branch_objective(sub, sub.start)[0]
        res = solve_branch(sub)
        assert res.objective <= f0
        assert projected_gradient(sub, res.u) <= 1e-8
        assert res.objective <= _grid_minimum(sub, Y) + 1e-9 * max(1.0, abs(res.objective))


def test_branch_warm_start_clamped():
    adm = compute_admittance(0.01, 0.085, 0.176)
    sub = BranchSubproblem(adm, 2.5, VBOX, [0.0] * 4 + [1, 1, 0, 0], [0.0] * 8,
                           [400] * 4 + [4e4] * 4, (5.0, -1.0, 9.0, 0.0))
    res = solve_branch(sub)
    lo, hi = sub.box()
    assert all(l <= v <= h for v, l, h in zip(res.u, lo, hi))


def test_branch_non_finite_raises():
    adm = compute_admittance(0.01, 0.085, 0.176)
    sub = BranchSubproblem(adm, 2.5, VBOX, [math.nan] * 8, [0.0] * 8, [400] * 8, (1, 1, 0, 0))
    with pytest.raises(SolverFailure) as err:
        solve_branch(sub)
    assert err.value.start == (1, 1, 0, 0)


# --------------------------------------------------------------------------- buses


def _random_bus(rng):
    n_gen, n_flow = int(rng.integers(0, 3)), int(rng.integers(1, 5))
    gs, bs = rng.normal(scale=0.05, size=2)
    coef_p = [-gs, 0.0] + [1.0, 0.0] * n_gen + [-1.0, 0.0] * n_flow
    coef_q = [bs, 0.0] + [0.0, 1.0] * n_gen + [0.0, -1.0] * n_flow
    nv = len(coef_p)
    counts = [int(rng.integers(1, 4)), int(rng.integers(1, 4))] + [1] * (nv - 2)
    xhat = [list(rng.normal(size=c)) for c in counts]
    y = [list(rng.normal(scale=10, size=c)) for c in counts]
    rho = [list(rng.uniform(100, 40000, size=c)) for c in counts]
    slack = bool(rng.random() < 0.3)
    return BusSubproblem(tuple(rng.normal(size=2)), coef_p, coef_q, xhat, y, rho,
                         fixed=[None, 0.0] if slack else [])


def test_bus_dense_kkt_oracle():
    rng = np.random.default_rng(8)
    for _ in range(500):
        sub = _random_bus(rng)
        v = solve_bus(sub)
        a, b = np.array(sub.coef_p), np.array(sub.coef_q)
        rbar = np.array([sum(r) for r in sub.rho])
        num = np.array([sum(r * x + yy for r, x, yy in zip(rs, xs, ys))
                        for rs, xs, ys in zip(sub.rho, sub.xhat, sub.y)])
        mask = np.zeros(len(a), bool)
        val = np.zeros(len(a))
        if sub.fixed:
            mask[1] = True
        ref = bus_kkt(a, b, rbar, num, mask, val, *sub.demand)
        np.testing.assert_allclose(v, ref, rtol=0, atol=1e-9)
        assert abs(a @ v - sub.demand[0]) <= 1e-10
        assert abs(b @ v - sub.demand[1]) <= 1e-10


def test_bus_already_balanced():
    sub = BusSubproblem((0.5, 0.2), [0, 0, 1, 0, -1, 0], [0, 0, 0, 1, 0, -1],
                        [[1.0], [0.0], [0.8], [0.3], [0.3], [0.1]], [[0.0]] * 6,
                        [[100.0]] * 6)
    v = solve_bus(sub)
    np.testing.assert_allclose(v, [1.0, 0.0, 0.8, 0.3, 0.3, 0.1], atol=1e-15)


def test_bus_shift_proportional_to_inverse_rho():
    # one generator (rho 100) and one flow (rho 300); demand unmet by delta
    sub = BusSubproblem((0.1, 0.0), [0, 0, 1, 0, -1, 0], [0, 0, 0, 1, 0, -1],
                        [[1.0], [0.0], [0.5], [0.0], [0.5], [0.0]], [[0.0]] * 6,
                        [[1.0], [1.0], [100.0], [1.0], [300.0], [1.0]])
    v = solve_bus(sub)
    dg, df = v[2] - 0.5, v[4] - 0.5
    assert dg - df == pytest.approx(0.1, abs=1e-12)
    assert dg / df == pytest.approx(-3.0, rel=1e-12)


def test_bus_isolated_is_singular():
    sub = BusSubproblem((0.1, 0.1), [0, 0], [0, 0], [[1.0], [0.0]], [[0.0], [0.0]],
                        [[1.0], [1.0]])
    with pytest.raises(ModelError):
        solve_bus(sub)


# --------------------------------------------------------------------------- trust region


def _quad(c):
    c = np.asarray(c, float)
    return (lambda u: float(np.sum((u - c) ** 2))), (lambda u: 2 * (u - c))


def test_tr_quadratic_interior():
    f, g = _quad([0.3, -0.2, 0.5, 0.1])
    res = trust_region_newton(f, g, [-1] * 4, [1] * 4, [0.9, 0.9, -0.9, 0.0])
    np.testing.assert_allclose(res.x, [0.3, -0.2, 0.5, 0.1], atol=1e-8)
    assert res.iterations <= 3 and res.converged


def test_tr_quadratic_outside_box():
    f, g = _quad([3.0, -0.2, -5.0, 0.1])
    res = trust_region_newton(f, g, [-1] * 4, [1] * 4, [0.0] * 4)
    np.testing.assert_allclose(res.x, [1.0, -0.2, -1.0, 0.1], atol=1e-8)


def rosen(u):
    return float(sum(100 * (u[i + 1] - u[i] ** 2) ** 2 + (1 - u[i]) ** 2 for i in range(3)))


def rosen_grad(u):
    g = np.zeros(4)
    for i in range(3):
        g[i] += -400 * u[i] * (u[i + 1] - u[i] ** 2) - 2 * (1 - u[i])
        g[i + 1] += 200 * (u[i + 1] - u[i] ** 2)
    return g


def test_tr_rosenbrock_4d():
    seen = []
    res = trust_region_newton(lambda u: seen.append(rosen(u)) or seen[-1], rosen_grad,
                              [-2] * 4, [2] * 4, [-1.2, 1, -1.2, 1])
    assert res.fun <= 1e-10
    np.testing.assert_allclose(res.x, np.ones(4), atol=1e-5)


def test_tr_not_finite_at_start():
    with pytest.raises(SolverFailure):
        trust_region_newton(lambda u: math.nan, lambda u: np.zeros(4), [-1] * 4, [1] * 4, [0] * 4)


def test_tr_failure_flag_on_iteration_cap():
    res = trust_region_newton(rosen, rosen_grad, [-2] * 4, [2] * 4, [-1.2, 1, -1.2, 1], max_iter=2)
    assert res.failed and not res.converged
