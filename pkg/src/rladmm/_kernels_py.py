"""Pure-Python branch kernel; the fallback for the compiled ``_kernels``.

Both implementations expose the same three functions:

``branch_eval(u, adm, target, y, rho, rate2, mu)``
    objective, gradient and consensus quantities of one branch.
``solve_branches(u, lo, hi, adm, target, y, rho, rate2, mu, tol, max_iter,
z_out, iters_out, status_out)``
    solve every branch in place (``u`` is the warm start and receives the
    solution).
``norm2(v)``
    Euclidean norm by sequential summation in index order.
"""

from __future__ import annotations

import math

import numpy as np

from . import _tr

BACKEND = "python"


def _flows(wi, wj, ti, tj, adm):
    gii, bii, gij, bij, gji, bji, gjj, bjj = adm
    s = math.sqrt(wi * wj)
    c = math.cos(ti - tj)
    sn = math.sin(ti - tj)
    wr = s * c
    wim = s * sn
    return (gii * wi + gij * wr + bij * wim,
            -bii * wi - bij * wr + gij * wim,
            gjj * wj + gji * wr - bji * wim,
            -bjj * wj - bji * wr - gji * wim,
            wi, wj, ti, tj), (s, c, sn, wr, wim)


def branch_eval(u, adm, target, y, rho, rate2, mu):
    """Return ``(f, grad, z)`` of the branch augmented-Lagrangian objective."""
    wi, wj, ti, tj = u
    gii, bii, gij, bij, gji, bji, gjj, bjj = adm
    z, (s, c, sn, wr, wim) = _flows(wi, wj, ti, tj, adm)
    hi_ = 0.5 * math.sqrt(wj / wi)
    hj_ = 0.5 * math.sqrt(wi / wj)
    dwr = (hi_ * c, hj_ * c, -wim, wim)
    dwi = (hi_ * sn, hj_ * sn, wr, -wr)
    jac = (
        (gii + gij * dwr[0] + bij * dwi[0], gij * dwr[1] + bij * dwi[1],
         gij * dwr[2] + bij * dwi[2], gij * dwr[3] + bij * dwi[3]),
        (-bii - bij * dwr[0] + gij * dwi[0], -bij * dwr[1] + gij * dwi[1],
         -bij * dwr[2] + gij * dwi[2], -bij * dwr[3] + gij * dwi[3]),
        (gji * dwr[0] - bji * dwi[0], gjj + gji * dwr[1] - bji * dwi[1],
         gji * dwr[2] - bji * dwi[2], gji * dwr[3] - bji * dwi[3]),
        (-bji * dwr[0] - gji * dwi[0], -bjj - bji * dwr[1] - gji * dwi[1],
         -bji * dwr[2] - gji * dwi[2], -bji * dwr[3] - gji * dwi[3]),
    )
    f = 0.0
    g = [0.0, 0.0, 0.0, 0.0]
    for m in range(8):
        r = z[m] - target[m]
        f += y[m] * r + 0.5 * rho[m] * r * r
        coef = y[m] + rho[m] * r
        if m < 4:
            row = jac[m]
            g[0] += coef * row[0]
            g[1] += coef * row[1]
            g[2] += coef * row[2]
            g[3] += coef * row[3]
        else:
            g[m - 4] += coef
    if rate2 > 0.0:
        for a, b in ((0, 1), (2, 3)):
            viol = z[a] * z[a] + z[b] * z[b] - rate2
            if viol > 0.0:
                f += mu * viol * viol
                k = 4.0 * mu * viol
                ra, rb = jac[a], jac[b]
                for i in range(4):
                    g[i] += k * (z[a] * ra[i] + z[b] * rb[i])
    return f, g, z


def solve_one(u0, lo, hi, adm, target, y, rho, rate2, mu, tol, max_iter):
    def fun(u):
        return branch_eval(u, adm, target, y, rho, rate2, mu)[0]

    def grad(u):
        return branch_eval(u, adm, target, y, rho, rate2, mu)[1]

    u, f, it, status, pgn = _tr.minimize(fun, grad, lo, hi, u0, tol, max_iter)
    z = _flows(u[0], u[1], u[2], u[3], adm)[0]
    return u, z, it, status


def solve_branches(u, lo, hi, adm, target, y, rho, rate2, mu, tol, max_iter,
                   z_out, iters_out, status_out):
    ul, lol, hil = u.tolist(), lo.tolist(), hi.tolist()
    al, tl, yl, rl, r2 = adm.tolist(), target.tolist(), y.tolist(), rho.tolist(), rate2.tolist()
    for k in range(len(ul)):
        uk, zk, it, st = solve_one(ul[k], lol[k], hil[k], al[k], tl[k], yl[k], rl[k],
                                   r2[k], mu, tol, max_iter)
        u[k] = uk
        z_out[k] = zk
        iters_out[k] = it
        status_out[k] = st


def norm2(v) -> float:
    s = 0.0
    for x in np.asarray(v, dtype=float).tolist():
        s += x * x
    return math.sqrt(s)
