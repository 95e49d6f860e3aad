"""Bound-constrained trust-region Newton on plain Python floats.

Small dense problems only (the branch kernel is 4-dimensional). The
Hessian is built from central differences of the analytic gradient; each
trial step is the better, in model terms, of the projected trust-region
Newton step on the free variables and the projected Cauchy step.
"""

from __future__ import annotations

import math

CONVERGED = 0
RADIUS_COLLAPSE = 1
MAX_ITER = 2

_ETA = 1e-4
_FD_REL = 1e-6
_MIN_RADIUS = 1e-12
_NOISE = 1e-12  # relative rounding floor of f (terms can cancel by ~100x)


def _clip(v, lo, hi):
    return lo if v < lo else (hi if v > hi else v)


def projected_gradient_norm(u, g, lo, hi) -> float:
    s = 0.0
    for i in range(len(u)):
        d = u[i] - _clip(u[i] - g[i], lo[i], hi[i])
        s += d * d
    return math.sqrt(s)


def jacobi_eigh(a):
    """Eigen-decomposition of a small symmetric matrix (cyclic Jacobi).

    Returns ``(evals, evecs)`` with eigenvectors stored as columns.
    """
    n = len(a)
    a = [row[:] for row in a]
    v = [[1.0 if i == j else 0.0 for j in range(n)] for i in range(n)]
    for _ in range(50):
        off = 0.0
        scale = 0.0
        for i in range(n):
            scale += a[i][i] * a[i][i]
            for j in range(i + 1, n):
                off += a[i][j] * a[i][j]
        if off <= 1e-30 * scale or off == 0.0:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p][q]
                if apq == 0.0:
                    continue
                theta = (a[q][q] - a[p][p]) / (2.0 * apq)
                t = (1.0 if theta >= 0 else -1.0) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                for k in range(n):
                    akp, akq = a[k][p], a[k][q]
                    a[k][p] = c * akp - s * akq
                    a[k][q] = s * akp + c * akq
                for k in range(n):
                    apk, aqk = a[p][k], a[q][k]
                    a[p][k] = c * apk - s * aqk
                    a[q][k] = s * apk + c * aqk
                for k in range(n):
                    vkp, vkq = v[k][p], v[k][q]
                    v[k][p] = c * vkp - s * vkq
                    v[k][q] = s * vkp + c * vkq
    return [a[i][i] for i in range(n)], v


def trust_region_step(h, g, delta):
    """Approximate minimizer of ``g.d + d.H.d/2`` over ``|d| <= delta``."""
    m = len(g)
    lam, q = jacobi_eigh(h)
    gt = [sum(q[k][i] * g[k] for k in range(m)) for i in range(m)]
    lmin = min(lam)
    imin = lam.index(lmin)

    def coords(shift):
        return [-gt[i] / (lam[i] + shift) if lam[i] + shift != 0.0 else 0.0 for i in range(m)]

    def to_full(c):
        return [sum(q[k][i] * c[i] for i in range(m)) for k in range(m)]

    if lmin > 0:
        c = coords(0.0)
        if math.sqrt(sum(x * x for x in c)) <= delta:
            return to_full(c)
    floor = max(0.0, -lmin)
    shift = floor + 1e-12 * max(1.0, abs(lmin))
    c = coords(shift)
    cn = math.sqrt(sum(x * x for x in c))
    if cn <= delta:
        # hard case: walk along the lowest-curvature direction to the boundary
        tau = math.sqrt(max(delta * delta - cn * cn, 0.0))
        c[imin] += tau if gt[imin] <= 0 else -tau
        return to_full(c)
    for _ in range(60):
        c = coords(shift)
        cn = math.sqrt(sum(x * x for x in c))
        if abs(cn - delta) <= 1e-6 * delta:
            break
        dphi = sum(c[i] * c[i] / (lam[i] + shift) for i in range(m))
        if dphi <= 0:
            break
        step = (cn - delta) / delta * (cn * cn / dphi)
        shift = max(shift + step, floor + 0.5 * (shift - floor))
    return to_full(c)


def fd_hessian(grad, u, g):
    n = len(u)
    h = [[0.0] * n for _ in range(n)]
    for j in range(n):
        step = _FD_REL * max(1.0, abs(u[j]))
        up = list(u)
        dn = list(u)
        up[j] += step
        dn[j] -= step
        gp = grad(up)
        gm = grad(dn)
        for i in range(n):
            h[i][j] = (gp[i] - gm[i]) / (2.0 * step)
    for i in range(n):
        for j in range(i + 1, n):
            avg = 0.5 * (h[i][j] + h[j][i])
            h[i][j] = h[j][i] = avg
    return h


def _quad(h, s):
    n = len(s)
    quad = 0.0
    for i in range(n):
        hs = 0.0
        for j in range(n):
            hs += h[i][j] * s[j]
        quad += s[i] * hs
    return quad


def _model(g, h, s):
    return sum(g[i] * s[i] for i in range(len(s))) + 0.5 * _quad(h, s)


def minimize(fun, grad, lo, hi, u0, tol=1e-8, max_iter=200, delta0=1.0):
    """Run the trust-region iteration.

    Returns ``(u, f, iterations, status, projected_gradient_norm)``; ``status``
    is one of ``CONVERGED``, ``RADIUS_COLLAPSE``, ``MAX_ITER``.
    """
    n = len(u0)
    u = [_clip(u0[i], lo[i], hi[i]) for i in range(n)]
    fu = fun(u)
    g = grad(u)
    delta = delta0
    it = 0
    status = MAX_ITER
    pgn = projected_gradient_norm(u, g, lo, hi)
    while True:
        if pgn <= tol:
            status = CONVERGED
            break
        if delta < _MIN_RADIUS:
            status = RADIUS_COLLAPSE
            break
        if it >= max_iter:
            break
        it += 1
        h = fd_hessian(grad, u, g)
        free = [i for i in range(n)
                if not ((u[i] <= lo[i] and g[i] > 0) or (u[i] >= hi[i] and g[i] < 0))]
        s = [0.0] * n
        if free:
            hf = [[h[i][j] for j in free] for i in free]
            d = trust_region_step(hf, [g[i] for i in free], delta)
            for k, i in enumerate(free):
                s[i] = _clip(u[i] + d[k], lo[i], hi[i]) - u[i]
        pred = -_model(g, h, s)

        # projected Cauchy step along -g on the free variables
        p = [(-g[i] if i in free else 0.0) for i in range(n)]
        pn = math.sqrt(sum(x * x for x in p))
        if pn > 0:
            t = delta / pn
            for i in range(n):
                if p[i] > 0:
                    t = min(t, (hi[i] - u[i]) / p[i])
                elif p[i] < 0:
                    t = min(t, (lo[i] - u[i]) / p[i])
            kappa = _quad(h, p)
            if kappa > 0:
                t = min(t, pn * pn / kappa)
            sc = [t * x for x in p]
            predc = -_model(g, h, sc)
            if predc > pred:
                s, pred = sc, predc
        snorm = math.sqrt(sum(x * x for x in s))
        if pred <= 0 or snorm == 0.0:
            delta = 0.25 * (snorm if snorm > 0 else delta)
            continue
        un = [u[i] + s[i] for i in range(n)]
        fn = fun(un)
        if not math.isfinite(fn):
            delta = 0.25 * snorm
            continue
        ratio = (fu - fn) / pred
        # below this the ratio test is dominated by rounding in f; fall back
        # to requiring a smaller projected gradient
        noise = _NOISE * max(1.0, abs(fu))
        tiny = pred <= 100.0 * noise
        if (fn <= fu and ratio >= _ETA) or (tiny and fn <= fu + noise):
            gn = grad(un)
            pgn_new = projected_gradient_norm(un, gn, lo, hi)
            if not (fn <= fu and ratio >= _ETA) and pgn_new >= pgn:
                delta = 0.25 * snorm
                continue
            u, fu, g, pgn = un, fn, gn, pgn_new
            if ratio > 0.75 and snorm >= 0.99 * delta:
                delta *= 2.0
            elif ratio < 0.25:
                delta = 0.25 * snorm
        else:
            delta = 0.25 * snorm
    return u, fu, it, status, pgn
