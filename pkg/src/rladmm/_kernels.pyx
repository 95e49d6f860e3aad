# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled branch kernel. Mirrors ``_kernels_py`` and ``_tr`` step for step."""

from libc.math cimport sqrt, sin, cos, fabs, isfinite
import numpy as np
cimport numpy as cnp

BACKEND = "cython"

cdef double ETA = 1e-4
cdef double FD_REL = 1e-6
cdef double MIN_RADIUS = 1e-12
cdef double NOISE = 1e-12


cdef struct Params:
    double adm[8]
    double target[8]
    double y[8]
    double rho[8]
    double rate2
    double mu


cdef inline double clip(double v, double lo, double hi) nogil:
    if v < lo:
        return lo
    if v > hi:
        return hi
    return v


cdef void flows(const double* u, const double* adm, double* z) nogil:
    cdef double s = sqrt(u[0] * u[1])
    cdef double c = cos(u[2] - u[3])
    cdef double sn = sin(u[2] - u[3])
    cdef double wr = s * c
    cdef double wim = s * sn
    z[0] = adm[0] * u[0] + adm[2] * wr + adm[3] * wim
    z[1] = -adm[1] * u[0] - adm[3] * wr + adm[2] * wim
    z[2] = adm[6] * u[1] + adm[4] * wr - adm[5] * wim
    z[3] = -adm[7] * u[1] - adm[5] * wr - adm[4] * wim
    z[4] = u[0]
    z[5] = u[1]
    z[6] = u[2]
    z[7] = u[3]


cdef double evaluate(const double* u, Params* P, double* g, bint want_grad) nogil:
    cdef double gii = P.adm[0], bii = P.adm[1], gij = P.adm[2], bij = P.adm[3]
    cdef double gji = P.adm[4], bji = P.adm[5], gjj = P.adm[6], bjj = P.adm[7]
    cdef double z[8]
    cdef double jac[4][4]
    cdef double dwr[4]
    cdef double dwi[4]
    cdef double s = sqrt(u[0] * u[1])
    cdef double c = cos(u[2] - u[3])
    cdef double sn = sin(u[2] - u[3])
    cdef double wr = s * c
    cdef double wim = s * sn
    cdef double hi_ = 0.5 * sqrt(u[1] / u[0])
    cdef double hj_ = 0.5 * sqrt(u[0] / u[1])
    cdef double f = 0.0, r, coef, viol, k
    cdef int m, i, a, b
    z[0] = gii * u[0] + gij * wr + bij * wim
    z[1] = -bii * u[0] - bij * wr + gij * wim
    z[2] = gjj * u[1] + gji * wr - bji * wim
    z[3] = -bjj * u[1] - bji * wr - gji * wim
    z[4] = u[0]
    z[5] = u[1]
    z[6] = u[2]
    z[7] = u[3]
    dwr[0] = hi_ * c
    dwr[1] = hj_ * c
    dwr[2] = -wim
    dwr[3] = wim
    dwi[0] = hi_ * sn
    dwi[1] = hj_ * sn
    dwi[2] = wr
    dwi[3] = -wr
    jac[0][0] = gii + gij * dwr[0] + bij * dwi[0]
    jac[1][0] = -bii - bij * dwr[0] + gij * dwi[0]
    jac[2][0] = gji * dwr[0] - bji * dwi[0]
    jac[3][0] = -bji * dwr[0] - gji * dwi[0]
    jac[0][1] = gij * dwr[1] + bij * dwi[1]
    jac[1][1] = -bij * dwr[1] + gij * dwi[1]
    jac[2][1] = gjj + gji * dwr[1] - bji * dwi[1]
    jac[3][1] = -bjj - bji * dwr[1] - gji * dwi[1]
    for i in range(2, 4):
        jac[0][i] = gij * dwr[i] + bij * dwi[i]
        jac[1][i] = -bij * dwr[i] + gij * dwi[i]
        jac[2][i] = gji * dwr[i] - bji * dwi[i]
        jac[3][i] = -bji * dwr[i] - gji * dwi[i]
    if want_grad:
        g[0] = 0.0
        g[1] = 0.0
        g[2] = 0.0
        g[3] = 0.0
    for m in range(8):
        r = z[m] - P.target[m]
        f += P.y[m] * r + 0.5 * P.rho[m] * r * r
        if want_grad:
            coef = P.y[m] + P.rho[m] * r
            if m < 4:
                g[0] += coef * jac[m][0]
                g[1] += coef * jac[m][1]
                g[2] += coef * jac[m][2]
                g[3] += coef * jac[m][3]
            else:
                g[m - 4] += coef
    if P.rate2 > 0.0:
        for a in range(0, 4, 2):
            b = a + 1
            viol = z[a] * z[a] + z[b] * z[b] - P.rate2
            if viol > 0.0:
                f += P.mu * viol * viol
                if want_grad:
                    k = 4.0 * P.mu * viol
                    for i in range(4):
                        g[i] += k * (z[a] * jac[a][i] + z[b] * jac[b][i])
    return f


cdef double pg_norm(const double* u, const double* g, const double* lo, const double* hi) nogil:
    cdef double s = 0.0, d
    cdef int i
    for i in range(4):
        d = u[i] - clip(u[i] - g[i], lo[i], hi[i])
        s += d * d
    return sqrt(s)


cdef void jacobi(int n, double a[4][4], double* lam, double v[4][4]) nogil:
    cdef int sweep, i, j, p, q, k
    cdef double off, scale, apq, theta, t, c, s, x1, x2
    for i in range(n):
        for j in range(n):
            v[i][j] = 1.0 if i == j else 0.0
    for sweep in range(50):
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
                t = (1.0 if theta >= 0 else -1.0) / (fabs(theta) + sqrt(theta * theta + 1.0))
                c = 1.0 / sqrt(t * t + 1.0)
                s = t * c
                for k in range(n):
                    x1 = a[k][p]
                    x2 = a[k][q]
                    a[k][p] = c * x1 - s * x2
                    a[k][q] = s * x1 + c * x2
                for k in range(n):
                    x1 = a[p][k]
                    x2 = a[q][k]
                    a[p][k] = c * x1 - s * x2
                    a[q][k] = s * x1 + c * x2
                for k in range(n):
                    x1 = v[k][p]
                    x2 = v[k][q]
                    v[k][p] = c * x1 - s * x2
                    v[k][q] = s * x1 + c * x2
    for i in range(n):
        lam[i] = a[i][i]


cdef double coord_norm(int m, const double* lam, const double* gt, double shift, double* c) nogil:
    cdef double s = 0.0
    cdef int i
    for i in range(m):
        if lam[i] + shift != 0.0:
            c[i] = -gt[i] / (lam[i] + shift)
        else:
            c[i] = 0.0
        s += c[i] * c[i]
    return sqrt(s)


cdef void tr_step(int m, double h[4][4], const double* g, double delta, double* d) nogil:
    cdef double lam[4]
    cdef double q[4][4]
    cdef double gt[4]
    cdef double c[4]
    cdef double lmin, floor, shift, cn, tau, dphi, step, acc
    cdef int i, k, imin = 0, it
    cdef bint done = False
    jacobi(m, h, lam, q)
    for i in range(m):
        acc = 0.0
        for k in range(m):
            acc += q[k][i] * g[k]
        gt[i] = acc
    lmin = lam[0]
    for i in range(1, m):
        if lam[i] < lmin:
            lmin = lam[i]
            imin = i
    if lmin > 0:
        cn = coord_norm(m, lam, gt, 0.0, c)
        if cn <= delta:
            done = True
    if not done:
        floor = -lmin if lmin < 0 else 0.0
        shift = floor + 1e-12 * (fabs(lmin) if fabs(lmin) > 1.0 else 1.0)
        cn = coord_norm(m, lam, gt, shift, c)
        if cn <= delta:
            tau = sqrt(delta * delta - cn * cn) if delta * delta > cn * cn else 0.0
            if gt[imin] <= 0:
                c[imin] += tau
            else:
                c[imin] -= tau
        else:
            for it in range(60):
                cn = coord_norm(m, lam, gt, shift, c)
                if fabs(cn - delta) <= 1e-6 * delta:
                    break
                dphi = 0.0
                for i in range(m):
                    dphi += c[i] * c[i] / (lam[i] + shift)
                if dphi <= 0:
                    break
                step = (cn - delta) / delta * (cn * cn / dphi)
                if shift + step > floor + 0.5 * (shift - floor):
                    shift = shift + step
                else:
                    shift = floor + 0.5 * (shift - floor)
    for k in range(m):
        acc = 0.0
        for i in range(m):
            acc += q[k][i] * c[i]
        d[k] = acc


cdef double quad(double h[4][4], const double* s) nogil:
    cdef double total = 0.0, hs
    cdef int i, j
    for i in range(4):
        hs = 0.0
        for j in range(4):
            hs += h[i][j] * s[j]
        total += s[i] * hs
    return total


cdef double model(const double* g, double h[4][4], const double* s) nogil:
    cdef double lin = 0.0
    cdef int i
    for i in range(4):
        lin += g[i] * s[i]
    return lin + 0.5 * quad(h, s)


cdef int minimize(double* u, const double* lo, const double* hi, Params* P,
                  double tol, int max_iter, int* iters) nogil:
    cdef double g[4]
    cdef double gp[4]
    cdef double gm[4]
    cdef double gn[4]
    cdef double h[4][4]
    cdef double hf[4][4]
    cdef double gf[4]
    cdef double d[4]
    cdef double s[4]
    cdef double sc[4]
    cdef double p[4]
    cdef double un[4]
    cdef double up[4]
    cdef int free_idx[4]
    cdef double fu, fn, delta = 1.0, pgn, pgn_new, pred, predc, pn, t, kappa
    cdef double snorm, ratio, step, avg, noise
    cdef int i, j, nf, it = 0, status = 2
    cdef bint tiny, good
    for i in range(4):
        u[i] = clip(u[i], lo[i], hi[i])
    fu = evaluate(u, P, g, True)
    pgn = pg_norm(u, g, lo, hi)
    while True:
        if pgn <= tol:
            status = 0
            break
        if delta < MIN_RADIUS:
            status = 1
            break
        if it >= max_iter:
            break
        it += 1
        for j in range(4):
            step = FD_REL * (fabs(u[j]) if fabs(u[j]) > 1.0 else 1.0)
            for i in range(4):
                up[i] = u[i]
            up[j] = u[j] + step
            evaluate(up, P, gp, True)
            up[j] = u[j] - step
            evaluate(up, P, gm, True)
            for i in range(4):
                h[i][j] = (gp[i] - gm[i]) / (2.0 * step)
        for i in range(4):
            for j in range(i + 1, 4):
                avg = 0.5 * (h[i][j] + h[j][i])
                h[i][j] = avg
                h[j][i] = avg
        nf = 0
        for i in range(4):
            if not ((u[i] <= lo[i] and g[i] > 0) or (u[i] >= hi[i] and g[i] < 0)):
                free_idx[nf] = i
                nf += 1
        for i in range(4):
            s[i] = 0.0
            p[i] = 0.0
        if nf > 0:
            for i in range(nf):
                gf[i] = g[free_idx[i]]
                for j in range(nf):
                    hf[i][j] = h[free_idx[i]][free_idx[j]]
            tr_step(nf, hf, gf, delta, d)
            for i in range(nf):
                j = free_idx[i]
                s[j] = clip(u[j] + d[i], lo[j], hi[j]) - u[j]
                p[j] = -g[j]
        pred = -model(g, h, s)
        pn = 0.0
        for i in range(4):
            pn += p[i] * p[i]
        pn = sqrt(pn)
        if pn > 0:
            t = delta / pn
            for i in range(4):
                if p[i] > 0:
                    if (hi[i] - u[i]) / p[i] < t:
                        t = (hi[i] - u[i]) / p[i]
                elif p[i] < 0:
                    if (lo[i] - u[i]) / p[i] < t:
                        t = (lo[i] - u[i]) / p[i]
            kappa = quad(h, p)
            if kappa > 0:
                if pn * pn / kappa < t:
                    t = pn * pn / kappa
            for i in range(4):
                sc[i] = t * p[i]
            predc = -model(g, h, sc)
            if predc > pred:
                for i in range(4):
                    s[i] = sc[i]
                pred = predc
        snorm = 0.0
        for i in range(4):
            snorm += s[i] * s[i]
        snorm = sqrt(snorm)
        if pred <= 0 or snorm == 0.0:
            delta = 0.25 * (snorm if snorm > 0 else delta)
            continue
        for i in range(4):
            un[i] = u[i] + s[i]
        fn = evaluate(un, P, gn, False)
        if not isfinite(fn):
            delta = 0.25 * snorm
            continue
        ratio = (fu - fn) / pred
        noise = NOISE * (fabs(fu) if fabs(fu) > 1.0 else 1.0)
        tiny = pred <= 100.0 * noise
        good = fn <= fu and ratio >= ETA
        if good or (tiny and fn <= fu + noise):
            evaluate(un, P, gn, True)
            pgn_new = pg_norm(un, gn, lo, hi)
            if not good and pgn_new >= pgn:
                delta = 0.25 * snorm
                continue
            for i in range(4):
                u[i] = un[i]
                g[i] = gn[i]
            fu = fn
            pgn = pgn_new
            if ratio > 0.75 and snorm >= 0.99 * delta:
                delta *= 2.0
            elif ratio < 0.25:
                delta = 0.25 * snorm
        else:
            delta = 0.25 * snorm
    iters[0] = it
    return status


def branch_eval(u, adm, target, y, rho, double rate2, double mu):
    cdef Params P
    cdef double uu[4]
    cdef double g[4]
    cdef double z[8]
    cdef int i
    for i in range(8):
        P.adm[i] = adm[i]
        P.target[i] = target[i]
        P.y[i] = y[i]
        P.rho[i] = rho[i]
    P.rate2 = rate2
    P.mu = mu
    for i in range(4):
        uu[i] = u[i]
    f = evaluate(uu, &P, g, True)
    flows(uu, P.adm, z)
    return f, [g[i] for i in range(4)], tuple(z[i] for i in range(8))


def solve_branches(double[:, ::1] u, const double[:, ::1] lo, const double[:, ::1] hi,
                   const double[:, ::1] adm, const double[:, ::1] target,
                   const double[:, ::1] y, const double[:, ::1] rho,
                   const double[::1] rate2, double mu, double tol, int max_iter,
                   double[:, ::1] z_out, cnp.int64_t[::1] iters_out,
                   cnp.int64_t[::1] status_out):
    cdef Py_ssize_t k, n = u.shape[0]
    cdef int i, it
    cdef Params P
    with nogil:
        for k in range(n):
            for i in range(8):
                P.adm[i] = adm[k, i]
                P.target[i] = target[k, i]
                P.y[i] = y[k, i]
                P.rho[i] = rho[k, i]
            P.rate2 = rate2[k]
            P.mu = mu
            status_out[k] = minimize(&u[k, 0], &lo[k, 0], &hi[k, 0], &P, tol, max_iter, &it)
            iters_out[k] = it
            flows(&u[k, 0], P.adm, &z_out[k, 0])


def norm2(v):
    cdef const double[::1] a = np.ascontiguousarray(v, dtype=np.float64)
    cdef double s = 0.0
    cdef Py_ssize_t i
    for i in range(a.shape[0]):
        s += a[i] * a[i]
    return sqrt(s)
