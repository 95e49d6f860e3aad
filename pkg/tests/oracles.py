"""Independent reference computations used by the test suite.

Nothing here imports the package under test: the case files are read with a
small standalone reader and every model is rebuilt from raw columns.
"""

from __future__ import annotations

import re

import numpy as np
from scipy.optimize import minimize


def read_matrices(path) -> dict[str, np.ndarray]:
    """``mpc.<name> = [ ... ];`` blocks of a MATPOWER file as float arrays."""
    text = open(path).read()
    out = {}
    for m in re.finditer(r"mpc\.(\w+)\s*=\s*\[(.*?)\];", text, re.S):
        rows = []
        for line in m.group(2).splitlines():
            line = line.split("%")[0].strip().rstrip(";").strip()
            if line:
                rows.append([float(v) for v in line.replace(";", " ").split()])
        out[m.group(1)] = np.array(rows)
    base = re.search(r"mpc\.baseMVA\s*=\s*([\d.]+)", text)
    out["baseMVA"] = float(base.group(1))
    return out


def centralized_acopf(path) -> float:
    """Minimum generation cost of the polar-voltage ACOPF, solved with SLSQP.

    Variables are ``(Pg, Qg, Vm, Va)`` in per unit. Constraints: nodal power
    balance through the bus admittance matrix, apparent-power limits on both
    ends of every rated line, voltage and generator limits, slack angle 0.
    """
    mpc = read_matrices(path)
    base = mpc["baseMVA"]
    bus, gen, br, cost = mpc["bus"], mpc["gen"], mpc["branch"], mpc["gencost"]
    gen_on = gen[:, 7] > 0
    gen, cost = gen[gen_on], cost[gen_on]
    br = br[br[:, 10] > 0]
    nb, ng, nl = len(bus), len(gen), len(br)
    idx = {int(b): i for i, b in enumerate(bus[:, 0])}
    f = np.array([idx[int(v)] for v in br[:, 0]])
    t = np.array([idx[int(v)] for v in br[:, 1]])
    ys = 1.0 / (br[:, 2] + 1j * br[:, 3])
    tap = np.where(br[:, 8] == 0, 1.0, br[:, 8]) * np.exp(1j * np.deg2rad(br[:, 9]))
    bc = br[:, 4]
    yff = (ys + 0.5j * bc) / (tap * np.conj(tap))
    yft = -ys / np.conj(tap)
    ytf = -ys / tap
    ytt = ys + 0.5j * bc
    ysh = (bus[:, 4] + 1j * bus[:, 5]) / base
    Y = np.zeros((nb, nb), complex)
    np.add.at(Y, (f, f), yff)
    np.add.at(Y, (f, t), yft)
    np.add.at(Y, (t, f), ytf)
    np.add.at(Y, (t, t), ytt)
    Y[np.diag_indices(nb)] += ysh
    gbus = np.array([idx[int(v)] for v in gen[:, 0]])
    Cg = np.zeros((nb, ng))
    Cg[gbus, np.arange(ng)] = 1.0
    sd = (bus[:, 2] + 1j * bus[:, 3]) / base
    rate = br[:, 5] / base
    rated = rate > 0
    slack = int(np.flatnonzero(bus[:, 1] == 3)[0])
    c2 = cost[:, 4] * base ** 2
    c1 = cost[:, 5] * base
    c0 = cost[:, 6]

    def split(z):
        return z[:ng], z[ng:2 * ng], z[2 * ng:2 * ng + nb], z[2 * ng + nb:]

    def volt(z):
        _, _, vm, va = split(z)
        return vm * np.exp(1j * va)

    def obj(z):
        pg = z[:ng]
        return float(np.sum(c2 * pg * pg + c1 * pg + c0))

    def obj_grad(z):
        g = np.zeros_like(z)
        g[:ng] = 2 * c2 * z[:ng] + c1
        return g

    def balance(z):
        pg, qg, _, _ = split(z)
        v = volt(z)
        mis = v * np.conj(Y @ v) - (Cg @ (pg + 1j * qg) - sd)
        return np.concatenate([mis.real, mis.imag])

    def flows(z):
        v = volt(z)
        sf = v[f] * np.conj(yff * v[f] + yft * v[t])
        st = v[t] * np.conj(ytf * v[f] + ytt * v[t])
        lim = rate[rated] ** 2
        return np.concatenate([lim - np.abs(sf[rated]) ** 2, lim - np.abs(st[rated]) ** 2])

    lb = np.concatenate([gen[:, 9] / base, gen[:, 4] / base, bus[:, 12], np.full(nb, -np.pi)])
    ub = np.concatenate([gen[:, 8] / base, gen[:, 3] / base, bus[:, 11], np.full(nb, np.pi)])
    lb[2 * ng + nb + slack] = ub[2 * ng + nb + slack] = 0.0
    z0 = np.concatenate([0.5 * (lb[:ng] + ub[:ng]), np.zeros(ng), np.ones(nb), np.zeros(nb)])
    z0 = np.clip(z0, lb, ub)
    cons = [{"type": "eq", "fun": balance}]
    if rated.any():
        cons.append({"type": "ineq", "fun": flows})
    res = minimize(obj, z0, jac=obj_grad, bounds=list(zip(lb, ub)), constraints=cons,
                   method="SLSQP", options={"maxiter": 1000, "ftol": 1e-10})
    if not res.success or np.max(np.abs(balance(res.x))) > 1e-6:
        raise RuntimeError(f"reference ACOPF failed: {res.message}")
    return float(res.fun)


class UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, a: int) -> int:
        while self.parent[a] != a:
            self.parent[a] = self.parent[self.parent[a]]
            a = self.parent[a]
        return a

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[ra] = rb


def connected_without(n: int, edges, removed: int) -> bool:
    uf = UnionFind(n)
    for k, (a, b) in enumerate(edges):
        if k != removed:
            uf.union(a, b)
    root = uf.find(0)
    return all(uf.find(i) == root for i in range(n))


def bus_kkt(a, b, rbar, num, fixed_mask, fixed_val, pd, qd):
    """Solve the equality-constrained bus QP with one dense KKT system.

    minimize  sum_m rbar_m/2 v_m^2 - num_m v_m   s.t.  a.v = pd, b.v = qd,
    with ``v_m`` pinned where ``fixed_mask`` is set.
    """
    n = len(a)
    free = ~fixed_mask
    m = int(free.sum())
    K = np.zeros((m + 2, m + 2))
    rhs = np.zeros(m + 2)
    K[:m, :m] = np.diag(rbar[free])
    K[:m, m] = -a[free]
    K[:m, m + 1] = -b[free]
    K[m, :m] = a[free]
    K[m + 1, :m] = b[free]
    rhs[:m] = num[free]
    rhs[m] = pd - a[fixed_mask] @ fixed_val[fixed_mask]
    rhs[m + 1] = qd - b[fixed_mask] @ fixed_val[fixed_mask]
    sol = np.linalg.solve(K, rhs)
    v = fixed_val.astype(float).copy()
    v[free] = sol[:m]
    return v


def pi_admittances(r, x, bc, tap=1.0, shift=0.0):
    """``(Y_ff, Y_ft, Y_tf, Y_tt)`` of a pi-model branch (shift in radians)."""
    ys = 1.0 / complex(r, x)
    t = tap * np.exp(1j * shift)
    return ((ys + 0.5j * bc) / (t * np.conj(t)), -ys / np.conj(t), -ys / t, ys + 0.5j * bc)


def branch_flows(u, Y):
    """Complex-arithmetic branch flows ``(p_ij, q_ij, p_ji, q_ji)``.

    ``u = (w_i, w_j, θ_i, θ_j)`` may hold arrays; ``Y`` is from
    :func:`pi_admittances`.
    """
    wi, wj, ti, tj = (np.asarray(v, dtype=float) for v in u)
    vi = np.sqrt(wi) * np.exp(1j * ti)
    vj = np.sqrt(wj) * np.exp(1j * tj)
    yff, yft, ytf, ytt = Y
    sij = vi * np.conj(yff * vi + yft * vj)
    sji = vj * np.conj(ytf * vi + ytt * vj)
    return sij.real, sij.imag, sji.real, sji.imag


def branch_objective(u, Y, target, y, rho, rate, mu):
    """Branch augmented-Lagrangian value on arrays of points ``u``."""
    flows = branch_flows(u, Y)
    z = list(flows) + [np.asarray(v, dtype=float) for v in u]
    val = 0.0
    for k in range(8):
        d = z[k] - target[k]
        val = val + y[k] * d + 0.5 * rho[k] * d * d
    if rate > 0:
        for p, q in ((flows[0], flows[1]), (flows[2], flows[3])):
            val = val + mu * np.maximum(0.0, p * p + q * q - rate * rate) ** 2
    return val
