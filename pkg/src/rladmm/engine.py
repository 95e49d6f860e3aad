"""ADMM iteration engine for the component-based ACOPF decomposition."""

from __future__ import annotations

import copy
import csv
import itertools
import math
import os
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from typing import Callable, Protocol

import numpy as np

from . import kernels
from .decomp import PQ, VTHETA, Layout, RhoVector, build_decomposition
from .netdata import NetworkModel
from .subsolvers import (DEFAULT_LIMIT_WEIGHT, ModelError, SolverFailure, TWO_PI,
                         solve_buses_batch, solve_generators_batch)

INITIAL_RHO_PQ = 400.0
BASELINE_RHO = 500.0
SMALL_NETWORK_BUSES = 30


def initial_rho(n_bus: int) -> tuple[float, float]:
    """Starting ``(ρ_pq, ρ_vθ)``: 400 for power; 40000 up to 30 buses, else 4000."""
    return INITIAL_RHO_PQ, (40000.0 if n_bus <= SMALL_NETWORK_BUSES else 4000.0)


@dataclass(frozen=True)
class Tolerances:
    eps_primal: float = 1e-4
    eps_dual: float = 1e-4
    max_iter: int = 3000
    divergence_norm: float = 1e8

    def __post_init__(self):
        if not (self.eps_primal > 0 and self.eps_dual > 0 and self.max_iter > 0
                and self.divergence_norm > 0):
            raise ValueError("tolerances must be positive")


class StepError(RuntimeError):
    def __init__(self, message: str, component=None):
        super().__init__(message)
        self.component = component


@dataclass(eq=False)
class IterateState:
    k: int
    x: np.ndarray
    xbar: np.ndarray
    xbar_prev: np.ndarray
    y: np.ndarray
    u: np.ndarray  # (n_branch, 4) branch warm starts (w_i, w_j, θ_i, θ_j)
    rho: RhoVector | None
    history: deque
    primal_norm: float = math.inf
    dual_norm: float = math.inf
    converged: bool = False
    diverged: bool = False

    def copy(self) -> "IterateState":
        return IterateState(
            k=self.k, x=self.x.copy(), xbar=self.xbar.copy(),
            xbar_prev=self.xbar_prev.copy(), y=self.y.copy(), u=self.u.copy(),
            rho=self.rho, history=deque(self.history, maxlen=self.history.maxlen),
            primal_norm=self.primal_norm, dual_norm=self.dual_norm,
            converged=self.converged, diverged=self.diverged)

    @property
    def last_residuals(self) -> tuple[np.ndarray, np.ndarray]:
        return self.history[-1]


_snapshot_ids = itertools.count()


@dataclass(frozen=True, eq=False)
class Snapshot:
    state: IterateState
    id: int = field(default_factory=lambda: next(_snapshot_ids))


def snapshot(state: IterateState) -> Snapshot:
    return Snapshot(state.copy())


def restore(snap: Snapshot) -> IterateState:
    """A fresh copy of the saved state; the snapshot stays reusable."""
    return snap.state.copy()


def norm2(v: np.ndarray) -> float:
    return kernels.norm2(v)


def check_convergence(r_p: np.ndarray, r_d: np.ndarray, tol: Tolerances) -> bool:
    return norm2(r_p) <= tol.eps_primal and norm2(r_d) <= tol.eps_dual


class Engine:
    """Precomputed problem data plus the ADMM step for one network."""

    def __init__(self, net: NetworkModel, tol: Tolerances | None = None, *,
                 workers: int | None = None, history_len: int = 20,
                 limit_weight: float = DEFAULT_LIMIT_WEIGHT,
                 branch_tol: float = 1e-8, branch_max_iter: int = 200):
        net.validate()
        self.net = net
        self.tol = tol or Tolerances()
        self.history_len = history_len
        self.limit_weight = limit_weight
        self.branch_tol = branch_tol
        self.branch_max_iter = branch_max_iter
        if workers is None:
            workers = int(os.environ.get("RLADMM_WORKERS", "1"))
        self.workers = max(1, workers)
        self._pool = ThreadPoolExecutor(self.workers) if self.workers > 1 else None

        layout, constraints = build_decomposition(net)
        self.layout: Layout = layout
        self.constraints = constraints
        gens = [net.generators[k] for k in layout.gens]
        self.c2 = np.array([g.cost[0] for g in gens])
        self.c1 = np.array([g.cost[1] for g in gens])
        self.c0 = np.array([g.cost[2] for g in gens])
        self.pmin = np.array([g.pmin for g in gens])
        self.pmax = np.array([g.pmax for g in gens])
        self.qmin = np.array([g.qmin for g in gens])
        self.qmax = np.array([g.qmax for g in gens])
        self.gen_idx = (layout.gen_x[:, None] + np.arange(2)).reshape(-1, 2)
        brs = [net.branches[k] for k in layout.branches]
        self.branch_idx = (layout.branch_x[:, None] + np.arange(8)).reshape(-1, 8)
        self.adm = np.array([b.adm for b in brs], dtype=float).reshape(-1, 8)
        self.rate2 = np.array([b.rate * b.rate for b in brs], dtype=float)
        buses = net.buses
        self.lo = np.array([[buses[b.from_bus].vmin2, buses[b.to_bus].vmin2, -TWO_PI, -TWO_PI]
                            for b in brs], dtype=float).reshape(-1, 4)
        self.hi = np.array([[buses[b.from_bus].vmax2, buses[b.to_bus].vmax2, TWO_PI, TWO_PI]
                            for b in brs], dtype=float).reshape(-1, 4)
        self.pd = np.array([b.pd for b in buses])
        self.qd = np.array([b.qd for b in buses])
        self.last_branch_iters = np.zeros(len(brs), dtype=np.int64)
        self.last_branch_status = np.zeros(len(brs), dtype=np.int64)

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    @property
    def n_bus(self) -> int:
        return self.net.n_bus

    def rho(self, rho_pq: float, rho_vtheta: float) -> RhoVector:
        return RhoVector.from_categories(self.layout, rho_pq, rho_vtheta)

    def initial_rho(self) -> RhoVector:
        return self.rho(*initial_rho(self.n_bus))

    # -- initialization ------------------------------------------------------

    def cold_start(self) -> IterateState:
        """Flat start: w = 1 (clamped to bounds), θ = 0, generators at the
        midpoint of their boxes, flows at 0, multipliers at 0."""
        lay = self.layout
        x = np.zeros(lay.n_x)
        pmid = 0.5 * (self.pmin + self.pmax)
        qmid = 0.5 * (self.qmin + self.qmax)
        x[self.gen_idx[:, 0]] = pmid
        x[self.gen_idx[:, 1]] = qmid
        u = np.clip(np.tile([1.0, 1.0, 0.0, 0.0], (len(self.adm), 1)), self.lo, self.hi)
        x[self.branch_idx[:, 4:]] = u
        xbar = np.zeros(lay.n_xbar)
        vmid = np.array([min(max(1.0, b.vmin2), b.vmax2) for b in self.net.buses])
        xbar[lay.w_slot] = vmid
        gslots = lay.xbar_slot[self.gen_idx]
        xbar[gslots[:, 0]] = pmid
        xbar[gslots[:, 1]] = qmid
        return IterateState(k=0, x=x, xbar=xbar, xbar_prev=xbar.copy(),
                            y=np.zeros(lay.n_constraints), u=u, rho=None,
                            history=deque(maxlen=self.history_len))

    # -- one iteration -------------------------------------------------------

    def _solve_branches(self, u, target, y, rho):
        n = len(u)
        z = np.empty((n, 8))
        iters = np.empty(n, dtype=np.int64)
        status = np.empty(n, dtype=np.int64)
        args = (self.lo, self.hi, self.adm, target, y, rho, self.rate2)

        def run(a, b):
            kernels.solve_branches(u[a:b], *[np.ascontiguousarray(v[a:b]) for v in args],
                                   self.limit_weight, self.branch_tol, self.branch_max_iter,
                                   z[a:b], iters[a:b], status[a:b])

        if self._pool is None or n < 2:
            run(0, n)
        else:
            bounds = np.linspace(0, n, min(self.workers, n) + 1).astype(int)
            futures = [self._pool.submit(run, int(a), int(b))
                       for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
            for fut in futures:
                fut.result()
        self.last_branch_iters = iters
        self.last_branch_status = status
        return z

    def step(self, state: IterateState, rho: RhoVector) -> IterateState:
        """One ADMM iteration; ``state`` is left untouched."""
        lay = self.layout
        r = rho.values
        slots = lay.xbar_slot
        target = state.xbar[slots]
        y = state.y
        x = np.empty(lay.n_x)

        gi = self.gen_idx
        p, q = solve_generators_batch(self.c2, self.c1, self.pmin, self.pmax, self.qmin,
                                      self.qmax, target[gi], y[gi], r[gi])
        x[gi[:, 0]] = p
        x[gi[:, 1]] = q

        bi = self.branch_idx
        u = np.ascontiguousarray(state.u.copy())
        if len(bi):
            z = self._solve_branches(u, np.ascontiguousarray(target[bi]),
                                     np.ascontiguousarray(y[bi]), np.ascontiguousarray(r[bi]))
            x[bi] = z
        if not np.all(np.isfinite(x)):
            bad = int(np.argmax(~np.isfinite(x)))
            raise StepError("subproblem returned non-finite values",
                            component=self.constraints[bad].owner)

        try:
            xbar = solve_buses_batch(lay, x, y, r, self.pd, self.qd, state.xbar)
        except ModelError as exc:
            raise StepError(str(exc), component="bus") from exc

        r_p = x - xbar[slots]
        r_d = -r * (xbar[slots] - target)
        y_new = y + r * r_p
        history = deque(state.history, maxlen=state.history.maxlen)
        history.append((r_p, r_d))
        pn, dn = norm2(r_p), norm2(r_d)
        return IterateState(
            k=state.k + 1, x=x, xbar=xbar, xbar_prev=state.xbar, y=y_new, u=u, rho=rho,
            history=history, primal_norm=pn, dual_norm=dn,
            converged=pn <= self.tol.eps_primal and dn <= self.tol.eps_dual,
            diverged=not (pn <= self.tol.divergence_norm))

    # -- reporting -----------------------------------------------------------

    def objective(self, state: IterateState) -> float:
        p = state.x[self.gen_idx[:, 0]]
        return float(np.sum(self.c2 * p * p + self.c1 * p + self.c0))

    def generation(self, state: IterateState) -> tuple[np.ndarray, np.ndarray]:
        return state.x[self.gen_idx[:, 0]], state.x[self.gen_idx[:, 1]]

    def balance_residuals(self, state: IterateState) -> tuple[np.ndarray, np.ndarray]:
        """Per-bus real/reactive balance mismatch evaluated on the branch and
        generator copies (the component side)."""
        lay = self.layout
        x = state.x
        v = np.zeros(lay.n_xbar)
        slots = lay.xbar_slot
        v[slots] = x  # w/θ copies overwrite each other; only used for flows & gens
        v[lay.w_slot] = state.xbar[lay.w_slot]
        nb = self.n_bus
        mis_p = np.bincount(lay.slot_bus, weights=lay.slot_a * v, minlength=nb) - self.pd
        mis_q = np.bincount(lay.slot_bus, weights=lay.slot_b * v, minlength=nb) - self.qd
        return mis_p, mis_q


# ---------------------------------------------------------------------------
# penalty policies


class RhoPolicy(Protocol):
    name: str

    def reset(self, engine: Engine) -> None: ...

    def choose(self, state: IterateState, engine: Engine) -> RhoVector: ...


class FixedPolicy:
    """Constant category-wise penalties; defaults to the standard initial values."""

    name = "fixed"

    def __init__(self, rho_pq: float | None = None, rho_vtheta: float | None = None):
        self.rho_pq = rho_pq
        self.rho_vtheta = rho_vtheta
        self._rho = None

    def reset(self, engine: Engine) -> None:
        d_pq, d_vt = initial_rho(engine.n_bus)
        self._rho = engine.rho(self.rho_pq or d_pq, self.rho_vtheta or d_vt)

    def choose(self, state: IterateState, engine: Engine) -> RhoVector:
        if self._rho is None or self._rho.values.shape[0] != engine.layout.n_constraints:
            self.reset(engine)
        return self._rho


class BaselineProbePolicy(FixedPolicy):
    name = "baseline500"

    def __init__(self):
        super().__init__(BASELINE_RHO, BASELINE_RHO)


def residual_balancing_update(rp_norm: float, rd_norm: float, rho: float, rho0: float,
                              tau: float = 2.0, mu: float = 10.0) -> float:
    if rp_norm > mu * rd_norm:
        rho = rho * tau
    elif rd_norm > mu * rp_norm:
        rho = rho / tau
    return min(max(rho, 1e-2 * rho0), 1e2 * rho0)


class ResidualBalancingPolicy:
    """Category-wise residual balancing, clamped to ``[ρ0/100, 100 ρ0]``."""

    name = "residual_balancing"

    def __init__(self, tau: float = 2.0, mu: float = 10.0,
                 rho0: tuple[float, float] | None = None):
        if not (tau > 1 and mu > 1):
            raise ValueError("residual balancing needs tau > 1 and mu > 1")
        self.tau = tau
        self.mu = mu
        self.rho0_override = rho0
        self.rho0 = rho0
        self.current = None

    def reset(self, engine: Engine) -> None:
        self.rho0 = self.rho0_override or initial_rho(engine.n_bus)
        self.current = list(self.rho0)

    def choose(self, state: IterateState, engine: Engine) -> RhoVector:
        if self.current is None or state.k == 0:
            self.reset(engine)
        if state.history:
            r_p, r_d = state.last_residuals
            cat = engine.layout.category
            for c in (PQ, VTHETA):
                mask = cat == c
                if not np.any(mask):
                    continue
                self.current[c] = residual_balancing_update(
                    norm2(r_p[mask]), norm2(r_d[mask]), self.current[c], self.rho0[c],
                    self.tau, self.mu)
        return engine.rho(*self.current)


# ---------------------------------------------------------------------------
# episodes


TRACE_FIELDS = ("k", "primal_norm", "dual_norm", "mean_rho_pq", "mean_rho_vtheta",
                "objective", "wall_time")


class CsvTrace:
    """Trace sink writing one CSV row per iteration."""

    def __init__(self, path):
        self._fh = open(path, "w", newline="")
        self._w = csv.writer(self._fh)
        self._w.writerow(TRACE_FIELDS)
        self.rows = 0

    def __call__(self, row: dict):
        self._w.writerow([row[f] for f in TRACE_FIELDS])
        self.rows += 1

    def close(self):
        self._fh.close()


@dataclass
class EpisodeResult:
    iterations: int
    converged: bool
    diverged: bool
    objective: float
    state: IterateState = field(repr=False)
    wall_time: float = 0.0
    error: str | None = None


def trace_row(engine: Engine, state: IterateState, t0: float) -> dict:
    rho = state.rho
    return {
        "k": state.k,
        "primal_norm": state.primal_norm,
        "dual_norm": state.dual_norm,
        "mean_rho_pq": float(np.mean(rho.pq)) if rho is not None and rho.pq.size else 0.0,
        "mean_rho_vtheta": float(np.mean(rho.vtheta)) if rho is not None and rho.vtheta.size else 0.0,
        "objective": engine.objective(state),
        "wall_time": time.perf_counter() - t0,
    }


def run_episode(engine: Engine, policy: RhoPolicy, tol: Tolerances | None = None,
                trace: Callable[[dict], None] | None = None,
                on_step: Callable[[IterateState], None] | None = None) -> EpisodeResult:
    """Solve from a cold start until convergence, the iteration cap, or divergence."""
    if tol is not None:
        engine.tol = tol
    tol = engine.tol
    t0 = time.perf_counter()
    state = engine.cold_start()
    policy.reset(engine)
    error = None
    while state.k < tol.max_iter:
        rho = policy.choose(state, engine)
        try:
            state = engine.step(state, rho)
        except (StepError, SolverFailure) as exc:
            error = str(exc)
            break
        if trace is not None:
            trace(trace_row(engine, state, t0))
        if on_step is not None:
            on_step(state)
        if state.converged or state.diverged:
            break
    return EpisodeResult(iterations=state.k, converged=state.converged,
                         diverged=state.diverged or error is not None,
                         objective=engine.objective(state), state=state,
                         wall_time=time.perf_counter() - t0, error=error)
