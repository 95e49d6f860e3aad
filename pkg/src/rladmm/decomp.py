"""Component-based consensus decomposition.

Every generator and branch keeps private copies of the quantities it shares
with buses (the ``x`` vector); every bus owns the matching originals (the
``x̄`` vector). Each copy is tied to its original by one coupling
constraint ``x[i] - x̄[xbar_slot[i]] = 0``, so the constraint matrices reduce
to slot maps and are never built in the solver path.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .netdata import NetworkModel

PQ = 0
VTHETA = 1

GEN_TAGS = ("p_g", "q_g")
BRANCH_TAGS = ("p_ij", "q_ij", "p_ji", "q_ji", "w_i", "w_j", "theta_i", "theta_j")
POWER_TAGS = frozenset({"p_g", "q_g", "p_ij", "q_ij", "p_ji", "q_ji"})


class Category(IntEnum):
    pq = PQ
    vtheta = VTHETA


@dataclass(frozen=True)
class CouplingConstraint:
    id: int
    category: Category
    x_slot: int
    xbar_slot: int
    owner: tuple[str, int]  # ("gen", k) or ("branch", k), indices into the model
    quantity: str


@dataclass(frozen=True, eq=False)
class Layout:
    """Dimensions and slot maps of the consensus reformulation.

    Bus blocks in ``x̄`` are ordered ``[w, θ, (p_g, q_g) per attached
    generator, (p, q) per incident branch end]``.
    """

    n_x: int
    n_xbar: int
    n_constraints: int
    n_pq: int
    n_vtheta: int
    gens: np.ndarray            # model indices of in-service generators
    branches: np.ndarray        # model indices of in-service branches
    gen_x: np.ndarray           # (n_gen,) start of each generator's 2-slot block
    branch_x: np.ndarray        # (n_branch,) start of each branch's 8-slot block
    bus_xbar: np.ndarray        # (n_bus + 1,) block boundaries in x̄
    xbar_slot: np.ndarray       # (n_constraints,)
    category: np.ndarray        # (n_constraints,) PQ or VTHETA
    slot_bus: np.ndarray        # (n_xbar,) owning bus of every x̄ slot
    slot_a: np.ndarray          # (n_xbar,) coefficient in the bus real-power balance
    slot_b: np.ndarray          # (n_xbar,) coefficient in the bus reactive balance
    w_slot: np.ndarray          # (n_bus,) x̄ slot of each bus voltage
    theta_slot: np.ndarray      # (n_bus,) x̄ slot of each bus angle
    slack: int

    @property
    def x_slot(self) -> np.ndarray:
        return np.arange(self.n_constraints)

    @property
    def pq_mask(self) -> np.ndarray:
        return self.category == PQ

    def split(self, values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return values[self.category == PQ], values[self.category == VTHETA]


@dataclass(frozen=True, eq=False)
class RhoVector:
    """Per-constraint penalty weights with category views."""

    values: np.ndarray
    category: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != self.category.shape:
            raise ValueError("rho length does not match the constraint count")
        if not np.all(v > 0):
            raise ValueError("penalty parameters must be strictly positive")
        object.__setattr__(self, "values", v)

    @classmethod
    def from_categories(cls, layout: Layout, rho_pq: float, rho_vtheta: float) -> "RhoVector":
        vals = np.where(layout.category == PQ, float(rho_pq), float(rho_vtheta))
        return cls(vals, layout.category)

    @property
    def pq(self) -> np.ndarray:
        return self.values[self.category == PQ]

    @property
    def vtheta(self) -> np.ndarray:
        return self.values[self.category == VTHETA]


def build_decomposition(net: NetworkModel) -> tuple[Layout, list[CouplingConstraint]]:
    """Build the slot layout and constraint registry for ``net``.

    Constraint order: in-service generators in input order, then in-service
    branches in input order; within a component, quantities follow
    ``GEN_TAGS`` / ``BRANCH_TAGS``.
    """
    nb = net.n_bus
    gens = net.in_service_generators()
    branches = net.in_service_branches()

    gens_at: list[list[int]] = [[] for _ in range(nb)]
    for pos, k in enumerate(gens):
        gens_at[net.generators[k].bus].append(pos)
    ends_at: list[list[tuple[int, int]]] = [[] for _ in range(nb)]  # (branch pos, 0=from 1=to)
    for pos, k in enumerate(branches):
        br = net.branches[k]
        ends_at[br.from_bus].append((pos, 0))
        ends_at[br.to_bus].append((pos, 1))

    bus_xbar = np.zeros(nb + 1, dtype=np.int64)
    slot_bus, slot_a, slot_b = [], [], []
    w_slot = np.zeros(nb, dtype=np.int64)
    theta_slot = np.zeros(nb, dtype=np.int64)
    gen_slot = {}
    end_slot = {}
    cursor = 0
    for i, bus in enumerate(net.buses):
        bus_xbar[i] = cursor
        w_slot[i], theta_slot[i] = cursor, cursor + 1
        slot_bus += [i, i]
        slot_a += [-bus.gs, 0.0]
        slot_b += [bus.bs, 0.0]
        cursor += 2
        for pos in gens_at[i]:
            gen_slot[pos] = cursor
            slot_bus += [i, i]
            slot_a += [1.0, 0.0]
            slot_b += [0.0, 1.0]
            cursor += 2
        for pos, side in ends_at[i]:
            end_slot[pos, side] = cursor
            slot_bus += [i, i]
            slot_a += [-1.0, 0.0]
            slot_b += [0.0, -1.0]
            cursor += 2
    bus_xbar[nb] = cursor

    constraints: list[CouplingConstraint] = []

    def add(owner, tag, xbar):
        cat = Category.pq if tag in POWER_TAGS else Category.vtheta
        cid = len(constraints)
        constraints.append(CouplingConstraint(cid, cat, cid, int(xbar), owner, tag))

    for pos, k in enumerate(gens):
        add(("gen", k), "p_g", gen_slot[pos])
        add(("gen", k), "q_g", gen_slot[pos] + 1)
    for pos, k in enumerate(branches):
        br = net.branches[k]
        i, j = br.from_bus, br.to_bus
        owner = ("branch", k)
        add(owner, "p_ij", end_slot[pos, 0])
        add(owner, "q_ij", end_slot[pos, 0] + 1)
        add(owner, "p_ji", end_slot[pos, 1])
        add(owner, "q_ji", end_slot[pos, 1] + 1)
        add(owner, "w_i", w_slot[i])
        add(owner, "w_j", w_slot[j])
        add(owner, "theta_i", theta_slot[i])
        add(owner, "theta_j", theta_slot[j])

    n = len(constraints)
    category = np.array([c.category for c in constraints], dtype=np.int64)
    n_pq = int(np.sum(category == PQ))
    layout = Layout(
        n_x=n, n_xbar=cursor, n_constraints=n, n_pq=n_pq, n_vtheta=n - n_pq,
        gens=np.array(gens, dtype=np.int64),
        branches=np.array(branches, dtype=np.int64),
        gen_x=2 * np.arange(len(gens), dtype=np.int64),
        branch_x=2 * len(gens) + 8 * np.arange(len(branches), dtype=np.int64),
        bus_xbar=bus_xbar,
        xbar_slot=np.array([c.xbar_slot for c in constraints], dtype=np.int64),
        category=category,
        slot_bus=np.array(slot_bus, dtype=np.int64),
        slot_a=np.array(slot_a, dtype=float),
        slot_b=np.array(slot_b, dtype=float),
        w_slot=w_slot, theta_slot=theta_slot,
        slack=net.slack_bus(),
    )
    return layout, constraints


def residual_primal(x: np.ndarray, xbar: np.ndarray, layout: Layout) -> np.ndarray:
    return x - xbar[layout.xbar_slot]


def residual_dual(xbar_now: np.ndarray, xbar_prev: np.ndarray, rho: RhoVector,
                  layout: Layout) -> np.ndarray:
    slots = layout.xbar_slot
    return -rho.values * (xbar_now[slots] - xbar_prev[slots])


def dense_matrices(layout: Layout) -> tuple[np.ndarray, np.ndarray]:
    """Explicit ``A`` (+1 selection) and ``B`` (-1 selection). Debug/testing only."""
    n = layout.n_constraints
    a = np.zeros((n, layout.n_x))
    b = np.zeros((n, layout.n_xbar))
    a[np.arange(n), layout.x_slot] = 1.0
    b[np.arange(n), layout.xbar_slot] = -1.0
    return a, b


def registry_csv(constraints: list[CouplingConstraint]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", "category", "owner", "quantity"])
    for c in constraints:
        w.writerow([c.id, c.category.name, f"{c.owner[0]}{c.owner[1]}", c.quantity])
    return buf.getvalue()
