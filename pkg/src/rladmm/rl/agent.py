"""Deep Q-learning of per-constraint penalty parameters.

Two entry-wise Q-networks (power constraints and voltage/angle constraints)
score ten candidate penalties for each coupling constraint from that
constraint's own residual history. Rewards compare every learned step
against a counterfactual step taken with a constant baseline penalty from
the same saved iterate.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from ..decomp import PQ, VTHETA, RhoVector
from ..engine import (BASELINE_RHO, SMALL_NETWORK_BUSES, Engine, IterateState, StepError,
                      Tolerances, initial_rho, restore, snapshot)
from ..subsolvers import SolverFailure
from .qnet import DEFAULT_DIMS, CheckpointError, MomentumSGD, NonFiniteError, QNetwork
from .replay import PrioritizedReplay

log = logging.getLogger(__name__)

RHO_PQ_ACTIONS = (100., 200., 300., 400., 500., 600., 700., 800., 900., 1000.)
RHO_VT_ACTIONS_SMALL_NET = (500., 2000., 5000., 10000., 20000., 30000., 40000., 50000.,
                            60000., 70000.)
RHO_VT_ACTIONS_LARGE_NET = (500., 1000., 1500., 2000., 2500., 3000., 3500., 4000., 5500.,
                            7000.)
SIGNED_LOG_SCALE = 1e-8
GUARD = 1e-12
CATEGORIES = ("pq", "vtheta")


def vtheta_actions(n_bus: int) -> tuple[float, ...]:
    return RHO_VT_ACTIONS_SMALL_NET if n_bus <= SMALL_NETWORK_BUSES else RHO_VT_ACTIONS_LARGE_NET


@dataclass
class MdpConfig:
    gamma: float = 0.99
    n: int = 20
    rho_pq_actions: tuple[float, ...] = RHO_PQ_ACTIONS
    rho_vtheta_actions: tuple[float, ...] | None = None  # None: chosen from bus count
    conv_bonus: float = 200.0
    baseline_rho: float = BASELINE_RHO
    z_p: float | None = None
    z_d: float | None = None
    state_transform: str = "signed_log"
    # The literal relative-advantage term is positive when the learned step
    # leaves *larger* residuals than the baseline; -1 rewards improvement.
    advantage_sign: float = -1.0

    def __post_init__(self):
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")
        if self.state_transform not in ("raw", "signed_log"):
            raise ValueError(f"unknown state transform {self.state_transform!r}")
        self.rho_pq_actions = tuple(float(v) for v in self.rho_pq_actions)
        if self.rho_vtheta_actions is not None:
            self.rho_vtheta_actions = tuple(float(v) for v in self.rho_vtheta_actions)
        for table in (self.rho_pq_actions, self.rho_vtheta_actions):
            if table is None:
                continue
            if not all(v > 0 for v in table) or any(b <= a for a, b in zip(table, table[1:])):
                raise ValueError("action tables must be positive and strictly increasing")

    def tables(self, n_bus: int) -> tuple[tuple[float, ...], tuple[float, ...]]:
        return self.rho_pq_actions, self.rho_vtheta_actions or vtheta_actions(n_bus)

    @property
    def state_dim(self) -> int:
        return 2 * self.n

    def layer_dims(self, hidden: int = 256, depth: int = 4) -> tuple[int, ...]:
        return (self.state_dim,) + (hidden,) * (depth - 1) + (len(self.rho_pq_actions),)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MdpConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: (tuple(v) if isinstance(v, list) else v)
                      for k, v in d.items() if k in names})


@dataclass
class TrainConfig:
    episodes: int = 1000
    lr: float = 1e-4
    momentum: float = 0.9
    grad_clip: float | None = 10.0
    batch_size: int = 64
    replay_capacity: int = 100_000
    warmup: int = 1000
    target_sync: int = 500
    eps_start: float = 1.0
    eps_min: float = 0.02
    eps_decay_episodes: int = 300
    alpha_per: float = 0.6
    beta_start: float = 0.4
    beta_end: float = 1.0
    eps_per: float = 1e-3
    hidden: int = 256
    seed: int = 0

    def __post_init__(self):
        positive = (self.lr, self.batch_size, self.replay_capacity, self.target_sync,
                    self.eps_decay_episodes, self.hidden)
        if self.episodes < 0 or not all(v > 0 for v in positive):
            raise ValueError("training settings must be positive")
        if not 0 <= self.eps_min <= self.eps_start <= 1:
            raise ValueError("need 0 <= eps_min <= eps_start <= 1")

    def epsilon(self, episode: int) -> float:
        """Exponential decay from ``eps_start`` to ``eps_min``, then flat."""
        if self.eps_start == 0:
            return 0.0
        frac = min(episode / self.eps_decay_episodes, 1.0)
        floor = max(self.eps_min, 1e-12)
        return max(self.eps_min, self.eps_start * (floor / self.eps_start) ** frac)

    def beta(self, episode: int) -> float:
        frac = min(episode / max(self.episodes, 1), 1.0)
        return self.beta_start + (self.beta_end - self.beta_start) * frac


# ---------------------------------------------------------------------------
# states


class NotReady(Exception):
    """Fewer than ``n`` residual pairs recorded yet."""


def signed_log(v: np.ndarray) -> np.ndarray:
    return np.sign(v) * np.log10(1.0 + np.abs(v) / SIGNED_LOG_SCALE)


def build_state(history: Sequence[tuple[float, float]], n: int,
                transform: str = "signed_log") -> np.ndarray:
    """State of one constraint from its ``(r_p, r_d)`` history (oldest first)."""
    if len(history) < n:
        raise NotReady(f"need {n} residual pairs, have {len(history)}")
    s = np.asarray(list(history)[-n:], dtype=float).reshape(2 * n)
    return signed_log(s) if transform == "signed_log" else s


def build_states(state: IterateState, n: int, transform: str = "signed_log") -> np.ndarray:
    """States of every constraint at once, shape ``(n_constraints, 2n)``."""
    hist = state.history
    if len(hist) < n:
        raise NotReady(f"need {n} residual pairs, have {len(hist)}")
    recent = list(hist)[-n:]
    rp = np.stack([h[0] for h in recent], axis=1)
    rd = np.stack([h[1] for h in recent], axis=1)
    out = np.empty((rp.shape[0], 2 * n))
    out[:, 0::2] = rp
    out[:, 1::2] = rd
    return signed_log(out) if transform == "signed_log" else out


# ---------------------------------------------------------------------------
# targets and rewards


def double_q_target(online: QNetwork, frozen: QNetwork, r, s_next, done, gamma: float):
    """``r`` when done, else ``r + γ Q_frozen(s', argmax_a Q_online(s', a))``.

    Works on a single transition or on a batch.
    """
    single = np.ndim(s_next) == 1
    s2 = np.atleast_2d(s_next)
    r = np.atleast_1d(np.asarray(r, dtype=float))
    done = np.atleast_1d(np.asarray(done, dtype=bool))
    best = np.argmax(online.forward(s2), axis=1)
    boot = frozen.forward(s2)[np.arange(len(best)), best]
    target = np.where(done, r, r + gamma * boot)
    return float(target[0]) if single else target


def reward_conv(primal_norm: float, dual_norm: float, tol: Tolerances,
                bonus: float = 200.0) -> float:
    return bonus if (primal_norm <= tol.eps_primal and dual_norm <= tol.eps_dual) else 0.0


def reward_res(prev: tuple[float, float], nxt: tuple[float, float], z_p: float, z_d: float) -> float:
    if not (z_p > 0 and z_d > 0):
        raise ValueError("normalizers must be positive")
    return (nxt[0] - prev[0]) / z_p + (nxt[1] - prev[1]) / z_d


def relative_advantage(rl: tuple[float, float], base: tuple[float, float]) -> float:
    return ((rl[0] - base[0]) / max(base[0], GUARD)
            + (rl[1] - base[1]) / max(base[1], GUARD))


def total_reward(r_conv: float, r_b: float) -> float:
    return r_conv + r_b


@dataclass
class ProbeOutcome:
    reward: float           # literal relative advantage (or fallback)
    state: IterateState     # the state after the learned step; the episode keeps it
    baseline_norms: tuple[float, float] | None
    fallback: bool = False


def reward_baseline(engine: Engine, state: IterateState, rho: RhoVector,
                    baseline_rho: float = BASELINE_RHO) -> ProbeOutcome:
    """Probe a baseline step from ``state``, roll back, then take the learned step."""
    snap = snapshot(state)
    base = None
    try:
        probe = engine.step(restore(snap), engine.rho(baseline_rho, baseline_rho))
        base = (probe.primal_norm, probe.dual_norm)
    except (StepError, SolverFailure) as exc:
        log.warning("baseline probe failed at k=%d: %s", state.k, exc)
    nxt = engine.step(restore(snap), rho)
    rl = (nxt.primal_norm, nxt.dual_norm)
    if base is None:
        prev = (state.primal_norm, state.dual_norm)
        return ProbeOutcome(reward_res(prev, rl, max(prev[0], GUARD), max(prev[1], GUARD)),
                            nxt, None, fallback=True)
    return ProbeOutcome(relative_advantage(rl, base), nxt, base)


# ---------------------------------------------------------------------------
# action selection and deployment


def select_actions(net: QNetwork, states: np.ndarray, eps: float,
                   rng: np.random.Generator | None) -> np.ndarray:
    """ε-greedy action indices, independently for every row of ``states``.

    The greedy action is kept with probability ``1 - (|A|-1)ε/|A|``; each
    other action has probability ``ε/|A|``.
    """
    if len(states) == 0:
        return np.zeros(0, dtype=np.int64)
    greedy = np.argmax(net.forward(states), axis=1)
    if eps <= 0 or rng is None:
        return greedy
    n_actions = net.dims[-1]
    explore = rng.random(len(greedy)) < eps
    random_a = rng.integers(n_actions, size=len(greedy))
    return np.where(explore, random_a, greedy)


def actions_to_rho(engine: Engine, a_pq: np.ndarray, a_vt: np.ndarray,
                   tables: tuple[Sequence[float], Sequence[float]]) -> RhoVector:
    cat = engine.layout.category
    vals = np.empty(len(cat))
    vals[cat == PQ] = np.asarray(tables[0])[a_pq]
    vals[cat == VTHETA] = np.asarray(tables[1])[a_vt]
    return RhoVector(vals, cat)


class RLPolicy:
    """Greedy factorized policy from trained Q-networks (no learning, no probe)."""

    name = "rl"

    def __init__(self, q_pq: QNetwork, q_vtheta: QNetwork, mdp: MdpConfig | None = None):
        self.q_pq = q_pq
        self.q_vtheta = q_vtheta
        self.mdp = mdp or MdpConfig()
        for q in (q_pq, q_vtheta):
            if q.dims[0] != self.mdp.state_dim or q.dims[-1] != len(self.mdp.rho_pq_actions):
                raise CheckpointError(
                    f"network dims {q.dims} do not fit state dim {self.mdp.state_dim}")
        self._tables = None
        self._rho0 = None

    def reset(self, engine: Engine) -> None:
        self._tables = self.mdp.tables(engine.n_bus)
        self._rho0 = engine.initial_rho()

    def choose(self, state: IterateState, engine: Engine) -> RhoVector:
        if self._tables is None or self._rho0.values.shape[0] != engine.layout.n_constraints:
            self.reset(engine)
        if len(state.history) < self.mdp.n:
            return self._rho0
        s = build_states(state, self.mdp.n, self.mdp.state_transform)
        cat = engine.layout.category
        a_pq = select_actions(self.q_pq, s[cat == PQ], 0.0, None)
        a_vt = select_actions(self.q_vtheta, s[cat == VTHETA], 0.0, None)
        return actions_to_rho(engine, a_pq, a_vt, self._tables)


def checkpoint_paths(directory) -> tuple[Path, Path]:
    d = Path(directory)
    return d / "q_pq.json", d / "q_vtheta.json"


def save_checkpoints(directory, q_pq: QNetwork, q_vt: QNetwork, mdp: MdpConfig,
                     seed: int | None = None) -> tuple[Path, Path]:
    p_pq, p_vt = checkpoint_paths(directory)
    Path(directory).mkdir(parents=True, exist_ok=True)
    for net, cat, path in ((q_pq, "pq", p_pq), (q_vt, "vtheta", p_vt)):
        net.save(path, category=cat, mdp=mdp.to_dict(), training_seed=seed)
    return p_pq, p_vt


def deploy_policy(path_pq, path_vtheta, mdp: MdpConfig | None = None) -> RLPolicy:
    q_pq, meta = QNetwork.load(path_pq)
    if mdp is None:
        mdp = MdpConfig.from_dict(meta.get("mdp", {}))
    dims = mdp.layer_dims(hidden=q_pq.dims[1], depth=len(q_pq.dims) - 1)
    if q_pq.dims != dims:
        raise CheckpointError(f"pq checkpoint dims {q_pq.dims} do not match {dims}")
    q_vt, _ = QNetwork.load(path_vtheta, expect_dims=dims)
    return RLPolicy(q_pq, q_vt, mdp)


# ---------------------------------------------------------------------------
# training


LOG_FIELDS = ("episode", "iterations", "return", "epsilon", "wall_time", "converged")


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, nets: tuple[QNetwork, QNetwork]):
        super().__init__(message)
        self.nets = nets


class _Learner:
    """Online/frozen network pair, optimizer and replay for one category."""

    def __init__(self, dims, mdp: MdpConfig, tc: TrainConfig, rng, net: QNetwork | None = None):
        self.online = net.copy() if net is not None else QNetwork(dims, rng)
        self.frozen = self.online.copy()
        self.opt = MomentumSGD(tc.lr, tc.momentum, tc.grad_clip)
        self.replay = PrioritizedReplay(tc.replay_capacity, mdp.state_dim, tc.alpha_per, tc.eps_per)
        self.updates = 0
        self.mdp = mdp
        self.tc = tc

    def learn(self, rng, beta: float) -> float | None:
        if len(self.replay) < max(self.tc.warmup, self.tc.batch_size):
            return None
        idx, s, a, r, s2, done, w = self.replay.sample(self.tc.batch_size, rng, beta)
        target = double_q_target(self.online, self.frozen, r, s2, done, self.mdp.gamma)
        loss, grads, td = self.online.loss_and_grad(s, a, target, w)
        self.opt.step(self.online.parameters(), grads)
        self.replay.update_priorities(idx, td)
        self.updates += 1
        if self.updates % self.tc.target_sync == 0:
            self.frozen.load_from(self.online)
        return loss


@dataclass
class TrainResult:
    q_pq: QNetwork
    q_vtheta: QNetwork
    log: list[dict] = field(default_factory=list)


def train(engine: Engine, mdp: MdpConfig | None = None, tc: TrainConfig | None = None, *,
          init: tuple[QNetwork, QNetwork] | None = None, start_episode: int = 0,
          log_sink=None, checkpoint_dir=None) -> TrainResult:
    """Q-learning over complete ADMM solves (one episode per solve).

    For the first ``n`` iterations of every episode the initial penalties are
    used; afterwards each iteration selects ε-greedy actions per constraint,
    probes the baseline step, takes the learned step, stores one transition
    per constraint with the shared reward, and does one prioritized
    minibatch update per network.
    """
    mdp = mdp or MdpConfig()
    tc = tc or TrainConfig()
    rng = np.random.Generator(np.random.PCG64([tc.seed, start_episode]))
    dims = mdp.layer_dims(hidden=tc.hidden)
    learners = [_Learner(dims, mdp, tc, rng, init[c] if init else None) for c in (PQ, VTHETA)]
    tables = mdp.tables(engine.n_bus)
    cat = engine.layout.category
    masks = (cat == PQ, cat == VTHETA)
    rho0 = engine.initial_rho()
    tol = engine.tol
    result_log: list[dict] = []
    t_start = time.perf_counter()

    def snapshot_nets():
        return learners[0].online.copy(), learners[1].online.copy()

    last_good = snapshot_nets()
    for episode in range(start_episode, start_episode + tc.episodes):
        eps = tc.epsilon(episode)
        beta = tc.beta(episode)
        state = engine.cold_start()
        ret = 0.0
        try:
            while True:
                if len(state.history) < mdp.n:
                    state = engine.step(state, rho0)
                else:
                    s = build_states(state, mdp.n, mdp.state_transform)
                    acts = [select_actions(learners[c].online, s[masks[c]], eps, rng)
                            for c in (PQ, VTHETA)]
                    rho = actions_to_rho(engine, acts[0], acts[1], tables)
                    probe = reward_baseline(engine, state, rho, mdp.baseline_rho)
                    nxt = probe.state
                    r_b = probe.reward if probe.fallback else mdp.advantage_sign * probe.reward
                    r_conv = reward_conv(nxt.primal_norm, nxt.dual_norm, tol, mdp.conv_bonus)
                    reward = total_reward(r_conv, r_b)
                    if not math.isfinite(reward):
                        reward = -1.0 if nxt.diverged else 0.0
                    done = nxt.converged or nxt.diverged or nxt.k >= tol.max_iter
                    s2 = build_states(nxt, mdp.n, mdp.state_transform)
                    for c in (PQ, VTHETA):
                        m = masks[c]
                        learners[c].replay.add_batch(s[m], acts[c], reward, s2[m], done)
                        learners[c].learn(rng, beta)
                    ret += reward
                    state = nxt
                if state.converged or state.diverged or state.k >= tol.max_iter:
                    break
        except NonFiniteError as exc:
            if checkpoint_dir is not None:
                save_checkpoints(checkpoint_dir, *last_good, mdp, tc.seed)
            raise TrainingAborted(f"episode {episode}: {exc}", last_good) from exc
        except (StepError, SolverFailure) as exc:
            log.warning("episode %d ended by solver failure: %s", episode, exc)
        last_good = snapshot_nets()
        row = {"episode": episode, "iterations": state.k, "return": ret, "epsilon": eps,
               "wall_time": time.perf_counter() - t_start, "converged": bool(state.converged)}
        result_log.append(row)
        log.info("episode %d: %d iterations, return %.3f, eps %.3f",
                 episode, state.k, ret, eps)
        if log_sink is not None:
            log_sink(row)
    return TrainResult(learners[0].online, learners[1].online, result_log)


def write_log(path, rows: list[dict], append: bool = False) -> None:
    exists = Path(path).exists() and append
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        if not exists:
            w.writeheader()
        for row in rows:
            w.writerow({k: row[k] for k in LOG_FIELDS})
