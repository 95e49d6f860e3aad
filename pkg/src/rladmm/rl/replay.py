"""Proportional prioritized experience replay backed by a sum tree."""

from __future__ import annotations

import numpy as np


class SumTree:
    """Binary sum tree over ``capacity`` leaves (array layout, root at 1)."""

    def __init__(self, capacity: int):
        size = 1
        while size < capacity:
            size *= 2
        self.size = size
        self.capacity = capacity
        self.tree = np.zeros(2 * size)

    @property
    def total(self) -> float:
        return float(self.tree[1])

    def update(self, idx: np.ndarray, values: np.ndarray) -> None:
        idx = np.asarray(idx, dtype=np.int64)
        node = idx + self.size
        self.tree[node] = values
        node = np.unique(node // 2)
        while node[0] >= 1:
            self.tree[node] = self.tree[2 * node] + self.tree[2 * node + 1]
            if node[0] == 1:
                break
            node = np.unique(node // 2)

    def leaves(self, n: int) -> np.ndarray:
        return self.tree[self.size:self.size + n]

    def find(self, mass: np.ndarray) -> np.ndarray:
        """Leaf index holding each cumulative ``mass`` value."""
        node = np.ones(len(mass), dtype=np.int64)
        mass = np.array(mass, dtype=float)
        while node[0] < self.size:
            left = self.tree[2 * node]
            right = mass > left
            mass = np.where(right, mass - left, mass)
            node = 2 * node + right
        return node - self.size


class PrioritizedReplay:
    """Transitions ``(s, a, r, s', done)`` sampled with probability ``∝ p^α``.

    New transitions enter with the current maximum priority. When full, the
    oldest entries are overwritten first.
    """

    def __init__(self, capacity: int, state_dim: int, alpha: float = 0.6, eps: float = 1e-3):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.alpha = alpha
        self.eps = eps
        self.tree = SumTree(capacity)
        self.s = np.zeros((capacity, state_dim))
        self.s2 = np.zeros((capacity, state_dim))
        self.a = np.zeros(capacity, dtype=np.int64)
        self.r = np.zeros(capacity)
        self.done = np.zeros(capacity, dtype=bool)
        self.priority = np.zeros(capacity)
        self.pos = 0
        self.count = 0
        self.max_priority = 1.0

    def __len__(self) -> int:
        return self.count

    def add_batch(self, s, a, r, s2, done, priority=None) -> None:
        n = len(a)
        if n == 0:
            return
        if n > self.capacity:
            s, a, s2 = s[-self.capacity:], a[-self.capacity:], s2[-self.capacity:]
            r = np.broadcast_to(r, (n,))[-self.capacity:]
            done = np.broadcast_to(done, (n,))[-self.capacity:]
            n = self.capacity
        idx = (self.pos + np.arange(n)) % self.capacity
        self.s[idx] = s
        self.s2[idx] = s2
        self.a[idx] = a
        self.r[idx] = r
        self.done[idx] = done
        p = np.full(n, self.max_priority) if priority is None else np.asarray(priority, float)
        if not np.all(p > 0):
            raise ValueError("priorities must be positive")
        self.priority[idx] = p
        self.tree.update(idx, p ** self.alpha)
        self.pos = int((self.pos + n) % self.capacity)
        self.count = min(self.count + n, self.capacity)

    def probabilities(self) -> np.ndarray:
        leaves = self.tree.leaves(self.count)
        return leaves / leaves.sum()

    def sample(self, batch: int, rng: np.random.Generator, beta: float = 0.4,
               stratified: bool = True):
        """Return ``(idx, s, a, r, s2, done, is_weights)``."""
        if self.count == 0:
            raise ValueError("cannot sample from an empty buffer")
        total = self.tree.total
        if stratified:
            mass = (np.arange(batch) + rng.random(batch)) * (total / batch)
        else:
            mass = rng.random(batch) * total
        idx = self.tree.find(mass)
        idx = np.minimum(idx, self.count - 1)
        leaves = self.tree.leaves(self.count)
        # guard against landing on an empty leaf through rounding
        zero = leaves[idx] <= 0
        if np.any(zero):
            idx[zero] = int(np.argmax(leaves))
        probs = leaves[idx] / total
        w = (self.count * probs) ** (-beta)
        w = w / w.max()
        return idx, self.s[idx], self.a[idx], self.r[idx], self.s2[idx], self.done[idx], w

    def update_priorities(self, idx: np.ndarray, td: np.ndarray) -> None:
        p = np.abs(np.asarray(td, dtype=float)) + self.eps
        self.priority[idx] = p
        self.tree.update(idx, p ** self.alpha)
        self.max_priority = max(self.max_priority, float(p.max()))
