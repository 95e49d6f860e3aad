"""Fully-connected Q-network with analytic backpropagation (float64)."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

FORMAT_VERSION = 1
DEFAULT_DIMS = (40, 256, 256, 256, 10)


class NonFiniteError(FloatingPointError):
    """Raised when activations or the loss stop being finite."""


class CheckpointError(ValueError):
    pass


class QNetwork:
    """ReLU MLP mapping a state vector to one value per action.

    ``weights[l]`` has shape ``(dims[l], dims[l+1])`` so a batch of states
    of shape ``(batch, dims[0])`` is propagated as ``h @ W + b``.
    """

    def __init__(self, dims=DEFAULT_DIMS, rng: np.random.Generator | None = None):
        self.dims = tuple(int(d) for d in dims)
        if len(self.dims) < 2:
            raise ValueError("need at least an input and an output layer")
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for fan_in, fan_out in zip(self.dims[:-1], self.dims[1:]):
            if rng is None:
                self.weights.append(np.zeros((fan_in, fan_out)))
                self.biases.append(np.zeros(fan_out))
            else:
                bound = 1.0 / np.sqrt(fan_in)
                self.weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
                self.biases.append(rng.uniform(-bound, bound, size=fan_out))

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def copy(self) -> "QNetwork":
        other = QNetwork.__new__(QNetwork)
        other.dims = self.dims
        other.weights = [w.copy() for w in self.weights]
        other.biases = [b.copy() for b in self.biases]
        return other

    def load_from(self, other: "QNetwork") -> None:
        for dst, src in zip(self.weights + self.biases, other.weights + other.biases):
            dst[...] = src

    # -- forward / backward --------------------------------------------------

    def forward(self, s: np.ndarray, keep: bool = False):
        h = np.atleast_2d(np.asarray(s, dtype=float))
        acts = [h]
        last = self.n_layers - 1
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if l < last:
                h = np.maximum(h, 0.0)
            acts.append(h)
        if not np.all(np.isfinite(h)):
            raise NonFiniteError("Q-network produced non-finite outputs")
        return (h, acts) if keep else h

    def __call__(self, s: np.ndarray) -> np.ndarray:
        q = self.forward(s)
        return q[0] if np.ndim(s) == 1 else q

    def loss_and_grad(self, s, a, target, weights=None):
        """Weighted mean of ``(Q(s, a) - target)^2`` and its parameter gradient.

        Returns ``(loss, grads, td)`` where ``grads`` is a list
        ``[dW_0, ..., dW_L, db_0, ..., db_L]`` and ``td = Q(s, a) - target``.
        """
        q, acts = self.forward(s, keep=True)
        n = q.shape[0]
        a = np.asarray(a, dtype=np.int64).reshape(n)
        target = np.asarray(target, dtype=float).reshape(n)
        wts = np.ones(n) if weights is None else np.asarray(weights, dtype=float).reshape(n)
        td = q[np.arange(n), a] - target
        loss = float(np.sum(wts * td * td) / n)
        if not np.isfinite(loss):
            raise NonFiniteError("non-finite training loss")
        delta = np.zeros_like(q)
        delta[np.arange(n), a] = 2.0 * wts * td / n
        dws = [None] * self.n_layers
        dbs = [None] * self.n_layers
        for l in range(self.n_layers - 1, -1, -1):
            dws[l] = acts[l].T @ delta
            dbs[l] = delta.sum(axis=0)
            if l > 0:
                delta = (delta @ self.weights[l].T) * (acts[l] > 0)
        return loss, dws + dbs, td

    def backward(self, s, target, a):
        """Gradient of ``(Q(s, a) - target)^2`` for a single state."""
        return self.loss_and_grad(np.atleast_2d(s), [a], [target])[1]

    # -- flat parameter view (for checks and optimizers) ---------------------

    def parameters(self) -> list[np.ndarray]:
        return self.weights + self.biases

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.parameters()])

    def set_flat(self, vec: np.ndarray) -> None:
        pos = 0
        for p in self.parameters():
            p[...] = vec[pos:pos + p.size].reshape(p.shape)
            pos += p.size

    # -- serialization -------------------------------------------------------

    def to_dict(self, category: str = "", **extra) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "category": category,
            "layer_dims": list(self.dims),
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
            **extra,
        }

    @classmethod
    def from_dict(cls, d: dict, expect_dims=None) -> "QNetwork":
        if d.get("format_version") != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint format {d.get('format_version')!r}")
        dims = tuple(d["layer_dims"])
        if expect_dims is not None and dims != tuple(expect_dims):
            raise CheckpointError(f"checkpoint layer dims {dims} do not match {tuple(expect_dims)}")
        net = cls(dims)
        for l, (w, b) in enumerate(zip(d["weights"], d["biases"])):
            w = np.asarray(w, dtype=float)
            b = np.asarray(b, dtype=float)
            if w.shape != net.weights[l].shape or b.shape != net.biases[l].shape:
                raise CheckpointError(f"layer {l} has shape {w.shape}, expected {net.weights[l].shape}")
            net.weights[l][...] = w
            net.biases[l][...] = b
        return net

    def save(self, path, category: str = "", **extra) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(category, **extra), fh)

    @classmethod
    def load(cls, path, expect_dims=None) -> tuple["QNetwork", dict]:
        with open(path) as fh:
            d = json.load(fh)
        return cls.from_dict(d, expect_dims), d


@dataclass
class MomentumSGD:
    """Heavy-ball SGD: ``v <- m v - lr g``; ``p <- p + v``."""

    lr: float = 1e-4
    momentum: float = 0.9
    clip_norm: float | None = 10.0

    def __post_init__(self):
        self._velocity: list[np.ndarray] | None = None

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> float:
        if self._velocity is None:
            self._velocity = [np.zeros_like(p) for p in params]
        gnorm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
        scale = 1.0
        if self.clip_norm is not None and gnorm > self.clip_norm:
            scale = self.clip_norm / gnorm
        for p, g, v in zip(params, grads, self._velocity):
            v *= self.momentum
            v -= self.lr * scale * g
            p += v
        return gnorm
