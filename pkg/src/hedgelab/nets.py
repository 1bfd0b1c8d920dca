"""Minimal neural toolkit: feed-forward nets with explicit gradients, Adam,
soft target updates, and a proportional prioritized replay buffer.

Networks store all weights and biases in one flat float64 vector; per-layer
matrices are views into it, so optimizers and checkpoints operate on a single
array. Hidden activation is ReLU; the output is identity (critics) or a
logistic squashed to [0, 1] (actor).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import EpisodeStateError, ValidationError

OUTPUT_ACTIVATIONS = ("identity", "sigmoid")

_CHECKPOINT_MAGIC = b"HLNET"
_CHECKPOINT_VERSION = 1


def param_count(layer_sizes: list[int]) -> int:
    return sum((fan_in + 1) * fan_out for fan_in, fan_out in zip(layer_sizes, layer_sizes[1:]))


class Mlp:
    """Fully connected net. `params` is the flat parameter vector; layer
    weights/biases are row-major views into it."""

    def __init__(self, layer_sizes: list[int], output: str, params: np.ndarray):
        if len(layer_sizes) < 2:
            raise ValidationError("need at least input and output layer sizes")
        if output not in OUTPUT_ACTIVATIONS:
            raise ValidationError(f"output must be one of {OUTPUT_ACTIVATIONS}, got {output!r}")
        expected = param_count(layer_sizes)
        if params.shape != (expected,):
            raise ValidationError(
                f"parameter vector has length {params.shape}, expected ({expected},)"
            )
        self.layer_sizes = list(layer_sizes)
        self.output = output
        self.params = params
        self._views = []
        offset = 0
        for fan_in, fan_out in zip(layer_sizes, layer_sizes[1:]):
            w = self.params[offset : offset + fan_in * fan_out].reshape(fan_out, fan_in)
            offset += fan_in * fan_out
            b = self.params[offset : offset + fan_out]
            offset += fan_out
            self._views.append((w, b))

    @classmethod
    def init(
        cls,
        layer_sizes: list[int],
        output: str,
        rng: np.random.Generator,
        last_layer_scale: float = 1.0,
    ) -> "Mlp":
        """Uniform fan-in initialization, U(-1/sqrt(fan_in), 1/sqrt(fan_in));
        `last_layer_scale` shrinks the final layer (near-zero for an actor whose
        initial output should sit mid-range)."""
        chunks = []
        n_layers = len(layer_sizes) - 1
        for idx, (fan_in, fan_out) in enumerate(zip(layer_sizes, layer_sizes[1:])):
            bound = 1.0 / np.sqrt(fan_in)
            if idx == n_layers - 1:
                bound *= last_layer_scale
            chunks.append(rng.uniform(-bound, bound, size=(fan_in + 1) * fan_out))
        return cls(layer_sizes, output, np.concatenate(chunks))

    def copy(self) -> "Mlp":
        return Mlp(self.layer_sizes, self.output, self.params.copy())

    def _apply_output(self, z: np.ndarray) -> np.ndarray:
        if self.output == "sigmoid":
            return 1.0 / (1.0 + np.exp(-z))
        return z

    def forward(self, x: np.ndarray) -> np.ndarray:
        y, _ = self.forward_cached(x)
        return y

    def forward_cached(self, x: np.ndarray):
        """Returns (output, cache); accepts (d,) or (batch, d) inputs."""
        x = np.asarray(x, dtype=float)
        squeeze = x.ndim == 1
        h = x.reshape(1, -1) if squeeze else x
        if h.shape[1] != self.layer_sizes[0]:
            raise ValidationError(
                f"input width {h.shape[1]} does not match layer size {self.layer_sizes[0]}"
            )
        acts = [h]
        for li, (w, b) in enumerate(self._views):
            z = h @ w.T + b
            h = self._apply_output(z) if li == len(self._views) - 1 else np.maximum(z, 0.0)
            acts.append(h)
        out = acts[-1]
        return (out[0] if squeeze else out), (acts, squeeze)

    def backward(self, cache, upstream: np.ndarray, need_param_grad: bool = True):
        """Exact reverse-mode gradient of the forward map.

        `upstream` is dL/d(output) with the output's shape. Returns
        (flat parameter gradient or None, dL/d(input))."""
        acts, squeeze = cache
        g = np.asarray(upstream, dtype=float)
        if squeeze:
            g = g.reshape(1, -1)
        grad = np.zeros_like(self.params) if need_param_grad else None
        offset = len(self.params)
        for li in range(len(self._views) - 1, -1, -1):
            w, _ = self._views[li]
            h_out = acts[li + 1]
            if li == len(self._views) - 1:
                if self.output == "sigmoid":
                    g = g * h_out * (1.0 - h_out)
            else:
                g = g * (h_out > 0.0)
            h_in = acts[li]
            fan_out, fan_in = w.shape
            offset -= fan_out
            if need_param_grad:
                grad[offset : offset + fan_out] = g.sum(axis=0)
            offset -= fan_in * fan_out
            if need_param_grad:
                grad[offset : offset + fan_in * fan_out] = (g.T @ h_in).ravel()
            g = g @ w
        dx = g[0] if squeeze else g
        return grad, dx


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: np.ndarray, lr: float, **kw) -> "AdamState":
        return cls(m=np.zeros_like(params), v=np.zeros_like(params), t=0, lr=lr, **kw)


def adam_step(state: AdamState, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """One Adam update with bias correction; `params` is updated in place."""
    state.t += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * grad
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * grad**2
    m_hat = state.m / (1.0 - state.beta1**state.t)
    v_hat = state.v / (1.0 - state.beta2**state.t)
    params -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params


def soft_update(target: np.ndarray, source: np.ndarray, tau_soft: float) -> np.ndarray:
    """target <- (1 - tau)*target + tau*source, in place."""
    if not (0.0 < tau_soft <= 1.0):
        raise ValidationError(f"tau_soft must lie in (0, 1], got {tau_soft}")
    target *= 1.0 - tau_soft
    target += tau_soft * source
    return target


@dataclass(frozen=True)
class Transition:
    state: np.ndarray  # normalized triple
    action: float
    cost: float
    next_state: np.ndarray
    terminal: bool


class SumTree:
    """Binary indexed tree over nonnegative weights supporting O(log n)
    point updates and prefix search."""

    def __init__(self, capacity: int):
        self.leaf_base = 1
        while self.leaf_base < capacity:
            self.leaf_base *= 2
        self.tree = np.zeros(2 * self.leaf_base)

    @property
    def total(self) -> float:
        return float(self.tree[1])

    def set_one(self, index: int, value: float) -> None:
        tree = self.tree
        pos = index + self.leaf_base
        tree[pos] = value
        pos >>= 1
        while pos >= 1:
            tree[pos] = tree[2 * pos] + tree[2 * pos + 1]
            pos >>= 1

    def set(self, indices: np.ndarray, values: np.ndarray) -> None:
        # Recomputing parents from both children makes duplicate indices
        # harmless, so no dedup pass is needed.
        pos = np.asarray(indices) + self.leaf_base
        self.tree[pos] = values
        pos >>= 1
        while pos[0] >= 1:
            self.tree[pos] = self.tree[2 * pos] + self.tree[2 * pos + 1]
            if pos[0] == 1:
                break
            pos >>= 1

    def find(self, prefix: np.ndarray) -> np.ndarray:
        """Leaf index whose cumulative range contains each prefix sum."""
        pos = np.ones(len(prefix), dtype=np.int64)
        rem = np.array(prefix, dtype=float)
        while pos[0] < self.leaf_base:
            left = self.tree[2 * pos]
            go_right = rem >= left
            rem = np.where(go_right, rem - left, rem)
            pos = 2 * pos + go_right
        return pos - self.leaf_base


class ReplayBuffer:
    """Ring buffer with proportional prioritized sampling.

    Sampling probability of item i is p_i^alpha / sum_j p_j^alpha; importance
    weights are (N * P(i))^{-beta}, normalized by the largest weight in the
    batch. New transitions enter at the current maximum priority; after a
    training step, sampled priorities become |TD error| + 1e-6.
    """

    def __init__(self, capacity: int, alpha: float = 0.6, beta: float = 0.4):
        if capacity < 1:
            raise ValidationError(f"capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self.alpha = alpha
        self.beta = beta
        self.size = 0
        self._next = 0
        self.max_priority = 1.0
        self._tree = SumTree(capacity)
        self._states = np.zeros((capacity, 1))
        self._next_states = np.zeros((capacity, 1))
        self._actions = np.zeros(capacity)
        self._costs = np.zeros(capacity)
        self._terminals = np.zeros(capacity, dtype=bool)
        self._allocated_dim = None

    def _ensure_dim(self, dim: int) -> None:
        if self._allocated_dim is None:
            self._states = np.zeros((self.capacity, dim))
            self._next_states = np.zeros((self.capacity, dim))
            self._allocated_dim = dim

    def __len__(self) -> int:
        return self.size

    def push(self, transition: Transition, priority: float | None = None) -> None:
        state = np.asarray(transition.state, dtype=float)
        self._ensure_dim(state.shape[0])
        i = self._next
        self._states[i] = state
        self._next_states[i] = np.asarray(transition.next_state, dtype=float)
        self._actions[i] = transition.action
        self._costs[i] = transition.cost
        self._terminals[i] = transition.terminal
        p = self.max_priority if priority is None else float(priority)
        if p <= 0:
            raise ValidationError(f"priority must be positive, got {p}")
        self.max_priority = max(self.max_priority, p)
        self._tree.set_one(i, p**self.alpha)
        self._next = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size: int, rng: np.random.Generator):
        """Returns (states, actions, costs, next_states, terminals, weights, indices)."""
        if self.size == 0:
            raise EpisodeStateError("cannot sample from an empty replay buffer")
        total = self._tree.total
        u = rng.random(batch_size) * total
        idx = self._tree.find(u)
        # Guard against prefix==total edge rounding into padding leaves.
        idx = np.minimum(idx, self.size - 1)
        leaf = self._tree.tree[idx + self._tree.leaf_base]
        prob = leaf / total
        weights = (self.size * prob) ** (-self.beta)
        weights = weights / weights.max()
        return (
            self._states[idx],
            self._actions[idx],
            self._costs[idx],
            self._next_states[idx],
            self._terminals[idx],
            weights,
            idx,
        )

    def update_priorities(self, indices: np.ndarray, td_errors: np.ndarray) -> None:
        p = np.abs(np.asarray(td_errors, dtype=float)) + 1e-6
        self.max_priority = max(self.max_priority, float(p.max()))
        self._tree.set(np.asarray(indices), p**self.alpha)


def save_mlp(net: Mlp, path: str | Path) -> None:
    """Versioned binary checkpoint: layer sizes plus the flat parameter vector
    as little-endian float64."""
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_CHECKPOINT_MAGIC)
        fh.write(struct.pack("<H", _CHECKPOINT_VERSION))
        out_code = OUTPUT_ACTIVATIONS.index(net.output)
        fh.write(struct.pack("<H", out_code))
        fh.write(struct.pack("<I", len(net.layer_sizes)))
        fh.write(struct.pack(f"<{len(net.layer_sizes)}I", *net.layer_sizes))
        fh.write(struct.pack("<Q", len(net.params)))
        fh.write(net.params.astype("<f8").tobytes())


def load_mlp(path: str | Path) -> Mlp:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(len(_CHECKPOINT_MAGIC))
        if magic != _CHECKPOINT_MAGIC:
            raise ValidationError(f"{path} is not a network checkpoint")
        (version,) = struct.unpack("<H", fh.read(2))
        if version != _CHECKPOINT_VERSION:
            raise ValidationError(f"unsupported checkpoint version {version}")
        (out_code,) = struct.unpack("<H", fh.read(2))
        (n_sizes,) = struct.unpack("<I", fh.read(4))
        sizes = list(struct.unpack(f"<{n_sizes}I", fh.read(4 * n_sizes)))
        (n_params,) = struct.unpack("<Q", fh.read(8))
        params = np.frombuffer(fh.read(8 * n_params), dtype="<f8").astype(float)
    return Mlp(sizes, OUTPUT_ACTIVATIONS[out_code], params)


def save_sidecar(path: str | Path, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_sidecar(path: str | Path) -> dict:
    with open(path) as fh:
        return json.load(fh)
