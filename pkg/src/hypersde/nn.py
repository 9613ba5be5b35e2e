"""Parameter storage, initializers, small layers, and the Adam optimizer.

Parameters live as named numpy arrays in a ParameterStore; each training
step binds them as leaves on a fresh tape, runs forward/backward, and the
optimizer then updates the arrays in place.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor


class ParameterStore:
    """Named float64 arrays plus binding onto a tape for one step."""

    def __init__(self):
        self.arrays: dict[str, np.ndarray] = {}

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self.arrays:
            raise ValueError(f"duplicate parameter {name!r}")
        self.arrays[name] = np.asarray(value, dtype=np.float64).copy()

    def bind(self, tape: Tape) -> dict[str, Tensor]:
        return {name: tape.leaf(arr, requires_grad=True) for name, arr in self.arrays.items()}

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.arrays.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.arrays):
            missing = set(self.arrays) ^ set(state)
            raise ValueError(f"parameter names do not match: {sorted(missing)}")
        for k, v in state.items():
            if self.arrays[k].shape != v.shape:
                raise ValueError(f"shape mismatch for {k!r}: {self.arrays[k].shape} vs {v.shape}")
            self.arrays[k] = np.asarray(v, dtype=np.float64).copy()

    def names(self):
        return list(self.arrays)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    scale = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-scale, scale, size=(fan_in, fan_out))


def add_linear(store: ParameterStore, rng, prefix: str, fan_in: int, fan_out: int) -> None:
    store.add(f"{prefix}.w", glorot(rng, fan_in, fan_out))
    store.add(f"{prefix}.b", np.zeros(fan_out))


def linear(p: dict[str, Tensor], prefix: str, x: Tensor) -> Tensor:
    """Affine map for a vector (n,) or a batch matrix (B, n)."""
    w, b = p[f"{prefix}.w"], p[f"{prefix}.b"]
    h = x @ w
    return ad.add_rows(h, b) if h.ndim == 2 else h + b


def add_mlp(store: ParameterStore, rng, prefix: str, fan_in: int, hidden: int, fan_out: int,
            zero_last: bool = False) -> None:
    add_linear(store, rng, f"{prefix}.l1", fan_in, hidden)
    add_linear(store, rng, f"{prefix}.l2", hidden, fan_out)
    if zero_last:
        store.arrays[f"{prefix}.l2.w"][:] = 0.0


def mlp(p: dict[str, Tensor], prefix: str, x: Tensor, activation: str = "tanh") -> Tensor:
    h = linear(p, f"{prefix}.l1", x)
    h = h.tanh() if activation == "tanh" else h.relu()
    return linear(p, f"{prefix}.l2", h)


GRU_GATES = ("z", "r", "n")


def add_gru_cell(store: ParameterStore, rng, prefix: str, input_dim: int, hidden_dim: int) -> None:
    for gate in GRU_GATES:
        store.add(f"{prefix}.w{gate}", glorot(rng, input_dim, hidden_dim))
        store.add(f"{prefix}.u{gate}", glorot(rng, hidden_dim, hidden_dim))
        store.add(f"{prefix}.b{gate}", np.zeros(hidden_dim))


def _gate(p, prefix, gate, x, h):
    pre = x @ p[f"{prefix}.w{gate}"] + h @ p[f"{prefix}.u{gate}"]
    b = p[f"{prefix}.b{gate}"]
    return ad.add_rows(pre, b) if pre.ndim == 2 else pre + b


def gru_cell(p: dict[str, Tensor], prefix: str, x: Tensor, h: Tensor) -> Tensor:
    """One GRU update; works for vectors or row-batched matrices."""
    z = _gate(p, prefix, "z", x, h).sigmoid()
    r = _gate(p, prefix, "r", x, h).sigmoid()
    pre_n = x @ p[f"{prefix}.wn"] + r * (h @ p[f"{prefix}.un"])
    bn = p[f"{prefix}.bn"]
    n = (ad.add_rows(pre_n, bn) if pre_n.ndim == 2 else pre_n + bn).tanh()
    one = ad.constant(1.0)
    return (one - z) * n + z * h


class Adam:
    """Adaptive moment estimation with bias correction."""

    def __init__(self, store: ParameterStore, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.store = store
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in store.arrays.items()}
        self.v = {k: np.zeros_like(v) for k, v in store.arrays.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, arr in self.store.arrays.items():
            g = grads.get(name)
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            arr -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def collect_grads(bound: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {name: leaf.grad for name, leaf in bound.items() if leaf.grad is not None}


def accumulate_grads(total: dict[str, np.ndarray], bound: dict[str, Tensor]) -> None:
    for name, leaf in bound.items():
        if leaf.grad is None:
            continue
        if name in total:
            total[name] += leaf.grad
        else:
            total[name] = leaf.grad.copy()
