"""Seeded Brownian paths and Euler-Maruyama integration of neural SDEs.

The solver is fixed-step and fully differentiable through the tape; with a
zero diffusion it degrades to a deterministic first-order ODE integrator.
"""

from __future__ import annotations

import hashlib

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor


class DivergenceError(RuntimeError):
    """Integration produced a non-finite state."""


def derive_seed(*parts) -> int:
    """Stable 64-bit seed from heterogeneous parts (run seed, ids, indices)."""
    h = hashlib.blake2b(digest_size=8)
    for part in parts:
        h.update(str(part).encode("utf-8"))
        h.update(b"\x1f")
    return int.from_bytes(h.digest(), "little")


class BrownianPath:
    """Pre-sampled Gaussian increments, one row per solver step.

    Bit-reproducible for a given (seed, n_steps, dt, shape): each increment
    is Normal(0, dt) i.i.d. per state entry.
    """

    def __init__(self, seed: int, n_steps: int, dt: float, shape):
        if n_steps < 1:
            raise ValueError("BrownianPath needs at least one step")
        if dt <= 0:
            raise ValueError("BrownianPath needs a positive step size")
        self.seed = seed
        self.n_steps = int(n_steps)
        self.dt = float(dt)
        self.shape = tuple(int(s) for s in shape)
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
        self.increments = rng.normal(0.0, np.sqrt(self.dt), size=(self.n_steps, *self.shape))


class Trajectory:
    """Solver output: states[k] is the solution at times[k]."""

    def __init__(self, times: np.ndarray, states: list[Tensor]):
        self.times = times
        self.states = states

    def as_matrix(self) -> Tensor:
        return ad.stack(self.states)


class DriftNet:
    """Two-layer tanh perceptron mapping (state, time) -> state velocity."""

    def __init__(self, store: nn.ParameterStore, rng, prefix: str, dim: int, hidden: int,
                 zero_init: bool = True):
        self.prefix = prefix
        self.dim = dim
        nn.add_mlp(store, rng, prefix, dim + 1, hidden, dim, zero_last=zero_init)

    def bind(self, p: dict[str, Tensor]):
        def f(z: Tensor, t: float) -> Tensor:
            zt = _with_time(z, t)
            return nn.mlp(p, self.prefix, zt, activation="tanh")
        return f


class DiffusionNet:
    """Diagonal diffusion: a softplus-positive network, a learnable scalar,
    or identically zero (deterministic mode)."""

    def __init__(self, store: nn.ParameterStore, rng, prefix: str, dim: int, hidden: int = 0,
                 kind: str = "scalar", init_scale: float = 0.05):
        if kind not in ("network", "scalar", "zero"):
            raise ValueError(f"unknown diffusion kind {kind!r}")
        self.prefix = prefix
        self.kind = kind
        self.dim = dim
        if kind == "network":
            nn.add_mlp(store, rng, prefix, dim + 1, hidden, dim)
        elif kind == "scalar":
            # softplus(raw) == init_scale at initialization
            raw = np.log(np.expm1(init_scale))
            store.add(f"{prefix}.raw", np.array(raw))

    def bind(self, p: dict[str, Tensor]):
        if self.kind == "zero":
            return None
        if self.kind == "scalar":
            def g_scalar(z: Tensor, t: float) -> Tensor:
                return p[f"{self.prefix}.raw"].softplus()
            return g_scalar
        def g_net(z: Tensor, t: float) -> Tensor:
            return nn.mlp(p, self.prefix, _with_time(z, t), activation="tanh").softplus()
        return g_net


def _with_time(z: Tensor, t: float) -> Tensor:
    if z.ndim == 1:
        return ad.concat([z, ad.constant([t])])
    col = ad.constant(np.full((z.shape[0], 1), t))
    return ad.concat([z, col], axis=1)


def sde_solve(f, g, z0: Tensor, t0: float, t1: float, n_steps: int,
              path: BrownianPath | None = None) -> Trajectory:
    """Euler-Maruyama over [t0, t1]: z' = z + f dt + g dB per step.

    ``f`` and ``g`` are callables (state, time) -> Tensor, or None for zero.
    A path is required whenever g is present and must match the grid.
    """
    if t1 <= t0:
        raise ValueError(f"integration interval is empty: t1={t1} <= t0={t0}")
    if n_steps < 1:
        raise ValueError("n_steps must be at least 1")
    dt = (t1 - t0) / n_steps
    if g is not None:
        if path is None:
            raise ValueError("a BrownianPath is required when diffusion is present")
        if path.n_steps != n_steps or path.shape != tuple(z0.shape):
            raise ValueError(
                f"path grid ({path.n_steps}, {path.shape}) does not match "
                f"solve grid ({n_steps}, {tuple(z0.shape)})")
        if not np.isclose(path.dt, dt, rtol=1e-12, atol=0.0):
            raise ValueError(f"path dt {path.dt} does not match solver dt {dt}")

    times = t0 + dt * np.arange(n_steps + 1)
    times[-1] = t1
    states = [z0]
    z = z0
    for k in range(n_steps):
        t_k = times[k]
        nxt = z
        if f is not None:
            nxt = nxt + f(z, t_k) * dt
        if g is not None:
            nxt = nxt + g(z, t_k) * ad.constant(path.increments[k])
        if not np.all(np.isfinite(nxt.data)):
            raise DivergenceError(f"non-finite state at step {k + 1} of {n_steps}")
        states.append(nxt)
        z = nxt
    return Trajectory(times, states)


def interpolate_states(traj: Trajectory, query_times) -> list[Tensor]:
    """Linear interpolation between bracketing solver steps; exact on the grid."""
    times = traj.times
    t0, t1 = float(times[0]), float(times[-1])
    n = len(traj.states) - 1
    dt = (t1 - t0) / n
    out = []
    for q in np.asarray(query_times, dtype=np.float64):
        if q < t0 or q > t1:
            raise ValueError(f"query time {q} outside [{t0}, {t1}]; no extrapolation")
        k = min(int(np.floor((q - t0) / dt)), n - 1) if n > 0 else 0
        if q == times[k]:
            out.append(traj.states[k])
            continue
        if q == times[k + 1]:
            out.append(traj.states[k + 1])
            continue
        w = (q - times[k]) / dt
        out.append(traj.states[k] * (1.0 - w) + traj.states[k + 1] * w)
    return out


def interpolate(traj: Trajectory, query_times) -> Tensor:
    return ad.stack(interpolate_states(traj, query_times))
