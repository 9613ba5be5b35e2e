"""Spatio-temporal hypergraph classifier over per-visit feature matrices.

Per visit the convolution weight state evolves continuously over the
inter-visit gap, is refined by two GRU cells against a shared baseline, and
drives one hypergraph convolution.  A learned feature mask and per-visit
edge probabilities provide the sparsified (interpretable) path next to the
dense one; node-pooled visit vectors are averaged and scored by a small MLP.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import hypergraph as hg
from . import nn
from . import sde as sde_mod
from .autodiff import Tensor
from .nn import ParameterStore
from .reconstruction import VisitFeatures
from .sde import derive_seed

TEMPORAL_MODES = ("sde", "ode", "rnn")
CHECKPOINT_MAGIC = b"SDEHGNN1"


@dataclass
class ModelConfig:
    n_rois: int
    embed_dim: int = 4
    n_neighbors: int = 10
    scale: float = 1.0
    temporal_mode: str = "sde"
    sparsity: bool = True
    solver_steps: int = 10
    drift_hidden: int = 32
    mlp_hidden: int = 16
    self_in_k: bool = False
    ce_path: str = "dense"
    seed: int = 0

    def validate(self) -> None:
        if self.n_rois < 2 or self.embed_dim < 1 or self.mlp_hidden < 1:
            raise ValueError("model dimensions must be positive")
        if self.temporal_mode not in TEMPORAL_MODES:
            raise ValueError(f"temporal_mode must be one of {TEMPORAL_MODES}")
        if self.ce_path not in ("dense", "masked"):
            raise ValueError("ce_path must be 'dense' or 'masked'")
        max_k = self.n_rois if self.self_in_k else self.n_rois - 1
        if not 1 <= self.n_neighbors <= max_k:
            raise ValueError(f"n_neighbors must lie in [1, {max_k}] for {self.n_rois} nodes")
        if self.solver_steps < 1 or self.scale <= 0:
            raise ValueError("solver_steps and scale must be positive")

    @property
    def feat_dim(self) -> int:
        return self.n_rois  # rows are correlation profiles

    @property
    def state_dim(self) -> int:
        return self.feat_dim * self.embed_dim


class Model:
    """Parameter store plus the pieces wired by ``forward_subject``."""

    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = config
        self.store = ParameterStore()
        rng = np.random.default_rng(derive_seed(config.seed, "model-init"))
        d, d_l = config.feat_dim, config.embed_dim
        self.store.add("w0", nn.glorot(rng, d, d_l))
        self.drift = sde_mod.DriftNet(self.store, rng, "wdyn.f", config.state_dim,
                                      config.drift_hidden, zero_init=True)
        self.diffusion = sde_mod.DiffusionNet(self.store, rng, "wdyn.g", config.state_dim,
                                              kind="scalar", init_scale=0.02)
        nn.add_gru_cell(self.store, rng, "gru_a", d, config.state_dim)
        nn.add_gru_cell(self.store, rng, "gru_b", d, config.state_dim)
        self.store.add("mask.logits_x", np.zeros((config.n_rois, d)))
        self.store.add("mask.v", rng.normal(0.0, 0.01, size=d))
        nn.add_mlp(self.store, rng, "head", 2 * d_l, config.mlp_hidden, 1)


@dataclass
class PreparedVisit:
    time_months: float
    X: np.ndarray
    incidence: np.ndarray
    dense_sx: np.ndarray  # S @ X with unit edge weights, both constant
    const_X: Tensor = field(repr=False, default=None)
    const_sx: Tensor = field(repr=False, default=None)
    context: Tensor = field(repr=False, default=None)  # column mean of X


@dataclass
class PreparedSubject:
    subject_id: str
    visits: list


def prepare_subject(subject_id: str, visits: list, config: ModelConfig) -> PreparedSubject:
    """Precompute per-visit constants (hypergraph, dense operator, contexts)."""
    if not visits:
        raise ValueError(f"subject {subject_id}: empty visit list")
    times = [v.visit_time_months for v in visits]
    if any(b < a for a, b in zip(times, times[1:])):
        raise ValueError(f"subject {subject_id}: visit times must be nondecreasing")
    prepared = []
    for feat in visits:
        if feat.X.shape != (config.n_rois, config.feat_dim):
            raise ValueError(
                f"subject {subject_id}: feature matrix is {feat.X.shape}, "
                f"config expects {(config.n_rois, config.feat_dim)}")
        H = hg.build_incidence(feat.X, config.n_neighbors, scale=config.scale,
                               self_in_k=config.self_in_k)
        S = hg.build_propagation(H, np.ones(H.shape[1]))
        prepared.append(PreparedVisit(
            time_months=feat.visit_time_months,
            X=feat.X,
            incidence=H,
            dense_sx=S @ feat.X,
            const_X=ad.constant(feat.X),
            const_sx=ad.constant(S @ feat.X),
            context=ad.constant(feat.X.mean(axis=0)),
        ))
    return PreparedSubject(subject_id=subject_id, visits=prepared)


def evolve_weights(prev_w: Tensor, dt_months: float, f, g, mode: str,
                   solver_steps: int, path_seed: int = 0) -> Tensor:
    """Continuous evolution of the flattened weight state over one gap.

    ``f``/``g`` are (state, time) callables; mode 'rnn' (or a zero gap)
    passes the state through untouched, 'ode' drops the noise term.
    """
    if dt_months < 0:
        raise ValueError("inter-visit interval must be nonnegative")
    if mode not in TEMPORAL_MODES:
        raise ValueError(f"unknown temporal mode {mode!r}")
    if mode == "rnn" or dt_months == 0.0:
        return prev_w
    shape = prev_w.shape
    flat = prev_w.reshape(prev_w.size)
    path = None
    if mode == "ode":
        g = None
    elif g is not None:
        path = sde_mod.BrownianPath(path_seed, solver_steps,
                                    dt_months / solver_steps, (prev_w.size,))
    traj = sde_mod.sde_solve(f, g, flat, 0.0, dt_months, solver_steps, path)
    return traj.states[-1].reshape(shape)


def refine_weights(p, context: Tensor, w_prime: Tensor, w0: Tensor, shape) -> Tensor:
    """Two GRU cells against the evolved state and the shared baseline."""
    d, d_l = shape
    a = nn.gru_cell(p, "gru_a", context, w_prime.reshape(d * d_l))
    b = nn.gru_cell(p, "gru_b", context, w0.reshape(d * d_l))
    return (a + b).reshape(d, d_l)


def hconv(s: Tensor, x: Tensor, w: Tensor) -> Tensor:
    """ReLU hypergraph convolution: sigma(S X W)."""
    return (s @ x @ w).relu()


def sparse_forward(visit: PreparedVisit, p, w: Tensor):
    """Masked convolution path; returns (Z_hat, edge probs, edge logits)."""
    p_x = p["mask.logits_x"].sigmoid()
    x_masked = visit.const_X * p_x
    edge_logits = x_masked @ p["mask.v"]
    p_edge = edge_logits.sigmoid()
    s_sparse = hg.build_sparse_propagation(visit.incidence, p_edge)
    z_hat = (s_sparse @ x_masked @ w).relu()
    return z_hat, p_edge, edge_logits


def _pool(z: Tensor) -> Tensor:
    return ad.concat([z.max(axis=0), z.mean(axis=0)])


@dataclass
class ForwardResult:
    logit: Tensor
    dense_logit: Tensor | None
    masked_logit: Tensor | None
    edge_probs: list          # per-visit P_E tensors (empty when sparsity off)
    edge_logits: list
    masked_outputs: list      # per-visit Z_hat tensors


def forward_subject(p, model: Model, subject: PreparedSubject) -> ForwardResult:
    cfg = model.config
    if not subject.visits:
        raise ValueError("empty visit list")
    w0 = p["w0"]
    prev_w = w0
    prev_t = None
    dense_pooled = []
    masked_pooled = []
    edge_probs = []
    edge_logits = []
    masked_outputs = []
    drift_fn = model.drift.bind(p)
    diffusion_fn = model.diffusion.bind(p) if cfg.temporal_mode == "sde" else None
    for k, visit in enumerate(subject.visits):
        dt = 0.0 if prev_t is None else visit.time_months - prev_t
        prev_t = visit.time_months
        w_prime = evolve_weights(
            prev_w, dt, drift_fn, diffusion_fn, cfg.temporal_mode, cfg.solver_steps,
            path_seed=derive_seed(cfg.seed, subject.subject_id, k))
        w = refine_weights(p, visit.context, w_prime, w0, (cfg.feat_dim, cfg.embed_dim))
        prev_w = w
        dense_pooled.append(_pool((visit.const_sx @ w).relu()))
        if cfg.sparsity:
            z_hat, p_edge, e_logits = sparse_forward(visit, p, w)
            masked_pooled.append(_pool(z_hat))
            edge_probs.append(p_edge)
            edge_logits.append(e_logits)
            masked_outputs.append(z_hat)

    def head(pooled):
        avg = ad.stack(pooled).mean(axis=0) if len(pooled) > 1 else pooled[0]
        return nn.mlp(p, "head", avg, activation="relu").sum()

    dense_logit = head(dense_pooled)
    masked_logit = head(masked_pooled) if cfg.sparsity else None
    return ForwardResult(
        logit=masked_logit if cfg.sparsity else dense_logit,
        dense_logit=dense_logit,
        masked_logit=masked_logit,
        edge_probs=edge_probs,
        edge_logits=edge_logits,
        masked_outputs=masked_outputs,
    )


# -- checkpoint format -------------------------------------------------------


def save_checkpoint(path, config: ModelConfig, state: dict[str, np.ndarray]) -> None:
    """Binary layout: magic, u32 config-JSON length, config JSON, then per
    parameter: u32 name length, name, u8 rank, u32 dims, little-endian f64."""
    blob = json.dumps(asdict(config), sort_keys=True).encode("utf-8")
    out = bytearray()
    out += CHECKPOINT_MAGIC
    out += struct.pack("<I", len(blob))
    out += blob
    for name in state:
        arr = np.ascontiguousarray(state[name], dtype="<f8")
        nb = name.encode("utf-8")
        out += struct.pack("<I", len(nb))
        out += nb
        out += struct.pack("<B", arr.ndim)
        for dim in arr.shape:
            out += struct.pack("<I", dim)
        out += arr.tobytes()
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path):
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a model checkpoint (bad magic)")
    off = 8
    (blob_len,) = struct.unpack_from("<I", raw, off)
    off += 4
    config = ModelConfig(**json.loads(raw[off:off + blob_len].decode("utf-8")))
    off += blob_len
    state: dict[str, np.ndarray] = {}
    while off < len(raw):
        (name_len,) = struct.unpack_from("<I", raw, off)
        off += 4
        name = raw[off:off + name_len].decode("utf-8")
        off += name_len
        (rank,) = struct.unpack_from("<B", raw, off)
        off += 1
        shape = struct.unpack_from(f"<{rank}I", raw, off) if rank else ()
        off += 4 * rank
        count = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=off)
        off += 8 * count
        state[name] = arr.reshape(shape).astype(np.float64).copy()
    return config, state
