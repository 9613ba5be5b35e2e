"""Irregular-scan reconstruction: GRU encoder, latent SDE, decoder.

The encoder reads each scan column by column (values zero-filled at missing
entries, the observation mask, and the time gap since the previous sample)
and produces a Gaussian posterior over the initial latent state.  The
latent state then evolves through a neural SDE across the scan and a small
decoder maps interpolated states back to channel space.  Visit features are
the Pearson correlations of the reconstructed channels.

Scans sharing a sample grid are trained as one batch; scan time is mapped
to [0, 1] before integration so step sizes are comparable across grids.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from . import autodiff as ad
from . import nn
from . import sde as sde_mod
from .autodiff import Tape, Tensor
from .cohort import ScanSeries, SubjectRecord
from .nn import ParameterStore
from .sde import BrownianPath, derive_seed


@dataclass
class LatentPosterior:
    mean: Tensor
    log_variance: Tensor


@dataclass
class VisitFeatures:
    """Per-visit node feature matrix: each row is one channel's correlation
    profile, so the feature dimension equals the channel count."""

    X: np.ndarray
    visit_time_months: float

    def validate(self) -> None:
        n, d = self.X.shape
        if n != d:
            raise ValueError(f"feature matrix must be square, got {self.X.shape}")
        if np.max(np.abs(np.diag(self.X) - 1.0)) > 1e-12:
            raise ValueError("feature matrix diagonal must be 1")
        if np.max(np.abs(self.X - self.X.T)) > 1e-12:
            raise ValueError("feature matrix must be symmetric")
        if np.min(self.X) < -1 - 1e-12 or np.max(self.X) > 1 + 1e-12:
            raise ValueError("feature entries must lie in [-1, 1]")


# -- architecture ----------------------------------------------------------


def build_parameters(n_channels: int, latent_dim: int, encoder_hidden: int,
                     decoder_hidden: int, drift_hidden: int, diffusion: str,
                     mode: str, seed: int):
    store = ParameterStore()
    rng = np.random.default_rng(derive_seed(seed, "recon-init"))
    input_dim = 2 * n_channels + 1
    nn.add_gru_cell(store, rng, "enc.gru", input_dim, encoder_hidden)
    nn.add_linear(store, rng, "enc.mu", encoder_hidden, latent_dim)
    nn.add_linear(store, rng, "enc.logvar", encoder_hidden, latent_dim)
    # dynamics start non-zero: a flat initial trajectory stalls training badly
    drift = sde_mod.DriftNet(store, rng, "dyn.f", latent_dim, drift_hidden, zero_init=False)
    kind = "zero" if mode == "ode" else diffusion
    diff = sde_mod.DiffusionNet(store, rng, "dyn.g", latent_dim, hidden=drift_hidden, kind=kind)
    nn.add_mlp(store, rng, "dec", latent_dim, decoder_hidden, n_channels)
    return store, drift, diff


def _encoder_inputs(scans: list[ScanSeries]) -> list[np.ndarray]:
    """Per-time-step constant input blocks [values | mask | dt] of shape (B, 2N+1)."""
    times = scans[0].sample_times
    values = np.stack([s.signals * s.observed for s in scans])  # (B, N, L)
    masks = np.stack([s.observed.astype(np.float64) for s in scans])
    steps = []
    prev_t = times[0]
    for t_idx in range(len(times)):
        dt = times[t_idx] - prev_t
        prev_t = times[t_idx]
        block = np.concatenate(
            [values[:, :, t_idx], masks[:, :, t_idx],
             np.full((len(scans), 1), dt)], axis=1)
        steps.append(block)
    return steps


def encode_batch(p, scans: list[ScanSeries], encoder_hidden: int) -> LatentPosterior:
    """Posterior over z0 for scans sharing one sample grid."""
    h = ad.constant(np.zeros((len(scans), encoder_hidden)))
    for block in _encoder_inputs(scans):
        h = nn.gru_cell(p, "enc.gru", ad.constant(block), h)
    return LatentPosterior(
        mean=nn.linear(p, "enc.mu", h),
        log_variance=nn.linear(p, "enc.logvar", h),
    )


def encode(p, scan: ScanSeries, encoder_hidden: int) -> LatentPosterior:
    scan.validate()
    if scan.observed.sum() < 2:
        raise ValueError("scan has fewer than 2 observed samples in total")
    post = encode_batch(p, [scan], encoder_hidden)
    return LatentPosterior(mean=post.mean.row(0), log_variance=post.log_variance.row(0))


def sample_initial_state(post: LatentPosterior, eps: np.ndarray | None) -> Tensor:
    """Reparameterized draw; with eps None the posterior mean is used."""
    if eps is None:
        return post.mean
    return post.mean + (post.log_variance * 0.5).exp() * ad.constant(eps)


def latent_trajectory(drift, diff, p, z0: Tensor, solver_steps: int,
                      path: BrownianPath | None) -> sde_mod.Trajectory:
    return sde_mod.sde_solve(drift.bind(p), diff.bind(p), z0, 0.0, 1.0, solver_steps, path)


def decode_states(p, states: list[Tensor]) -> list[Tensor]:
    return [nn.mlp(p, "dec", z, activation="tanh") for z in states]


def _normalize_times(sample_times: np.ndarray, query_times: np.ndarray) -> np.ndarray:
    t0, t1 = sample_times[0], sample_times[-1]
    span = t1 - t0
    if span <= 0:
        raise ValueError("scan must span a positive time interval")
    q = (np.asarray(query_times, dtype=np.float64) - t0) / span
    if np.any(q < 0) or np.any(q > 1):
        raise ValueError("query times must lie within the scan's time span")
    return q


def reconstruct(p, scan: ScanSeries, drift, diff, encoder_hidden: int,
                solver_steps: int, query_times, rng=None, path_seed=None) -> Tensor:
    """Reconstructed channel values at the query times, shape (N, len(query))."""
    post = encode(p, scan, encoder_hidden)
    eps = rng.normal(size=post.mean.shape) if rng is not None else None
    z0 = sample_initial_state(post, eps)
    path = None
    if diff.kind != "zero":
        dt = 1.0 / solver_steps
        path = BrownianPath(path_seed if path_seed is not None else 0,
                            solver_steps, dt, z0.shape)
    traj = latent_trajectory(drift, diff, p, z0, solver_steps, path)
    queries = _normalize_times(scan.sample_times, query_times)
    states = sde_mod.interpolate_states(traj, queries)
    columns = decode_states(p, states)
    return ad.stack(columns).T  # (N, L')


def recon_loss(scan: ScanSeries, reconstruction: Tensor, post: LatentPosterior,
               beta: float) -> Tensor:
    """Masked mean squared error plus beta times the closed-form KL to N(0, I)."""
    if tuple(reconstruction.shape) != scan.signals.shape:
        raise ValueError(
            f"reconstruction shape {tuple(reconstruction.shape)} does not match "
            f"scan shape {scan.signals.shape}")
    mask = ad.constant(scan.observed.astype(np.float64))
    target = ad.constant(scan.signals)
    err = (reconstruction - target) * mask
    mse = (err * err).sum() / float(scan.observed.sum())
    return mse + float(beta) * gaussian_kl(post)


def gaussian_kl(post: LatentPosterior) -> Tensor:
    mu, lv = post.mean, post.log_variance
    return (mu * mu + lv.exp() - lv - 1.0).sum() * 0.5


def features_from_recon(recon: np.ndarray, visit_time_months: float = 0.0) -> VisitFeatures:
    """Pearson correlation profile of the reconstructed channels."""
    recon = np.asarray(recon, dtype=np.float64)
    if recon.ndim != 2 or recon.shape[1] < 3:
        raise ValueError("need at least 3 reconstructed samples per channel")
    sd = recon.std(axis=1)
    if np.any(sd == 0):
        dead = np.flatnonzero(sd == 0).tolist()
        raise ValueError(f"zero-variance reconstructed channels: {dead}")
    corr = np.corrcoef(recon)
    corr = 0.5 * (corr + corr.T)
    np.clip(corr, -1.0, 1.0, out=corr)
    np.fill_diagonal(corr, 1.0)
    feats = VisitFeatures(X=corr, visit_time_months=visit_time_months)
    feats.validate()
    return feats


# -- estimator --------------------------------------------------------------


class SignalReconstructor(BaseEstimator, TransformerMixin):
    """Trains the reconstruction stage on a cohort and emits visit features.

    ``fit`` consumes a list of SubjectRecord; ``transform`` returns, per
    subject, the time-ordered list of VisitFeatures computed from the
    reconstructed scans.  Both are deterministic for a fixed seed.
    """

    def __init__(self, latent_dim=16, encoder_hidden=32, decoder_hidden=32,
                 drift_hidden=32, diffusion="network", mode="sde", kl_beta=1e-3,
                 epochs=40, batch_size=32, learning_rate=3e-3, solver_steps=20,
                 seed=0):
        self.latent_dim = latent_dim
        self.encoder_hidden = encoder_hidden
        self.decoder_hidden = decoder_hidden
        self.drift_hidden = drift_hidden
        self.diffusion = diffusion
        self.mode = mode
        self.kl_beta = kl_beta
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.solver_steps = solver_steps
        self.seed = seed

    # internal: scans grouped by identical sample grids batch together
    @staticmethod
    def _grid_key(scan: ScanSeries):
        return scan.sample_times.tobytes()

    def _collect_scans(self, subjects):
        scans = []
        for subject in subjects:
            subject.validate()
            for visit_idx, (_, scan) in enumerate(subject.visits):
                scan.validate()
                scans.append((subject.subject_id, visit_idx, scan))
        if not scans:
            raise ValueError("no scans in cohort")
        return scans

    def fit(self, X, y=None):
        subjects = list(X)
        scans = self._collect_scans(subjects)
        n_channels = scans[0][2].n_channels
        if any(s.n_channels != n_channels for _, _, s in scans):
            raise ValueError("all scans must share a channel count")
        self.n_channels_ = n_channels
        store, drift, diff = build_parameters(
            n_channels, self.latent_dim, self.encoder_hidden, self.decoder_hidden,
            self.drift_hidden, self.diffusion, self.mode, self.seed)
        self.store_, self._drift, self._diff = store, drift, diff

        optimizer = nn.Adam(store, lr=self.learning_rate)
        rng = np.random.default_rng(derive_seed(self.seed, "recon-train"))
        order_rng = np.random.default_rng(derive_seed(self.seed, "recon-order"))
        self.history_ = []
        for epoch in range(self.epochs):
            order = order_rng.permutation(len(scans))
            batches = self._batch_indices(scans, order)
            epoch_loss = 0.0
            n_batches = 0
            for batch in batches:
                loss_val = self._train_batch([scans[i] for i in batch], optimizer, rng, epoch)
                epoch_loss += loss_val
                n_batches += 1
            self.history_.append({"epoch": epoch, "loss": epoch_loss / n_batches})
        return self

    def _batch_indices(self, scans, order):
        by_grid: dict[bytes, list[int]] = {}
        grid_order: list[bytes] = []
        for i in order:
            key = self._grid_key(scans[i][2])
            if key not in by_grid:
                by_grid[key] = []
                grid_order.append(key)
            by_grid[key].append(i)
        batches = []
        for key in grid_order:
            idxs = by_grid[key]
            for start in range(0, len(idxs), self.batch_size):
                batches.append(idxs[start:start + self.batch_size])
        return batches

    def _train_batch(self, batch, optimizer, rng, epoch) -> float:
        tape = Tape()
        p = self.store_.bind(tape)
        loss = self._batch_loss(p, batch, rng)
        value = loss.item()
        if not np.isfinite(value):
            raise FloatingPointError("reconstruction loss diverged")
        tape.backward(loss)
        grads = nn.collect_grads(p)
        optimizer.step(grads)
        return value

    def _batch_loss(self, p, batch, rng) -> Tensor:
        scans = [scan for _, _, scan in batch]
        post = encode_batch(p, scans, self.encoder_hidden)
        eps = rng.normal(size=post.mean.shape)
        z0 = sample_initial_state(post, eps)
        path = None
        if self._diff.kind != "zero":
            path = BrownianPath(int(rng.integers(2**63)), self.solver_steps,
                                1.0 / self.solver_steps, z0.shape)
        traj = latent_trajectory(self._drift, self._diff, p, z0, self.solver_steps, path)
        times = scans[0].sample_times
        queries = _normalize_times(times, times)
        states = sde_mod.interpolate_states(traj, queries)
        decoded = decode_states(p, states)

        total = None
        observed = 0
        for t_idx, dec in enumerate(decoded):
            target = np.stack([s.signals[:, t_idx] for s in scans])
            mask = np.stack([s.observed[:, t_idx].astype(np.float64) for s in scans])
            observed += int(mask.sum())
            err = (dec - ad.constant(target)) * ad.constant(mask)
            sq = (err * err).sum()
            total = sq if total is None else total + sq
        mse = total / float(max(observed, 1))
        return mse + float(self.kl_beta) * gaussian_kl(post) / float(len(scans))

    def transform(self, X):
        self._check_fitted()
        out = []
        for subject in X:
            subject.validate()
            feats = []
            for visit_idx, (t, scan) in enumerate(subject.visits):
                recon = self._reconstruct_scan(subject.subject_id, visit_idx, scan)
                feats.append(features_from_recon(recon, visit_time_months=t))
            out.append(feats)
        return out

    def reconstruct_scan(self, subject_id, visit_idx, scan, query_times=None):
        """Numpy reconstruction of one scan at the given (default: own) grid."""
        self._check_fitted()
        return self._reconstruct_scan(subject_id, visit_idx, scan, query_times)

    def _reconstruct_scan(self, subject_id, visit_idx, scan, query_times=None):
        tape = Tape()
        p = self.store_.bind(tape)
        qt = scan.sample_times if query_times is None else query_times
        out = reconstruct(
            p, scan, self._drift, self._diff, self.encoder_hidden,
            self.solver_steps, qt, rng=None,
            path_seed=derive_seed(self.seed, subject_id, visit_idx))
        return out.data.copy()

    def _check_fitted(self):
        if not hasattr(self, "store_"):
            raise RuntimeError("SignalReconstructor is not fitted")
