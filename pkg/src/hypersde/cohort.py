"""Synthetic irregular longitudinal cohorts and their on-disk format.

A subject is a label plus up to six visits at irregular month offsets; each
visit holds a multichannel scan with within-scan missingness.  Channels are
driven by two block factors whose cross-coupling decays over months for the
progressive class, so the only class signal is in the inter-block
correlation trajectory.  Signals are AR(1) in time with the target
cross-sectional covariance as the stationary marginal, which keeps the
series reconstructable from a continuous latent state.

On disk: a ``cohort.jsonl`` manifest plus one CSV per scan with header
``time_s,roi_0,...``; unobserved entries are empty cells and stored as 0.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .sde import derive_seed

# block-structure constants of the generator (not exposed in the spec file)
N_BLOCKS = 2
FACTOR_LOADING = 0.9          # channel loading on its block factor
BASE_COUPLING = 0.65          # inter-block factor correlation at baseline
TEMPORAL_AR = 0.5             # AR(1) coefficient of every latent series

FLOAT_FMT = "%.17g"


class ParseError(ValueError):
    """Malformed manifest or scan file; message carries the line number."""


@dataclass
class ScanSeries:
    """One scan: (channels x samples) values, sample times, observation mask."""

    signals: np.ndarray
    sample_times: np.ndarray
    observed: np.ndarray

    def validate(self) -> None:
        n, l = self.signals.shape
        if self.sample_times.shape != (l,) or self.observed.shape != (n, l):
            raise ValueError("scan arrays have inconsistent shapes")
        if np.any(np.diff(self.sample_times) <= 0):
            raise ValueError("sample times must be strictly increasing")
        if np.any(self.observed.sum(axis=1) < 2):
            bad = np.flatnonzero(self.observed.sum(axis=1) < 2).tolist()
            raise ValueError(f"channels with fewer than 2 observed samples: {bad}")

    @property
    def n_channels(self) -> int:
        return self.signals.shape[0]


@dataclass
class SubjectRecord:
    subject_id: str
    label: int
    visits: list  # [(time_months, ScanSeries), ...] time-ordered

    def validate(self) -> None:
        if not 1 <= len(self.visits) <= 6:
            raise ValueError(f"{self.subject_id}: expected 1..6 visits, got {len(self.visits)}")
        times = [t for t, _ in self.visits]
        if any(t < 0 for t in times) or any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError(f"{self.subject_id}: visit times must be nonnegative and increasing")
        if self.label not in (0, 1):
            raise ValueError(f"{self.subject_id}: label must be 0 or 1")


@dataclass
class CohortSpec:
    n_stable: int = 60
    n_progressive: int = 30
    n_rois: int = 20
    n_samples: int = 60
    sample_interval_s: float = 2.0
    visit_time_means: tuple = (0.0, 34.0, 62.0, 74.0, 81.0, 93.0)
    visit_time_jitter_sd: float = 2.0
    missing_visit_prob: float = 0.15
    missing_sample_prob: float = 0.10
    drift_rate: float = 0.009
    seed: int = 0

    def validate(self) -> None:
        if self.n_stable < 0 or self.n_progressive < 0 or self.n_stable + self.n_progressive == 0:
            raise ValueError("cohort must contain at least one subject")
        if self.n_rois < 2 or self.n_rois % N_BLOCKS != 0:
            raise ValueError(f"n_rois must be a positive multiple of {N_BLOCKS}")
        if self.n_samples < 4:
            raise ValueError("n_samples must be at least 4")
        if not 0 <= self.missing_visit_prob < 1 or not 0 <= self.missing_sample_prob < 1:
            raise ValueError("missingness probabilities must lie in [0, 1)")
        if self.drift_rate < 0 or self.visit_time_jitter_sd < 0 or self.sample_interval_s <= 0:
            raise ValueError("rates and intervals must be nonnegative")
        if len(self.visit_time_means) < 1 or list(self.visit_time_means) != sorted(self.visit_time_means):
            raise ValueError("visit_time_means must be a nondecreasing sequence")


def coupling_at(spec: CohortSpec, label: int, t_months: float) -> float:
    """Inter-block factor correlation for a class at a follow-up month."""
    if label == 0:
        return BASE_COUPLING
    return BASE_COUPLING * max(0.0, 1.0 - spec.drift_rate * t_months)


def _visit_times(spec: CohortSpec, rng) -> list[float]:
    times = [float(spec.visit_time_means[0])]
    for mean in spec.visit_time_means[1:]:
        t = mean + rng.normal(0.0, spec.visit_time_jitter_sd) if spec.visit_time_jitter_sd > 0 else mean
        times.append(max(times[-1] + 1.0, float(t)))
    return times


def _sample_scan(spec: CohortSpec, rho: float, rng) -> ScanSeries:
    """AR(1) series whose stationary cross-sectional covariance has
    within-block correlation FACTOR_LOADING^2 and inter-block rho times that."""
    n, length = spec.n_rois, spec.n_samples
    lam = FACTOR_LOADING
    idio = np.sqrt(1.0 - lam * lam)
    per_block = n // N_BLOCKS
    phi = TEMPORAL_AR
    innov = np.sqrt(1.0 - phi * phi)

    # correlated block factors: f1 = g, f2 = rho*g + sqrt(1-rho^2)*h
    g = rng.normal(size=length)
    h = rng.normal(size=length)
    e = rng.normal(size=(n, length))
    for t in range(1, length):
        g[t] = phi * g[t - 1] + innov * g[t]
        h[t] = phi * h[t - 1] + innov * h[t]
        e[:, t] = phi * e[:, t - 1] + innov * e[:, t]
    f = np.vstack([g, rho * g + np.sqrt(max(0.0, 1.0 - rho * rho)) * h])

    signals = np.empty((n, length))
    for i in range(n):
        signals[i] = lam * f[i // per_block] + idio * e[i]

    observed = np.ones((n, length), dtype=bool)
    if spec.missing_sample_prob > 0:
        observed = rng.random((n, length)) >= spec.missing_sample_prob
        for i in range(n):
            if observed[i].sum() < 2:  # keep the scan usable
                observed[i, 0] = True
                observed[i, -1] = True
    signals[~observed] = 0.0
    times = spec.sample_interval_s * np.arange(length, dtype=np.float64)
    return ScanSeries(signals=signals, sample_times=times, observed=observed)


def generate(spec: CohortSpec) -> list[SubjectRecord]:
    """Seeded cohort; with drift_rate == 0 both classes share one distribution."""
    spec.validate()
    labels = [0] * spec.n_stable + [1] * spec.n_progressive
    subjects = []
    for idx, label in enumerate(labels):
        rng = np.random.Generator(np.random.PCG64(derive_seed(spec.seed, "subject", idx)))
        times = _visit_times(spec, rng)
        keep = [True] + [rng.random() >= spec.missing_visit_prob for _ in times[1:]]
        visits = []
        for t, kept in zip(times, keep):
            if not kept:
                continue
            rho = coupling_at(spec, label, t)
            visits.append((t, _sample_scan(spec, rho, rng)))
        record = SubjectRecord(subject_id=f"sub-{idx:03d}", label=label, visits=visits)
        record.validate()
        subjects.append(record)
    return subjects


# -- persistence ---------------------------------------------------------


def _scan_to_csv(scan: ScanSeries, path: Path) -> None:
    n, length = scan.signals.shape
    header = "time_s," + ",".join(f"roi_{i}" for i in range(n))
    lines = [header]
    for t in range(length):
        cells = [FLOAT_FMT % scan.sample_times[t]]
        for i in range(n):
            cells.append(FLOAT_FMT % scan.signals[i, t] if scan.observed[i, t] else "")
        lines.append(",".join(cells))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _scan_from_csv(path: Path) -> ScanSeries:
    if not path.exists():
        raise ParseError(f"scan file not found: {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith("time_s,"):
        raise ParseError(f"{path}:1: expected header starting with 'time_s,'")
    n = len(lines[0].split(",")) - 1
    times, rows, masks = [], [], []
    for lineno, line in enumerate(lines[1:], start=2):
        cells = line.split(",")
        if len(cells) != n + 1:
            raise ParseError(f"{path}:{lineno}: expected {n + 1} cells, got {len(cells)}")
        try:
            times.append(float(cells[0]))
            vals = [float(c) if c != "" else 0.0 for c in cells[1:]]
        except ValueError as exc:
            raise ParseError(f"{path}:{lineno}: {exc}") from exc
        rows.append(vals)
        masks.append([c != "" for c in cells[1:]])
    return ScanSeries(
        signals=np.asarray(rows, dtype=np.float64).T,
        sample_times=np.asarray(times, dtype=np.float64),
        observed=np.asarray(masks, dtype=bool).T,
    )


def save_cohort(subjects: list[SubjectRecord], directory) -> None:
    directory = Path(directory)
    (directory / "scans").mkdir(parents=True, exist_ok=True)
    manifest_lines = []
    for subject in subjects:
        entries = []
        for k, (t, scan) in enumerate(subject.visits):
            rel = f"scans/{subject.subject_id}_v{k:02d}.csv"
            _scan_to_csv(scan, directory / rel)
            entries.append({"time_months": t, "scan_file": rel})
        manifest_lines.append(json.dumps(
            {"subject_id": subject.subject_id, "label": subject.label, "visits": entries},
            sort_keys=True))
    (directory / "cohort.jsonl").write_text("\n".join(manifest_lines) + "\n", encoding="utf-8")


def load_cohort(directory) -> list[SubjectRecord]:
    directory = Path(directory)
    manifest = directory / "cohort.jsonl"
    if not manifest.exists():
        raise ParseError(f"manifest not found: {manifest}")
    subjects = []
    for lineno, line in enumerate(manifest.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            entry = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{manifest}:{lineno}: invalid JSON ({exc.msg})") from exc
        try:
            visits = [(float(v["time_months"]), _scan_from_csv(directory / v["scan_file"]))
                      for v in entry["visits"]]
            subject = SubjectRecord(subject_id=entry["subject_id"], label=int(entry["label"]),
                                    visits=visits)
        except KeyError as exc:
            raise ParseError(f"{manifest}:{lineno}: missing field {exc}") from exc
        subject.validate()
        subjects.append(subject)
    return subjects
