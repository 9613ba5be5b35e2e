"""Input validation helpers shared by the estimators and the CLI."""

from __future__ import annotations

import numpy as np

from .reconstruction import VisitFeatures


def check_binary_labels(y, n_expected=None) -> np.ndarray:
    arr = np.asarray(y)
    if arr.ndim != 1:
        raise ValueError("labels must be a 1-d sequence")
    if n_expected is not None and len(arr) != n_expected:
        raise ValueError(f"expected {n_expected} labels, got {len(arr)}")
    values = set(np.unique(arr).tolist())
    if not values <= {0, 1}:
        raise ValueError(f"labels must be 0/1, got values {sorted(values)}")
    return arr.astype(int)


def check_visit_sequences(X) -> tuple[list, int]:
    """Normalize per-subject visit-feature sequences; returns (sequences, n_rois)."""
    sequences = list(X)
    if not sequences:
        raise ValueError("need at least one subject")
    n_rois = None
    for s_idx, visits in enumerate(sequences):
        visits = list(visits)
        if not visits:
            raise ValueError(f"subject {s_idx}: empty visit list")
        times = []
        for v_idx, feat in enumerate(visits):
            if not isinstance(feat, VisitFeatures):
                raise TypeError(
                    f"subject {s_idx} visit {v_idx}: expected VisitFeatures, "
                    f"got {type(feat).__name__}")
            if feat.X.ndim != 2 or feat.X.shape[0] != feat.X.shape[1]:
                raise ValueError(f"subject {s_idx} visit {v_idx}: feature matrix must be square")
            if n_rois is None:
                n_rois = feat.X.shape[0]
            elif feat.X.shape[0] != n_rois:
                raise ValueError(
                    f"subject {s_idx} visit {v_idx}: {feat.X.shape[0]} nodes, "
                    f"expected {n_rois}")
            times.append(feat.visit_time_months)
        if any(b < a for a, b in zip(times, times[1:])):
            raise ValueError(f"subject {s_idx}: visit times must be nondecreasing")
        sequences[s_idx] = visits
    return sequences, n_rois


def check_both_classes(y: np.ndarray, where: str) -> None:
    if len(np.unique(y)) < 2:
        raise ValueError(f"{where} contains a single class")
