"""Classification metrics and the hyperedge group-difference pipeline.

AUC comes from the rank statistic (Mann-Whitney U over positive-negative
pairs, ties counted half); group differences use Welch two-sample t-tests
with Benjamini-Hochberg correction across edges within each visit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import betainc

# above this many degrees of freedom the normal tail approximates the t tail
NORMAL_APPROX_DF = 30.0


@dataclass
class Metrics:
    auc: float
    accuracy: float
    sensitivity: float
    specificity: float


def _average_ranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auc_score(scores, labels) -> float:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC undefined: both classes must be present")
    ranks = _average_ranks(scores)
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def compute_metrics(scores, labels, threshold: float = 0.5) -> Metrics:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if len(scores) != len(labels) or len(scores) < 2:
        raise ValueError("need matching score/label vectors of length >= 2")
    preds = (scores >= threshold).astype(int)
    tp = int(np.sum((preds == 1) & (labels == 1)))
    tn = int(np.sum((preds == 0) & (labels == 0)))
    fp = int(np.sum((preds == 1) & (labels == 0)))
    fn = int(np.sum((preds == 0) & (labels == 1)))
    sens = tp / (tp + fn) if tp + fn else float("nan")
    spec = tn / (tn + fp) if tn + fp else float("nan")
    return Metrics(
        auc=auc_score(scores, labels),
        accuracy=(tp + tn) / len(labels),
        sensitivity=sens,
        specificity=spec,
    )


def t_tail_two_sided(t: float, df: float) -> float:
    """Two-sided p for a t statistic: exact incomplete beta up to
    NORMAL_APPROX_DF degrees of freedom, normal tail beyond."""
    if df > NORMAL_APPROX_DF:
        return float(math.erfc(abs(t) / math.sqrt(2.0)))
    x = df / (df + t * t)
    return float(betainc(df / 2.0, 0.5, x))


def welch_test(x, y):
    """Welch t statistic, Satterthwaite df, two-sided p.

    Returns (t, df, p); a fully degenerate comparison (zero variance in both
    groups) is marked with t = 0, p = 1.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n1, n2 = len(x), len(y)
    if n1 < 2 or n2 < 2:
        raise ValueError("welch_test needs at least 2 observations per group")
    v1 = x.var(ddof=1)
    v2 = y.var(ddof=1)
    se2 = v1 / n1 + v2 / n2
    if se2 == 0.0:
        return 0.0, float("nan"), 1.0
    t = (x.mean() - y.mean()) / math.sqrt(se2)
    df = se2 * se2 / ((v1 / n1) ** 2 / (n1 - 1) + (v2 / n2) ** 2 / (n2 - 1))
    return float(t), float(df), t_tail_two_sided(t, df)


def bh_adjust(p_values) -> np.ndarray:
    """Benjamini-Hochberg adjusted p-values (monotone, clipped to [0, 1])."""
    p = np.asarray(p_values, dtype=np.float64)
    n = len(p)
    order = np.argsort(p, kind="stable")
    scaled = p[order] * n / np.arange(1, n + 1)
    adjusted = np.minimum.accumulate(scaled[::-1])[::-1]
    out = np.empty(n)
    out[order] = np.clip(adjusted, 0.0, 1.0)
    return out


@dataclass
class EdgeStat:
    edge_id: int
    t: float
    p_raw: float
    p_fdr: float
    significant: bool


def edge_group_stats(group_a: np.ndarray, group_b: np.ndarray, alpha: float = 0.05) -> list[EdgeStat]:
    """Per-edge Welch tests between two groups of importance rows, BH over
    edges, sorted by adjusted p (stable on edge id)."""
    group_a = np.asarray(group_a, dtype=np.float64)
    group_b = np.asarray(group_b, dtype=np.float64)
    if group_a.ndim != 2 or group_b.ndim != 2 or group_a.shape[1] != group_b.shape[1]:
        raise ValueError("importance matrices must be 2-d with matching edge counts")
    if group_a.shape[0] < 2 or group_b.shape[0] < 2:
        raise ValueError("need at least 2 subjects per group")
    n_edges = group_a.shape[1]
    raw = np.empty(n_edges)
    tstats = np.empty(n_edges)
    for j in range(n_edges):
        t, _, p = welch_test(group_a[:, j], group_b[:, j])
        tstats[j] = t
        raw[j] = p
    fdr = bh_adjust(raw)
    stats = [EdgeStat(edge_id=j, t=float(tstats[j]), p_raw=float(raw[j]),
                      p_fdr=float(fdr[j]), significant=bool(fdr[j] < alpha))
             for j in range(n_edges)]
    stats.sort(key=lambda s: (s.p_fdr, s.p_raw, s.edge_id))
    return stats


def group_stats(per_visit_a, per_visit_b, alpha: float = 0.05) -> list[list[EdgeStat]]:
    if len(per_visit_a) != len(per_visit_b):
        raise ValueError("per-visit group lists must align")
    return [edge_group_stats(a, b, alpha=alpha) for a, b in zip(per_visit_a, per_visit_b)]
