"""Per-visit hypergraph construction and normalized propagation operators.

One hyperedge is centered on each node (so E == N): the column for node j
holds the center itself plus its K nearest feature-space neighbors, with a
Gaussian falloff exp(-d^2 / (q * mean_dist_j)^2).  Degree normalization
follows the usual symmetric form Dv^-1/2 H M De^-1 H^T Dv^-1/2; the sparse
variant swaps the unit edge weights for learned probabilities and is
differentiable with respect to them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def pairwise_distances(X: np.ndarray) -> np.ndarray:
    sq = np.sum(X * X, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (X @ X.T)
    np.maximum(d2, 0.0, out=d2)
    np.fill_diagonal(d2, 0.0)  # self-distance exactly zero despite fp cancellation
    d = np.sqrt(d2)
    return np.maximum(d, d.T)  # exact symmetry


def build_incidence(X: np.ndarray, k: int, scale: float = 1.0,
                    self_in_k: bool = False) -> np.ndarray:
    """Incidence matrix H (N x N): column j is the hyperedge centered on j.

    With ``self_in_k`` False (default) each column holds the center plus its
    k nearest other nodes (k+1 nonzeros); with True, the center plus k-1
    others (k nonzeros).
    """
    X = np.asarray(X, dtype=np.float64)
    if not np.all(np.isfinite(X)):
        raise ValueError("feature matrix contains non-finite entries")
    n = X.shape[0]
    if k < 1:
        raise ValueError("k must be a positive integer")
    n_others = k - 1 if self_in_k else k
    if n_others > n - 1:
        raise ValueError(f"k={k} requires more neighbors than the {n} nodes provide")
    if scale <= 0:
        raise ValueError("scale must be positive")

    dist = pairwise_distances(X)
    H = np.zeros((n, n))
    for j in range(n):
        d_j = dist[:, j]
        mean_d = (d_j.sum()) / (n - 1) if n > 1 else 0.0
        if mean_d == 0.0:
            raise ValueError(f"degenerate geometry: node {j} is at zero mean distance "
                             "from every other node (all rows identical?)")
        order = np.argsort(d_j, kind="stable")  # ties -> lowest node index
        members = [j]
        for cand in order:
            if cand == j:
                continue
            members.append(int(cand))
            if len(members) == n_others + 1:
                break
        w = np.exp(-(d_j[members] ** 2) / (scale * mean_d) ** 2)
        H[members, j] = w
    return H


def edge_degrees(H: np.ndarray) -> np.ndarray:
    return H.sum(axis=0)


def node_degrees(H: np.ndarray, m: np.ndarray) -> np.ndarray:
    return H @ np.asarray(m, dtype=np.float64)


def build_propagation(H: np.ndarray, m: np.ndarray) -> np.ndarray:
    """S = Dv^-1/2 H M De^-1 H^T Dv^-1/2 with M = diag(m)."""
    H = np.asarray(H, dtype=np.float64)
    m = np.asarray(m, dtype=np.float64)
    delta = edge_degrees(H)
    if np.any(delta <= 0):
        empty = np.flatnonzero(delta <= 0).tolist()
        raise ValueError(f"hyperedges with non-positive degree: {empty}")
    d = node_degrees(H, m)
    if np.any(d <= 0):
        isolated = np.flatnonzero(d <= 0).tolist()
        raise ValueError(f"isolated nodes (zero weighted degree): {isolated}")
    dv_inv_sqrt = 1.0 / np.sqrt(d)
    core = H @ np.diag(m / delta) @ H.T
    S = dv_inv_sqrt[:, None] * core * dv_inv_sqrt[None, :]
    return 0.5 * (S + S.T)  # remove last-bit asymmetry from fp rounding


def build_sparse_propagation(H: np.ndarray, p_edge: Tensor) -> Tensor:
    """Eq.-(10)-style operator with learned edge probabilities.

    Node degrees are recomputed with the probabilities as weights; edge
    degrees depend on H only and stay fixed.  Differentiable w.r.t. p_edge.
    """
    H = np.asarray(H, dtype=np.float64)
    if np.any(p_edge.data <= 0):
        bad = np.flatnonzero(p_edge.data <= 0).tolist()
        raise ValueError(f"edge probabilities must be positive, got non-positive at {bad}")
    delta = edge_degrees(H)
    if np.any(delta <= 0):
        raise ValueError("hyperedge with zero degree")
    h_const = ad.constant(H)
    d = h_const @ p_edge  # weighted node degrees
    dv_inv_sqrt = (d.log() * -0.5).exp()
    middle = h_const @ ad.diag(p_edge / ad.constant(delta)) @ h_const.T
    return ad.diag(dv_inv_sqrt) @ middle @ ad.diag(dv_inv_sqrt)


@dataclass
class Hypergraph:
    """Constructed structure for one visit, with unit edge weights."""

    incidence: np.ndarray
    edge_weights: np.ndarray
    node_deg: np.ndarray
    edge_deg: np.ndarray
    propagation: np.ndarray

    @classmethod
    def from_features(cls, X: np.ndarray, k: int, scale: float = 1.0,
                      self_in_k: bool = False) -> "Hypergraph":
        H = build_incidence(X, k, scale=scale, self_in_k=self_in_k)
        m = np.ones(H.shape[1])
        return cls(
            incidence=H,
            edge_weights=m,
            node_deg=node_degrees(H, m),
            edge_deg=edge_degrees(H),
            propagation=build_propagation(H, m),
        )
