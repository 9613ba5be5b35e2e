"""The four-part training objective.

Classification and mutual-information terms are binary cross-entropies on
the dense and masked logits; the sparsity term is the l1 mass of the mask
probabilities; the entropy term pushes each probability toward 0 or 1.
Entropy is evaluated from logits in training (log sigmoid via softplus)
so saturated probabilities cannot produce log(0).
"""

from __future__ import annotations

from dataclasses import dataclass

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class LossWeights:
    lambda1: float = 2.0   # mutual-information (masked-path) term
    lambda2: float = 0.1   # l1 sparsity of mask probabilities
    lambda3: float = 0.1   # binary entropy of mask probabilities

    def validate(self) -> None:
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ValueError("loss weights must be nonnegative")


def bce_with_logit(logit: Tensor, y: int) -> Tensor:
    """-(y log s(l) + (1-y) log(1-s(l))) in log-sum-exp form."""
    if y not in (0, 1):
        raise ValueError("label must be 0 or 1")
    return logit.softplus() - logit * float(y)


loss_ce = bce_with_logit
loss_mi = bce_with_logit  # same form, evaluated on the masked-path logit


def loss_sparsity(p_x: Tensor, p_edge_per_visit: list) -> Tensor:
    """||P_X||_1 plus the per-visit average of ||P_E||_1 (entries positive)."""
    total = p_x.sum()
    if p_edge_per_visit:
        edge = None
        for p_e in p_edge_per_visit:
            s = p_e.sum()
            edge = s if edge is None else edge + s
        total = total + edge / float(len(p_edge_per_visit))
    return total


def binary_entropy(p: Tensor) -> Tensor:
    """Elementwise -(p log p + (1-p) log(1-p)); needs p strictly in (0, 1)."""
    one = ad.constant(1.0)
    return -(p * p.log() + (one - p) * (one - p).log())


def binary_entropy_from_logits(logits: Tensor) -> Tensor:
    """Same entropy, stable at saturated probabilities:
    H(s(l)) = s(l) softplus(-l) + (1 - s(l)) softplus(l)."""
    p = logits.sigmoid()
    one = ad.constant(1.0)
    return p * (-logits).softplus() + (one - p) * logits.softplus()


def loss_entropy(p_x: Tensor, p_edge_per_visit: list) -> Tensor:
    """Summed entropy of P_X plus per-visit average of summed P_E entropy."""
    total = binary_entropy(p_x).sum()
    if p_edge_per_visit:
        edge = None
        for p_e in p_edge_per_visit:
            s = binary_entropy(p_e).sum()
            edge = s if edge is None else edge + s
        total = total + edge / float(len(p_edge_per_visit))
    return total


def loss_entropy_from_logits(logits_x: Tensor, edge_logits_per_visit: list) -> Tensor:
    total = binary_entropy_from_logits(logits_x).sum()
    if edge_logits_per_visit:
        edge = None
        for l_e in edge_logits_per_visit:
            s = binary_entropy_from_logits(l_e).sum()
            edge = s if edge is None else edge + s
        total = total + edge / float(len(edge_logits_per_visit))
    return total


def total_loss(ce: Tensor, mi: Tensor | None, sparsity: Tensor | None,
               entropy: Tensor | None, weights: LossWeights,
               sparsity_enabled: bool = True) -> Tensor:
    """L = L_ce + l1 L_mi + l2 L_s + l3 L_e; plain L_ce when masks are off."""
    if not sparsity_enabled:
        return ce
    if mi is None or sparsity is None or entropy is None:
        raise ValueError("sparsity-enabled loss needs all four parts")
    return ce + weights.lambda1 * mi + weights.lambda2 * sparsity + weights.lambda3 * entropy
