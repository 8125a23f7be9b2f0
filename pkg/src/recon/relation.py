"""Relation-consistency losses over matched image-text pairs.

Two complementary signals:

* cross-modal: in-batch softmax matching probabilities in both retrieval
  directions, scored with a weighted InfoNCE objective (``loss_cm``);
* intra-modal: each modality's item-to-item affinity structure, compared
  against a proxy rebuilt from the *other* modality by routing every item
  to its best cross-modal match (``loss_im``). Matched pairs exhibit
  consistent structure in both modalities; mismatched pairs do not, which
  is what makes this loss a correspondence detector.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import InvalidInput
from .numerics import EPSILON_FLOOR, matrix_kl, softmax_rows

__all__ = [
    "MatchingProbs",
    "matching_probabilities",
    "loss_cm",
    "per_pair_cm_terms",
    "diagonal_match_prob",
    "RelationMatrix",
    "intra_relation",
    "cross_relation",
    "proxy_reconstruct",
    "loss_im",
    "risk_im",
]


@dataclass
class MatchingProbs:
    """Row-stochastic matching probabilities for both retrieval directions.

    ``p_v2l[i]`` is the softmax over texts for visual query i; ``p_l2v[j]``
    the softmax over images for text query j. Both are N_b x N_b.
    """

    p_v2l: torch.Tensor
    p_l2v: torch.Tensor

    @property
    def n(self) -> int:
        return self.p_v2l.shape[0]


def matching_probabilities(sim: torch.Tensor, temperature: float) -> MatchingProbs:
    if sim.ndim != 2 or sim.shape[0] != sim.shape[1]:
        raise InvalidInput(f"similarity matrix must be square, got {tuple(sim.shape)}")
    return MatchingProbs(
        p_v2l=softmax_rows(sim, temperature),
        p_l2v=softmax_rows(sim.T, temperature),
    )


def _diag_log_terms(probs: MatchingProbs) -> torch.Tensor:
    p_ii = torch.clamp(probs.p_v2l.diagonal(), min=EPSILON_FLOOR)
    q_ii = torch.clamp(probs.p_l2v.diagonal(), min=EPSILON_FLOOR)
    return -(torch.log(p_ii) + torch.log(q_ii)) / 2.0


def loss_cm(probs: MatchingProbs, labels=None) -> torch.Tensor:
    """Weighted two-direction InfoNCE over the diagonal matching probabilities.

    Per pair: label * (-log p_v2l[ii] - log p_l2v[ii]) / 2, averaged over
    the batch. ``labels`` defaults to all ones; recast labels in [0, 1]
    downweight unreliable pairs.
    """
    terms = _diag_log_terms(probs)
    if labels is None:
        labels = torch.ones(probs.n, dtype=torch.float64)
    else:
        labels = torch.as_tensor(labels, dtype=torch.float64)
        if labels.shape != (probs.n,):
            raise InvalidInput(f"need one label per pair, got shape {tuple(labels.shape)}")
    return (labels * terms).mean()


def per_pair_cm_terms(probs: MatchingProbs) -> torch.Tensor:
    """Unweighted per-pair InfoNCE terms (the loss_cm summands at label 1)."""
    return _diag_log_terms(probs)


def diagonal_match_prob(probs: MatchingProbs) -> torch.Tensor:
    """Direction-averaged diagonal probability (p_v2l[ii] + p_l2v[ii]) / 2."""
    return (probs.p_v2l.diagonal() + probs.p_l2v.diagonal()) / 2.0


@dataclass
class RelationMatrix:
    """Item affinity structure of one modality.

    ``raw`` holds the pre-normalization bilinear affinities; ``values`` the
    row-softmax distributions actually compared under KL. Proxy matrices
    gather from ``raw`` so both operands are normalized identically.
    """

    raw: torch.Tensor
    values: torch.Tensor
    modality: str = ""
    source: str = "direct"

    @property
    def n(self) -> int:
        return self.values.shape[0]


def _bilinear(a: torch.Tensor, b: torch.Tensor, weight: torch.Tensor | None) -> torch.Tensor:
    if weight is None:
        return a @ b.T
    return a @ weight @ b.T


def intra_relation(
    items: torch.Tensor, temperature: float, weight: torch.Tensor | None = None, modality: str = ""
) -> RelationMatrix:
    """Within-modality relation matrix: bilinear item affinities, row-softmaxed."""
    if items.ndim != 2 or items.shape[0] < 1:
        raise InvalidInput("intra_relation expects a non-empty item matrix")
    raw = _bilinear(items, items, weight)
    return RelationMatrix(raw=raw, values=softmax_rows(raw, temperature), modality=modality, source="direct")


def cross_relation(visual_items: torch.Tensor, text_items: torch.Tensor, weight: torch.Tensor | None = None) -> torch.Tensor:
    """(N_V, N_L) cross-modal item affinities under the same bilinear form."""
    return _bilinear(visual_items, text_items, weight)


def proxy_reconstruct(cross: torch.Tensor, opposite: RelationMatrix, temperature: float) -> RelationMatrix:
    """Rebuild the anchor modality's relation matrix from the opposite one.

    Anchor item i is routed to its most-affine opposite item
    i* = argmax_j cross[i, j] (first index wins ties); entry (i, j) of the
    proxy gathers the opposite RAW affinity at (i*, j*) and rows are then
    softmaxed like any relation matrix. Indices are constants: gradients
    flow through the gathered values only.
    """
    if cross.ndim != 2 or cross.numel() == 0:
        raise InvalidInput("proxy_reconstruct expects a non-empty cross-relation matrix")
    if cross.shape[1] != opposite.n:
        raise InvalidInput(
            f"cross matrix has {cross.shape[1]} opposite items but the opposite relation matrix is {opposite.n}x{opposite.n}"
        )
    best = torch.argmax(cross.detach(), dim=1)
    raw = opposite.raw[best][:, best]
    return RelationMatrix(
        raw=raw, values=softmax_rows(raw, temperature), modality=opposite.modality, source="proxy"
    )


def _matrix_divergence(direct: RelationMatrix, proxy: RelationMatrix, symmetric: bool) -> torch.Tensor:
    forward = matrix_kl(direct.values, proxy.values)
    if not symmetric:
        return forward
    return 0.5 * (forward + matrix_kl(proxy.values, direct.values))


def loss_im(
    embedded,
    temperature: float,
    weight: torch.Tensor | None = None,
    symmetric: bool = False,
) -> torch.Tensor:
    """Intra-modal relation discrepancy of one pair.

    KL(C_VV || proxy from text) + KL(C_LL || proxy from vision), where each
    proxy routes anchor items through their best cross-modal match. Zero
    when that routing transports one modality's structure exactly onto the
    other's. ``symmetric=True`` symmetrizes each KL term.
    """
    c_vv = intra_relation(embedded.visual_items, temperature, weight, modality="visual")
    c_ll = intra_relation(embedded.text_items, temperature, weight, modality="text")
    cross = cross_relation(embedded.visual_items, embedded.text_items, weight)
    proxy_vv = proxy_reconstruct(cross, c_ll, temperature)
    proxy_ll = proxy_reconstruct(cross.T, c_vv, temperature)
    return _matrix_divergence(c_vv, proxy_vv, symmetric) + _matrix_divergence(c_ll, proxy_ll, symmetric)


def risk_im(
    embedded_pairs,
    temperature: float,
    weight: torch.Tensor | None = None,
    pair_weights=None,
    symmetric: bool = False,
) -> torch.Tensor:
    """Mean (optionally per-pair weighted) intra-modal loss over a batch."""
    embedded_pairs = list(embedded_pairs)
    if not embedded_pairs:
        raise InvalidInput("risk_im expects a non-empty batch")
    if pair_weights is None:
        pair_weights = [1.0] * len(embedded_pairs)
    elif len(pair_weights) != len(embedded_pairs):
        raise InvalidInput("need one weight per pair")
    total = torch.zeros((), dtype=torch.float64)
    for w, emb in zip(pair_weights, embedded_pairs):
        total = total + w * loss_im(emb, temperature, weight, symmetric)
    return total / len(embedded_pairs)
