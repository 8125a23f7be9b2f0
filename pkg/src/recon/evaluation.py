"""Retrieval metrics, division-quality accounting, and an alignment oracle.

The oracle (``relation_alignment_risk``) needs per-item object ids, so it
only runs on synthetic corpora: it averages item embeddings per latent
object, builds the two within-modality relation matrices over those object
representatives, and reports the mean symmetric KL between them across
truly matched pairs. Training never sees this quantity; it exists to check
that the trainable losses actually move it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .data import Corpus
from .errors import InvalidInput
from .model import SimilarityModel, batch_similarity_from_embedded, encode_batch
from .numerics import matrix_kl, softmax_rows

__all__ = [
    "RetrievalReport",
    "DivisionReport",
    "recall_at_k",
    "retrieval_report",
    "model_retrieval_report",
    "division_quality",
    "relation_alignment_risk",
]

DEFAULT_KS = (1, 5, 10)


@dataclass
class RetrievalReport:
    image_to_text: dict[int, float]  # K -> percentage of queries with the true item in the top K
    text_to_image: dict[int, float]
    rsum: float

    def to_dict(self) -> dict:
        return {
            "image_to_text": {str(k): v for k, v in self.image_to_text.items()},
            "text_to_image": {str(k): v for k, v in self.text_to_image.items()},
            "rsum": self.rsum,
        }


def _ranks(sim: np.ndarray, true_index: np.ndarray) -> np.ndarray:
    """1-based rank of each query's true gallery item, descending similarity.

    A tie counts against the true item only when the tied competitor has a
    lower gallery index, so rankings are deterministic.
    """
    n_q, _ = sim.shape
    true_scores = sim[np.arange(n_q), true_index]
    better = (sim > true_scores[:, None]).sum(axis=1)
    tie_mask = sim == true_scores[:, None]
    earlier_tie = np.array([tie_mask[q, : true_index[q]].sum() for q in range(n_q)])
    return better + earlier_tie + 1


def recall_at_k(sim: np.ndarray, true_index, ks=DEFAULT_KS) -> dict[int, float]:
    """Percentage of queries whose true item ranks within the top K."""
    sim = np.asarray(sim, dtype=np.float64)
    if sim.ndim != 2 or sim.size == 0:
        raise InvalidInput("similarity matrix must be a non-empty 2-D array")
    true_index = np.asarray(true_index, dtype=np.int64)
    if true_index.shape != (sim.shape[0],):
        raise InvalidInput("need one ground-truth index per query")
    if (true_index < 0).any() or (true_index >= sim.shape[1]).any():
        raise InvalidInput("ground-truth index out of gallery range")
    ranks = _ranks(sim, true_index)
    return {int(k): float((ranks <= k).mean() * 100.0) for k in ks}


def retrieval_report(sim, ks=DEFAULT_KS) -> RetrievalReport:
    """Both-direction recalls for a square matrix whose diagonal is ground truth."""
    sim = np.asarray(sim, dtype=np.float64)
    if sim.ndim != 2 or sim.shape[0] != sim.shape[1]:
        raise InvalidInput("expected a square pairwise similarity matrix")
    diag = np.arange(sim.shape[0])
    i2t = recall_at_k(sim, diag, ks)
    t2i = recall_at_k(sim.T, diag, ks)
    return RetrievalReport(i2t, t2i, rsum=sum(i2t.values()) + sum(t2i.values()))


def model_retrieval_report(corpus: Corpus, model: SimilarityModel, ks=DEFAULT_KS) -> RetrievalReport:
    if len(corpus) == 0:
        raise InvalidInput("cannot evaluate an empty corpus")
    with torch.no_grad():
        embedded = encode_batch(corpus.pairs, model)
        sim = batch_similarity_from_embedded(embedded, model).numpy()
    return retrieval_report(sim, ks)


@dataclass
class PartitionCounts:
    size: int
    true_matches: int
    true_mismatches: int


@dataclass
class DivisionReport:
    """Confusion accounting with the Noisy partition as the mismatch detector."""

    partitions: dict[str, PartitionCounts]
    mismatch_precision: float
    mismatch_recall: float
    precision_defined: bool  # False when nothing was predicted noisy (reported as 1.0)
    recall_defined: bool  # False when the corpus has no true mismatches (reported as 1.0)

    @property
    def total(self) -> int:
        return sum(c.size for c in self.partitions.values())

    def to_dict(self) -> dict:
        return {
            "partitions": {
                name: {"size": c.size, "true_matches": c.true_matches, "true_mismatches": c.true_mismatches}
                for name, c in self.partitions.items()
            },
            "mismatch_precision": self.mismatch_precision,
            "mismatch_recall": self.mismatch_recall,
            "precision_defined": self.precision_defined,
            "recall_defined": self.recall_defined,
        }


def division_quality(assignments, true_match) -> DivisionReport:
    from .division import Partition  # local import: division also imports model helpers

    assignments = list(assignments)
    true_match = np.asarray(true_match, dtype=bool)
    if true_match.shape != (len(assignments),):
        raise InvalidInput("need one ground-truth flag per assignment")
    if not assignments:
        raise InvalidInput("no assignments to score")

    counts = {}
    for part in Partition:
        in_part = [i for i, a in enumerate(assignments) if a.partition is part]
        matches = int(true_match[in_part].sum()) if in_part else 0
        counts[part.value] = PartitionCounts(len(in_part), matches, len(in_part) - matches)

    predicted_noisy = counts[Partition.NOISY.value].size
    caught = counts[Partition.NOISY.value].true_mismatches
    actual_mismatches = int((~true_match).sum())
    precision_defined = predicted_noisy > 0
    recall_defined = actual_mismatches > 0
    return DivisionReport(
        partitions=counts,
        mismatch_precision=caught / predicted_noisy if precision_defined else 1.0,
        mismatch_recall=caught / actual_mismatches if recall_defined else 1.0,
        precision_defined=precision_defined,
        recall_defined=recall_defined,
    )


def _object_relation(items: torch.Tensor, object_ids, shared_order, temperature: float) -> torch.Tensor:
    """Row-stochastic relations among object representatives, self-affinity excluded.

    Every unit-norm representative has self-affinity exactly 1.0 in both
    modalities, so keeping it in the row softmax drowns the cross-object
    structure at sharp temperatures and two misaligned spaces can score
    near zero. Each row is therefore a distribution over the *other*
    shared objects only.
    """
    reps = []
    ids = list(object_ids)
    for obj in shared_order:
        rows = [i for i, o in enumerate(ids) if o == obj]
        rep = items[rows].mean(dim=0)
        norm = torch.linalg.vector_norm(rep)
        if norm < 1e-12:
            raise InvalidInput("object representative has zero norm")
        reps.append(rep / norm)
    stacked = torch.stack(reps)
    raw = stacked @ stacked.T
    n = raw.shape[0]
    off_diag = raw[~torch.eye(n, dtype=torch.bool)].reshape(n, n - 1)
    return softmax_rows(off_diag, temperature)


def relation_alignment_risk(corpus: Corpus, model: SimilarityModel, relation_temperature: float) -> float:
    """Mean symmetric KL between object-level relation matrices of true pairs.

    Item embeddings are averaged per object id and renormalized, giving one
    representative per object and modality; the row-softmax relation
    matrices over those representatives should agree when the embedding
    spaces are aligned. Pairs whose modalities share fewer than two objects
    contribute zero (their relation matrices are trivially [[1]]).
    """
    if not corpus.has_ground_truth:
        raise InvalidInput("alignment risk needs object-level ground truth")
    true_pairs = [p for p in corpus.pairs if p.ground_truth.true_match]
    if not true_pairs:
        raise InvalidInput("corpus has no truly matched pairs")

    total = 0.0
    with torch.no_grad():
        embedded = encode_batch(true_pairs, model)
        for pair, emb in zip(true_pairs, embedded):
            shared = sorted(set(pair.ground_truth.visual_objects) & set(pair.ground_truth.text_objects))
            if not shared:
                raise InvalidInput(f"pair {pair.pair_id} is marked matched but shares no objects")
            if len(shared) < 2:
                continue
            c_v = _object_relation(emb.visual_items, pair.ground_truth.visual_objects, shared, relation_temperature)
            c_l = _object_relation(emb.text_items, pair.ground_truth.text_objects, shared, relation_temperature)
            total += 0.5 * (float(matrix_kl(c_v, c_l)) + float(matrix_kl(c_l, c_v)))
    return total / len(true_pairs)
