"""Correspondence discrimination: split annotated pairs into three partitions.

Per epoch the trainer freezes the model and scores every pair twice:

* ``y_cm`` — posterior of the small-mean component of a two-Gaussian
  mixture fitted to per-pair cross-modal losses (small loss = likely true
  correspondence);
* ``y_im`` — a bounded transform of the pair's intra-modal relation
  discrepancy (high = the two modalities disagree about item structure).

Pairs confident on both axes are Clean; cross-modally confident but
structurally discrepant pairs are LocalAssociated (their intra-modal
supervision gets divided by exp(y_im / alpha)); the rest are Noisy and
train against momentum pseudo-labels instead of their annotations.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import DegenerateDistribution, InvalidConfig, InvalidInput
from .model import SimilarityModel, batch_similarity_from_embedded, encode_batch
from .relation import diagonal_match_prob, loss_im, matching_probabilities, per_pair_cm_terms

__all__ = [
    "GmmModel",
    "Partition",
    "PartitionAssignment",
    "DivisionOutcome",
    "fit_gmm",
    "clean_posterior",
    "discrepancy_score",
    "penalization",
    "update_pseudo_label",
    "per_sample_cm_losses",
    "per_sample_im_losses",
    "assign_partitions",
    "divide",
    "write_partition_csv",
    "read_partition_csv",
]

_VARIANCE_FLOOR = 1e-6
_EM_TOL = 1e-6
_EM_MAX_ITERS = 100


@dataclass
class GmmModel:
    """Two-component 1-D Gaussian mixture (means/variances/weights)."""

    means: np.ndarray
    variances: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64)
        self.variances = np.asarray(self.variances, dtype=np.float64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.means.shape != (2,) or self.variances.shape != (2,) or self.weights.shape != (2,):
            raise InvalidConfig("mixture must have exactly two components")
        if (self.variances < _VARIANCE_FLOOR - 1e-15).any():
            raise InvalidConfig(f"variances must be >= {_VARIANCE_FLOOR}")
        if (self.weights < 0).any() or abs(self.weights.sum() - 1.0) > 1e-9:
            raise InvalidConfig("weights must be non-negative and sum to 1")

    @property
    def small_component(self) -> int:
        return int(np.argmin(self.means))


def _log_component_densities(x: np.ndarray, gmm: GmmModel) -> np.ndarray:
    """(n, 2) log of weight_k * N(x | mean_k, var_k)."""
    x = x[:, None]
    var = gmm.variances[None, :]
    log_norm = -0.5 * (np.log(2 * np.pi * var) + (x - gmm.means[None, :]) ** 2 / var)
    return np.log(gmm.weights[None, :]) + log_norm


def fit_gmm(losses) -> GmmModel:
    """EM fit of a two-component mixture to 1-D loss values.

    Deterministic initialization: means at the 10th/90th percentiles, equal
    weights, pooled variance. Stops when the mean log-likelihood improves
    by less than 1e-6 or after 100 iterations. Identical losses carry no
    separation signal and raise DegenerateDistribution (callers treat every
    pair as a clean candidate).
    """
    x = np.asarray(losses, dtype=np.float64).ravel()
    if x.size < 2:
        raise InvalidInput(f"need at least 2 loss values, got {x.size}")
    if not np.isfinite(x).all():
        raise InvalidInput("losses must be finite")
    if np.ptp(x) == 0.0:
        raise DegenerateDistribution("all losses identical; no mixture structure to fit")

    means = np.percentile(x, [10.0, 90.0]).astype(np.float64)
    variances = np.full(2, max(x.var(), _VARIANCE_FLOOR))
    weights = np.array([0.5, 0.5])
    gmm = GmmModel(means, variances, weights)

    prev_ll = -np.inf
    for _ in range(_EM_MAX_ITERS):
        log_joint = _log_component_densities(x, gmm)
        shift = log_joint.max(axis=1, keepdims=True)
        joint = np.exp(log_joint - shift)
        total = joint.sum(axis=1, keepdims=True)
        resp = joint / total
        ll = float((np.log(total[:, 0]) + shift[:, 0]).mean())

        mass = resp.sum(axis=0)
        mass = np.maximum(mass, 1e-12)
        means = (resp * x[:, None]).sum(axis=0) / mass
        variances = (resp * (x[:, None] - means[None, :]) ** 2).sum(axis=0) / mass
        variances = np.maximum(variances, _VARIANCE_FLOOR)
        weights = mass / x.size
        weights = weights / weights.sum()
        gmm = GmmModel(means, variances, weights)

        if ll - prev_ll < _EM_TOL and np.isfinite(prev_ll):
            break
        prev_ll = ll
    return gmm


def clean_posterior(loss, gmm: GmmModel):
    """Posterior probability that a loss came from the small-mean component."""
    x = np.atleast_1d(np.asarray(loss, dtype=np.float64))
    log_joint = _log_component_densities(x, gmm)
    shift = log_joint.max(axis=1, keepdims=True)
    joint = np.exp(log_joint - shift)
    post = joint[:, gmm.small_component] / joint.sum(axis=1)
    return float(post[0]) if np.isscalar(loss) or np.asarray(loss).ndim == 0 else post


def discrepancy_score(l_im):
    """Map an intra-modal loss in [0, inf) onto [0, 1): log1p(l) / (1 + log1p(l))."""
    x = np.asarray(l_im, dtype=np.float64)
    if (x < 0).any():
        raise InvalidInput("intra-modal loss must be non-negative")
    scaled = np.log1p(x)
    out = scaled / (1.0 + scaled)
    return float(out) if out.ndim == 0 else out


def penalization(y_im, alpha: float):
    """exp(y_im / alpha) >= 1; grows quickly as the discrepancy score rises."""
    if alpha <= 0 or not math.isfinite(alpha):
        raise InvalidConfig(f"alpha must be positive, got {alpha}")
    out = np.exp(np.asarray(y_im, dtype=np.float64) / alpha)
    return float(out) if out.ndim == 0 else out


def update_pseudo_label(prev, avg_prob, beta: float):
    """Momentum blend beta * prev + (1 - beta) * avg_prob."""
    if not 0 <= beta <= 1:
        raise InvalidConfig(f"beta must be in [0, 1], got {beta}")
    out = beta * np.asarray(prev, dtype=np.float64) + (1.0 - beta) * np.asarray(avg_prob, dtype=np.float64)
    return float(out) if out.ndim == 0 else out


class Partition(enum.Enum):
    CLEAN = "clean"
    LOCAL_ASSOCIATED = "local"
    NOISY = "noisy"


@dataclass
class PartitionAssignment:
    pair_id: int
    y_cm: float
    y_im: float
    partition: Partition
    penalization: float
    pseudo_label: float

    @property
    def recast_label(self) -> float:
        """Label actually used in training: 1 for Clean/LocalAssociated, the pseudo-label for Noisy."""
        return 1.0 if self.partition is not Partition.NOISY else self.pseudo_label


def _seeded_batches(n: int, batch_size: int, seed: int) -> list[np.ndarray]:
    order = np.random.default_rng(seed).permutation(n)
    return [order[lo : lo + batch_size] for lo in range(0, n, batch_size)]


def per_sample_cm_losses(
    pairs, model: SimilarityModel, temperature: float, batch_size: int, seed: int
) -> tuple[np.ndarray, np.ndarray]:
    """One frozen pass over the dataset in seeded batches.

    Returns, per pair: the unweighted cross-modal loss term against its
    in-batch negatives, and the direction-averaged diagonal matching
    probability (the pseudo-label target).
    """
    pairs = list(pairs)
    if not pairs:
        raise InvalidInput("dataset is empty")
    losses = np.empty(len(pairs))
    avg_probs = np.empty(len(pairs))
    with torch.no_grad():
        for idx in _seeded_batches(len(pairs), batch_size, seed):
            embedded = encode_batch([pairs[i] for i in idx], model)
            probs = matching_probabilities(batch_similarity_from_embedded(embedded, model), temperature)
            losses[idx] = per_pair_cm_terms(probs).numpy()
            avg_probs[idx] = diagonal_match_prob(probs).numpy()
    return losses, avg_probs


def per_sample_im_losses(
    pairs, model: SimilarityModel, temperature: float, symmetric: bool = False
) -> np.ndarray:
    """Intra-modal discrepancy per pair, each evaluated in isolation."""
    pairs = list(pairs)
    if not pairs:
        raise InvalidInput("dataset is empty")
    weight = model.similarity_params if model.train_similarity else None
    out = np.empty(len(pairs))
    with torch.no_grad():
        embedded = encode_batch(pairs, model)
        for i, emb in enumerate(embedded):
            out[i] = float(loss_im(emb, temperature, weight, symmetric))
    return out


def assign_partitions(
    pair_ids,
    y_cm,
    y_im,
    pseudo_labels,
    omega1: float,
    omega2: float,
    alpha: float,
) -> list[PartitionAssignment]:
    """Three-way split: Noisy if y_cm <= omega1, else Clean/LocalAssociated by y_im against omega2."""
    y_cm = np.asarray(y_cm, dtype=np.float64)
    y_im = np.asarray(y_im, dtype=np.float64)
    pseudo_labels = np.asarray(pseudo_labels, dtype=np.float64)
    pair_ids = list(pair_ids)
    if not (len(pair_ids) == y_cm.size == y_im.size == pseudo_labels.size):
        raise InvalidInput("pair_ids, scores, and pseudo-labels must have equal length")
    if not (0 < omega1 < 1 and 0 < omega2 < 1):
        raise InvalidConfig("omega thresholds must lie in (0, 1)")

    out = []
    for pid, cm, im, pseudo in zip(pair_ids, y_cm, y_im, pseudo_labels):
        if cm > omega1:
            part = Partition.CLEAN if im < omega2 else Partition.LOCAL_ASSOCIATED
        else:
            part = Partition.NOISY
        lam = float(penalization(im, alpha)) if part is Partition.LOCAL_ASSOCIATED else 1.0
        out.append(
            PartitionAssignment(
                pair_id=int(pid),
                y_cm=float(cm),
                y_im=float(im),
                partition=part,
                penalization=lam,
                pseudo_label=float(pseudo),
            )
        )
    return out


@dataclass
class DivisionOutcome:
    assignments: list[PartitionAssignment]
    gmm: GmmModel | None  # None when the loss distribution was degenerate
    cm_losses: np.ndarray
    avg_probs: np.ndarray
    pseudo_labels: np.ndarray

    def indices_for(self, partition: Partition) -> list[int]:
        return [i for i, a in enumerate(self.assignments) if a.partition is partition]

    def sizes(self) -> dict[str, int]:
        return {p.value: len(self.indices_for(p)) for p in Partition}


def divide(
    pairs,
    model: SimilarityModel,
    *,
    temperature: float,
    relation_temperature: float,
    batch_size: int,
    omega1: float,
    omega2: float,
    alpha: float,
    beta: float,
    seed: int,
    prev_pseudo: np.ndarray | None = None,
    symmetric_kl: bool = False,
    refine_with_im: bool = True,
) -> DivisionOutcome:
    """Full frozen-model division pass over a dataset.

    Pseudo-labels initialize to the current direction-averaged matching
    probability on the first call and follow the momentum update afterward.
    ``refine_with_im=False`` skips the discrepancy scoring entirely (every
    confident pair stays Clean) — the ablation switch.
    """
    pairs = list(pairs)
    cm_losses, avg_probs = per_sample_cm_losses(pairs, model, temperature, batch_size, seed)
    if refine_with_im:
        im_losses = per_sample_im_losses(pairs, model, relation_temperature, symmetric_kl)
        y_im = discrepancy_score(im_losses)
    else:
        y_im = np.zeros(len(pairs))

    try:
        gmm = fit_gmm(cm_losses)
        y_cm = clean_posterior(cm_losses, gmm)
    except DegenerateDistribution:
        gmm = None
        y_cm = np.ones(len(pairs))

    if prev_pseudo is None:
        pseudo = avg_probs.copy()
    else:
        prev_pseudo = np.asarray(prev_pseudo, dtype=np.float64)
        if prev_pseudo.shape != avg_probs.shape:
            raise InvalidInput("previous pseudo-labels have the wrong length")
        pseudo = update_pseudo_label(prev_pseudo, avg_probs, beta)

    assignments = assign_partitions(
        [p.pair_id for p in pairs], y_cm, y_im, pseudo, omega1, omega2, alpha
    )
    return DivisionOutcome(assignments, gmm, cm_losses, avg_probs, pseudo)


_CSV_COLUMNS = ["pair_id", "y_cm", "y_im", "partition", "lambda", "pseudo_label", "ground_truth_match"]


def write_partition_csv(assignments, path, true_match=None) -> None:
    """Dump assignments; ground-truth column is left blank when unavailable."""
    assignments = list(assignments)
    if true_match is not None and len(true_match) != len(assignments):
        raise InvalidInput("ground-truth mask length does not match assignments")
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(_CSV_COLUMNS)
        for i, a in enumerate(assignments):
            truth = "" if true_match is None else int(bool(true_match[i]))
            writer.writerow(
                [a.pair_id, repr(a.y_cm), repr(a.y_im), a.partition.value, repr(a.penalization), repr(a.pseudo_label), truth]
            )


def read_partition_csv(path) -> list[PartitionAssignment]:
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != _CSV_COLUMNS:
            raise InvalidInput(f"unexpected partition CSV columns: {reader.fieldnames}")
        out = []
        for row in reader:
            out.append(
                PartitionAssignment(
                    pair_id=int(row["pair_id"]),
                    y_cm=float(row["y_cm"]),
                    y_im=float(row["y_im"]),
                    partition=Partition(row["partition"]),
                    penalization=float(row["lambda"]),
                    pseudo_label=float(row["pseudo_label"]),
                )
            )
        return out
