"""Warmup + partition-specific training loop.

Schedule: ``warmup_epochs`` of triplet ranking on raw annotations, then per
epoch a frozen-model division pass (see ``division``) followed by SGD with
momentum over per-partition mini-batches:

* Clean — full dual objective: xi * cross-modal InfoNCE + intra-modal KL;
* LocalAssociated — same, but each pair's intra-modal term divided by its
  penalization factor;
* Noisy — label-weighted cross-entropy against momentum pseudo-labels (no
  intra-modal term: structure supervision on suspect pairs is poison).

Every random choice (init, shuffles, batch order) draws from a named
stream of the single config seed, so identical configs replay exactly.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .data import Corpus
from .division import DivisionOutcome, Partition, divide, write_partition_csv
from .errors import InvalidConfig, InvalidInput, NumericalFailure
from .evaluation import model_retrieval_report
from .model import (
    SimilarityModel,
    batch_similarity_from_embedded,
    encode_batch,
    save_checkpoint,
)
from .numerics import cross_entropy
from .relation import loss_cm, matching_probabilities, risk_im
from .seeding import derive_seed

__all__ = [
    "TrainConfig",
    "EpochReport",
    "TrainResult",
    "warmup_loss",
    "loss_clean",
    "loss_local",
    "loss_noisy",
    "train",
]


@dataclass
class TrainConfig:
    batch_size: int = 128
    tau: float = 0.1  # matching-probability softmax temperature
    tau_r: float = 0.1  # relation-matrix softmax temperature
    omega1: float = 0.5  # clean-posterior threshold
    omega2: float = 0.5  # discrepancy threshold
    alpha: float = 0.1  # penalization sharpness
    beta: float = 0.6  # pseudo-label momentum
    gamma: float = 0.2  # triplet margin
    xi: float = 5.0  # cross-modal loss weight in the dual objectives
    warmup_epochs: int = 5
    epochs: int = 15
    learning_rate: float = 0.05
    momentum: float = 0.9
    seed: int = 0
    embed_dim: int = 16
    train_similarity: bool = False  # learn the bilinear head (kept spectral-norm-clipped)
    symmetric_kl: bool = False  # symmetrize each relation KL term
    use_intra_loss: bool = True  # ablation: drop the intra-modal term from clean/local objectives
    use_im_refinement: bool = True  # ablation: drop the discrepancy split (no LocalAssociated partition)
    triplet_only: bool = False  # ablation: never divide, train every epoch like warmup

    def __post_init__(self):
        if self.batch_size < 1:
            raise InvalidConfig("batch_size must be >= 1")
        if self.tau <= 0 or self.tau_r <= 0:
            raise InvalidConfig("temperatures must be positive")
        if not (0 < self.omega1 < 1 and 0 < self.omega2 < 1):
            raise InvalidConfig("omega thresholds must lie in (0, 1)")
        if self.alpha <= 0:
            raise InvalidConfig("alpha must be positive")
        if not 0 <= self.beta <= 1:
            raise InvalidConfig("beta must be in [0, 1]")
        if self.gamma <= 0 or self.xi <= 0:
            raise InvalidConfig("gamma and xi must be positive")
        if self.warmup_epochs < 0 or self.epochs < 0:
            raise InvalidConfig("epoch counts must be >= 0")
        if self.learning_rate <= 0:
            raise InvalidConfig("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise InvalidConfig("momentum must be in [0, 1)")
        if self.embed_dim < 2:
            raise InvalidConfig("embed_dim must be >= 2")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(values) - known
        if unknown:
            raise InvalidConfig(f"unknown config fields: {sorted(unknown)}")
        return cls(**values)


@dataclass
class EpochReport:
    epoch: int
    phase: str  # "warmup" or "main"
    mean_warmup_loss: float | None
    mean_clean_loss: float | None
    mean_local_loss: float | None
    mean_noisy_loss: float | None
    partition_sizes: dict[str, int] | None
    val_rsum: float
    wall_clock_seconds: float

    def to_json_dict(self) -> dict:
        # Timing is environment noise and stays out of the serialized record,
        # which must be byte-identical across reruns of the same manifest.
        out = asdict(self)
        out.pop("wall_clock_seconds")
        return out


@dataclass
class TrainResult:
    init_model: SimilarityModel
    best_model: SimilarityModel
    final_model: SimilarityModel
    reports: list[EpochReport]
    best_epoch: int | None
    best_rsum: float | None
    final_division: DivisionOutcome | None


def warmup_loss(sim: torch.Tensor, gamma: float) -> torch.Tensor:
    """Bidirectional triplet hinge over a batch similarity matrix.

    Per anchor i, every other batch member serves as a negative in each
    direction: sum of [gamma - S_ii + S_ij]_+ and [gamma - S_ii + S_ji]_+
    over j != i, averaged over anchors.
    """
    if sim.ndim != 2 or sim.shape[0] != sim.shape[1]:
        raise InvalidInput("warmup loss expects a square similarity matrix")
    n = sim.shape[0]
    if n < 2:
        raise InvalidInput("warmup loss needs at least 2 pairs for in-batch negatives")
    diag = sim.diagonal()
    row_hinge = torch.clamp(gamma - diag[:, None] + sim, min=0.0)
    col_hinge = torch.clamp(gamma - diag[:, None] + sim.T, min=0.0)
    off = 1.0 - torch.eye(n, dtype=sim.dtype)
    return ((row_hinge + col_hinge) * off).sum() / n


def _batch_probs(embedded, model: SimilarityModel, tau: float):
    return matching_probabilities(batch_similarity_from_embedded(embedded, model), tau)


def _relation_weight(model: SimilarityModel):
    return model.similarity_params if model.train_similarity else None


def loss_clean(embedded, model: SimilarityModel, config: TrainConfig) -> torch.Tensor:
    """xi * InfoNCE at label 1 plus the mean intra-modal discrepancy."""
    cm = loss_cm(_batch_probs(embedded, model, config.tau))
    if not config.use_intra_loss:
        return config.xi * cm
    im = risk_im(embedded, config.tau_r, _relation_weight(model), symmetric=config.symmetric_kl)
    return config.xi * cm + im


def loss_local(embedded, model: SimilarityModel, config: TrainConfig, lambdas) -> torch.Tensor:
    """Like loss_clean, but each pair's intra-modal term is divided by its factor."""
    if lambdas is None:
        raise InvalidInput("local-partition batches need per-pair penalization factors")
    lambdas = np.asarray(lambdas, dtype=np.float64)
    if lambdas.shape != (len(embedded),):
        raise InvalidInput("need one penalization factor per pair")
    if (lambdas < 1.0).any():
        raise InvalidInput("penalization factors must be >= 1")
    cm = loss_cm(_batch_probs(embedded, model, config.tau))
    if not config.use_intra_loss:
        return config.xi * cm
    im = risk_im(
        embedded,
        config.tau_r,
        _relation_weight(model),
        pair_weights=1.0 / lambdas,
        symmetric=config.symmetric_kl,
    )
    return config.xi * cm + im


def loss_noisy(embedded, model: SimilarityModel, config: TrainConfig, recast_labels) -> torch.Tensor:
    """Pseudo-label-weighted cross-entropy on the diagonal matching probabilities."""
    labels = torch.as_tensor(np.asarray(recast_labels), dtype=torch.float64)
    if labels.shape != (len(embedded),):
        raise InvalidInput("need one recast label per pair")
    if ((labels < 0) | (labels > 1)).any():
        raise InvalidInput("recast labels must lie in [0, 1]")
    probs = _batch_probs(embedded, model, config.tau)
    terms = cross_entropy(labels, probs.p_v2l.diagonal()) + cross_entropy(labels, probs.p_l2v.diagonal())
    return terms.mean()


def _seeded_batches(n: int, batch_size: int, seed: int, merge_singleton: bool) -> list[np.ndarray]:
    order = np.random.default_rng(seed).permutation(n)
    batches = [order[lo : lo + batch_size] for lo in range(0, n, batch_size)]
    if merge_singleton and len(batches) > 1 and len(batches[-1]) == 1:
        batches[-2] = np.concatenate([batches[-2], batches[-1]])
        batches.pop()
    return batches


def _check_finite(loss: torch.Tensor, epoch: int, kind: str) -> None:
    if not torch.isfinite(loss):
        raise NumericalFailure(f"non-finite {kind} loss at epoch {epoch}: {float(loss.detach())}")


def train(
    corpus: Corpus,
    config: TrainConfig,
    val_corpus: Corpus | None = None,
    run_dir=None,
) -> TrainResult:
    """Run the full schedule and return init/best/final parameter snapshots.

    The best snapshot is the one with the highest validation rSum (first
    epoch wins ties); validation falls back to the training corpus when no
    separate split is given. With ``run_dir`` set, writes ``init.rcmd``,
    ``best.rcmd``, ``final.rcmd``, per-epoch ``epochs.jsonl`` lines, and the
    final ``partitions.csv``.
    """
    pairs = list(corpus.pairs)
    if not pairs:
        raise InvalidInput("training corpus is empty")
    eval_corpus = val_corpus if val_corpus is not None else corpus

    model = SimilarityModel.random_init(
        corpus.d_v, corpus.d_l, config.embed_dim, derive_seed(config.seed, "model-init"),
        train_similarity=config.train_similarity,
    )
    init_model = model.clone()
    model.requires_grad_(True)
    optimizer = torch.optim.SGD(model.parameters(), lr=config.learning_rate, momentum=config.momentum)

    run_path = None
    jsonl = None
    if run_dir is not None:
        run_path = Path(run_dir)
        run_path.mkdir(parents=True, exist_ok=True)
        save_checkpoint(init_model, run_path / "init.rcmd")
        jsonl = (run_path / "epochs.jsonl").open("w")

    total_epochs = config.warmup_epochs + config.epochs
    decay_at = math.floor(0.75 * total_epochs)
    pseudo = None
    reports: list[EpochReport] = []
    best_model = init_model.clone()
    best_rsum: float | None = None
    best_epoch: int | None = None

    def run_division(seed_stream: str) -> DivisionOutcome:
        nonlocal pseudo
        outcome = divide(
            pairs,
            model,
            temperature=config.tau,
            relation_temperature=config.tau_r,
            batch_size=config.batch_size,
            omega1=config.omega1,
            omega2=config.omega2,
            alpha=config.alpha,
            beta=config.beta,
            seed=derive_seed(config.seed, seed_stream),
            prev_pseudo=pseudo,
            symmetric_kl=config.symmetric_kl,
            refine_with_im=config.use_im_refinement,
        )
        pseudo = outcome.pseudo_labels
        return outcome

    def step(loss: torch.Tensor) -> None:
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        if config.train_similarity:
            model.clip_similarity_norm()

    try:
        for epoch in range(total_epochs):
            started = time.perf_counter()
            lr = config.learning_rate * (0.1 if epoch >= decay_at else 1.0)
            for group in optimizer.param_groups:
                group["lr"] = lr

            is_warmup = epoch < config.warmup_epochs or config.triplet_only
            sums = {"warmup": [0.0, 0], "clean": [0.0, 0], "local": [0.0, 0], "noisy": [0.0, 0]}
            sizes: dict[str, int] | None = None

            if is_warmup:
                batches = _seeded_batches(
                    len(pairs), config.batch_size, derive_seed(config.seed, f"warmup-order-{epoch}"),
                    merge_singleton=True,
                )
                for idx in batches:
                    if len(idx) < 2:
                        continue  # a lone leftover pair has no in-batch negatives
                    embedded = encode_batch([pairs[i] for i in idx], model)
                    loss = warmup_loss(batch_similarity_from_embedded(embedded, model), config.gamma)
                    _check_finite(loss, epoch, "warmup")
                    step(loss)
                    sums["warmup"][0] += float(loss.detach())
                    sums["warmup"][1] += 1
            else:
                outcome = run_division(f"division-{epoch}")
                sizes = outcome.sizes()
                tagged = []
                for part in Partition:
                    members = outcome.indices_for(part)
                    if not members:
                        continue
                    part_batches = _seeded_batches(
                        len(members), config.batch_size,
                        derive_seed(config.seed, f"batches-{epoch}-{part.value}"),
                        merge_singleton=False,
                    )
                    tagged.extend((part, [members[i] for i in b]) for b in part_batches)
                order = np.random.default_rng(derive_seed(config.seed, f"batch-order-{epoch}")).permutation(len(tagged))

                for t in order:
                    part, idx = tagged[t]
                    embedded = encode_batch([pairs[i] for i in idx], model)
                    if part is Partition.CLEAN:
                        loss = loss_clean(embedded, model, config)
                    elif part is Partition.LOCAL_ASSOCIATED:
                        lambdas = [outcome.assignments[i].penalization for i in idx]
                        loss = loss_local(embedded, model, config, lambdas)
                    else:
                        recast = [outcome.assignments[i].recast_label for i in idx]
                        loss = loss_noisy(embedded, model, config, recast)
                    _check_finite(loss, epoch, part.value)
                    step(loss)
                    sums[part.value][0] += float(loss.detach())
                    sums[part.value][1] += 1

            rsum = model_retrieval_report(eval_corpus, model).rsum
            if best_rsum is None or rsum > best_rsum:
                best_rsum = rsum
                best_epoch = epoch
                best_model = model.clone()

            def mean_of(key):
                total, count = sums[key]
                return total / count if count else None

            reports.append(
                EpochReport(
                    epoch=epoch,
                    phase="warmup" if is_warmup else "main",
                    mean_warmup_loss=mean_of("warmup"),
                    mean_clean_loss=mean_of("clean"),
                    mean_local_loss=mean_of("local"),
                    mean_noisy_loss=mean_of("noisy"),
                    partition_sizes=sizes,
                    val_rsum=rsum,
                    wall_clock_seconds=time.perf_counter() - started,
                )
            )
            if jsonl is not None:
                jsonl.write(json.dumps(reports[-1].to_json_dict(), sort_keys=True) + "\n")
                jsonl.flush()

        final_division = None
        if len(pairs) >= 2:
            final_division = run_division("division-final")
    finally:
        if jsonl is not None:
            jsonl.close()

    model.requires_grad_(False)
    result = TrainResult(
        init_model=init_model,
        best_model=best_model,
        final_model=model.clone(),
        reports=reports,
        best_epoch=best_epoch,
        best_rsum=best_rsum,
        final_division=final_division,
    )
    if run_path is not None:
        save_checkpoint(result.best_model, run_path / "best.rcmd")
        save_checkpoint(result.final_model, run_path / "final.rcmd")
        if final_division is not None:
            truth = corpus.true_match_mask() if corpus.has_ground_truth else None
            write_partition_csv(final_division.assignments, run_path / "partitions.csv", truth)
    return result
