"""Cross-modal retrieval training that survives mismatched pair annotations.

The pipeline couples two consistency signals — in-batch matching
probabilities across modalities and item-relation structure within each
modality — to sort annotated pairs into clean, locally-associated, and
noisy partitions, each trained with its own objective. See the module
docstrings (`relation`, `division`, `training`) for the mechanics.
"""

__version__ = "0.1.0"

from .data import (
    Corpus,
    FeaturePair,
    GroundTruth,
    corpus_equal,
    generate_synthetic,
    inject_noise,
    read_corpus,
    write_corpus,
)
from .division import (
    DivisionOutcome,
    GmmModel,
    Partition,
    PartitionAssignment,
    assign_partitions,
    clean_posterior,
    discrepancy_score,
    divide,
    fit_gmm,
    penalization,
    per_sample_cm_losses,
    per_sample_im_losses,
    read_partition_csv,
    update_pseudo_label,
    write_partition_csv,
)
from .errors import (
    DegenerateDistribution,
    FormatError,
    InvalidConfig,
    InvalidInput,
    NormalizationError,
    NumericalFailure,
    ReconError,
)
from .evaluation import (
    DivisionReport,
    RetrievalReport,
    division_quality,
    model_retrieval_report,
    recall_at_k,
    relation_alignment_risk,
    retrieval_report,
)
from .model import SimilarityModel, encode, encode_batch, load_checkpoint, save_checkpoint
from .numerics import (
    EPSILON_FLOOR,
    cross_entropy,
    grad_check,
    kl_divergence,
    matrix_kl,
    softmax_row,
    softmax_rows,
)
from .relation import loss_cm, loss_im, matching_probabilities, proxy_reconstruct, risk_im
from .seeding import derive_seed
from .training import EpochReport, TrainConfig, TrainResult, loss_clean, loss_local, loss_noisy, train, warmup_loss

__all__ = [
    "__version__",
    # data
    "Corpus",
    "FeaturePair",
    "GroundTruth",
    "corpus_equal",
    "generate_synthetic",
    "inject_noise",
    "read_corpus",
    "write_corpus",
    # division
    "DivisionOutcome",
    "GmmModel",
    "Partition",
    "PartitionAssignment",
    "assign_partitions",
    "fit_gmm",
    "clean_posterior",
    "discrepancy_score",
    "penalization",
    "per_sample_cm_losses",
    "per_sample_im_losses",
    "update_pseudo_label",
    "divide",
    "read_partition_csv",
    "write_partition_csv",
    # errors
    "ReconError",
    "InvalidInput",
    "InvalidConfig",
    "NumericalFailure",
    "NormalizationError",
    "DegenerateDistribution",
    "FormatError",
    # evaluation
    "RetrievalReport",
    "DivisionReport",
    "recall_at_k",
    "retrieval_report",
    "model_retrieval_report",
    "division_quality",
    "relation_alignment_risk",
    # model
    "SimilarityModel",
    "encode",
    "encode_batch",
    "save_checkpoint",
    "load_checkpoint",
    # numerics
    "EPSILON_FLOOR",
    "softmax_row",
    "softmax_rows",
    "kl_divergence",
    "matrix_kl",
    "cross_entropy",
    "grad_check",
    # relation
    "matching_probabilities",
    "loss_cm",
    "loss_im",
    "risk_im",
    "proxy_reconstruct",
    # seeding
    "derive_seed",
    # training
    "TrainConfig",
    "TrainResult",
    "EpochReport",
    "warmup_loss",
    "loss_clean",
    "loss_local",
    "loss_noisy",
    "train",
]
