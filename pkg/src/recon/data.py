"""Synthetic paired-feature corpora, caption-shuffle noise, and corpus files.

A corpus holds visual/text feature sequences per pair. Synthetic pairs are
built from shared latent object prototypes so that matched pairs agree both
in their cross-modal items and in their within-modality relation structure;
ground truth (match flag + per-item object ids) rides along for evaluation.

The on-disk format is a small binary container (magic ``RCDS``) for the
32-bit feature payload plus a JSON sidecar ``<file>.meta.json`` carrying
the noise mask and object assignments.
"""

from __future__ import annotations

import json
import math
import struct
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidConfig, InvalidInput

__all__ = [
    "GroundTruth",
    "FeaturePair",
    "Corpus",
    "generate_synthetic",
    "inject_noise",
    "write_corpus",
    "read_corpus",
    "corpus_equal",
]

CORPUS_MAGIC = b"RCDS"
CORPUS_VERSION = 1
_SPLIT_CODES = {"train": 0, "val": 1, "test": 2}
_SPLIT_NAMES = {v: k for k, v in _SPLIT_CODES.items()}


@dataclass
class GroundTruth:
    """Hidden truth for a pair: whether it matches and which latent object each item renders."""

    true_match: bool
    visual_objects: tuple[int, ...]
    text_objects: tuple[int, ...]


@dataclass
class FeaturePair:
    pair_id: int
    visual_features: np.ndarray  # (N_V, d_v) float32
    text_features: np.ndarray  # (N_L, d_l) float32
    annotated_label: int = 1  # noise is hidden: delivered pairs are always annotated matched
    ground_truth: GroundTruth | None = None

    @property
    def n_visual(self) -> int:
        return self.visual_features.shape[0]

    @property
    def n_text(self) -> int:
        return self.text_features.shape[0]


@dataclass
class Corpus:
    split: str
    pairs: list[FeaturePair]
    d_v: int
    d_l: int
    noise_rate: float = 0.0
    generator_params: dict | None = None

    def __len__(self) -> int:
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    @property
    def has_ground_truth(self) -> bool:
        return all(p.ground_truth is not None for p in self.pairs)

    def true_match_mask(self) -> np.ndarray:
        if not self.has_ground_truth:
            raise InvalidInput("corpus has no ground truth")
        return np.array([p.ground_truth.true_match for p in self.pairs], dtype=bool)


def _unit_rows(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def _orthonormal_rows(rng: np.random.Generator, n_rows: int, n_cols: int) -> np.ndarray:
    # QR of a random Gaussian gives orthonormal columns; transpose to rows.
    # Orthonormal rows preserve prototype inner products after mixing.
    q, _ = np.linalg.qr(rng.standard_normal((n_cols, n_rows)))
    return q.T


def generate_synthetic(
    n_pairs: int,
    n_objects_vocab: int,
    items_per_modality: int,
    d_v: int,
    d_l: int,
    noise_sigma: float,
    seed: int,
    split: str = "train",
    latent_dim: int | None = None,
    mixing: str = "random",
    world_seed: int = 0,
    n_clusters: int | None = None,
    cluster_spread: float = 0.3,
) -> Corpus:
    """Generate a corpus of matched pairs from shared object prototypes.

    Each pair samples 2..items_per_modality distinct objects from a vocab of
    unit-vector prototypes; every object renders as one or more visual
    regions and one or more text words (prototype x mixing matrix +
    Gaussian feature noise). Item counts are drawn independently per
    modality, so N_V and N_L generally differ.

    The prototype vocabulary and the two mixing matrices — the "world" a
    corpus is sampled from — depend only on ``world_seed`` and the shape
    arguments, while ``seed`` drives pair composition and feature noise.
    Train/val/test splits of one experiment must share a world (same
    world_seed and dims) or there is nothing transferable to learn.

    With ``n_clusters`` set, prototypes sit near cluster centers
    (``normalize(center + cluster_spread * direction)``) and every pair
    draws its objects from a single cluster. Same-cluster pairs then have
    nearly identical mean summaries and are only separable through their
    item-level structure, which makes holistic matching genuinely harder
    than item matching — useful for exercising the structure-based losses.

    ``mixing="identity"`` requires d_v == d_l == latent_dim and makes
    matched items literally identical at noise_sigma=0.
    """
    if n_pairs < 1:
        raise InvalidConfig(f"n_pairs must be >= 1, got {n_pairs}")
    if items_per_modality < 2:
        raise InvalidConfig(f"items_per_modality must be >= 2, got {items_per_modality}")
    if n_objects_vocab < items_per_modality:
        raise InvalidConfig("object vocabulary must be at least items_per_modality")
    if noise_sigma < 0:
        raise InvalidConfig("noise_sigma must be >= 0")
    if split not in _SPLIT_CODES:
        raise InvalidConfig(f"unknown split {split!r}")
    if latent_dim is None:
        latent_dim = min(d_v, d_l)
    if latent_dim < 2 or latent_dim > min(d_v, d_l):
        raise InvalidConfig(f"latent_dim must be in [2, min(d_v, d_l)], got {latent_dim}")
    if mixing == "identity" and not (d_v == d_l == latent_dim):
        raise InvalidConfig("identity mixing requires d_v == d_l == latent_dim")
    if mixing not in ("identity", "random"):
        raise InvalidConfig(f"unknown mixing {mixing!r}")
    if n_clusters is not None:
        if n_clusters < 1 or n_objects_vocab % n_clusters != 0:
            raise InvalidConfig("n_clusters must divide the object vocabulary evenly")
        if n_objects_vocab // n_clusters < items_per_modality:
            raise InvalidConfig("each cluster must hold at least items_per_modality objects")
        if cluster_spread <= 0:
            raise InvalidConfig("cluster_spread must be positive")

    world_rng = np.random.default_rng(world_seed)
    if n_clusters is None:
        prototypes = _unit_rows(world_rng.standard_normal((n_objects_vocab, latent_dim)))
        cluster_of = None
    else:
        per_cluster = n_objects_vocab // n_clusters
        centers = _unit_rows(world_rng.standard_normal((n_clusters, latent_dim)))
        directions = _unit_rows(world_rng.standard_normal((n_objects_vocab, latent_dim)))
        cluster_of = np.repeat(np.arange(n_clusters), per_cluster)
        prototypes = _unit_rows(centers[cluster_of] + cluster_spread * directions)
    if mixing == "identity":
        mix_v = np.eye(latent_dim)
        mix_l = np.eye(latent_dim)
    else:
        mix_v = _orthonormal_rows(world_rng, latent_dim, d_v)
        mix_l = _orthonormal_rows(world_rng, latent_dim, d_l)
    rng = np.random.default_rng(seed)

    def draw_items(objects: np.ndarray, mix: np.ndarray, dim: int) -> tuple[np.ndarray, tuple[int, ...]]:
        n_items = int(rng.integers(len(objects), items_per_modality + 1))
        assignment = list(objects)
        if n_items > len(objects):
            assignment += list(rng.choice(objects, size=n_items - len(objects), replace=True))
        assignment = np.array(assignment)
        rng.shuffle(assignment)
        feats = prototypes[assignment] @ mix
        if noise_sigma > 0:
            feats = feats + noise_sigma * rng.standard_normal((n_items, dim))
        return feats.astype(np.float32), tuple(int(o) for o in assignment)

    pairs = []
    for pid in range(n_pairs):
        n_obj = int(rng.integers(2, items_per_modality + 1))
        if cluster_of is None:
            candidates = np.arange(n_objects_vocab)
        else:
            candidates = np.flatnonzero(cluster_of == int(rng.integers(n_clusters)))
        objects = rng.choice(candidates, size=n_obj, replace=False)
        vis, vis_objs = draw_items(objects, mix_v, d_v)
        txt, txt_objs = draw_items(objects, mix_l, d_l)
        pairs.append(
            FeaturePair(
                pair_id=pid,
                visual_features=vis,
                text_features=txt,
                ground_truth=GroundTruth(True, vis_objs, txt_objs),
            )
        )

    params = {
        "n_pairs": n_pairs,
        "n_objects_vocab": n_objects_vocab,
        "items_per_modality": items_per_modality,
        "d_v": d_v,
        "d_l": d_l,
        "noise_sigma": noise_sigma,
        "seed": seed,
        "latent_dim": latent_dim,
        "mixing": mixing,
        "world_seed": world_seed,
        "n_clusters": n_clusters,
        "cluster_spread": cluster_spread,
    }
    return Corpus(split=split, pairs=pairs, d_v=d_v, d_l=d_l, noise_rate=0.0, generator_params=params)


def _sattolo_cycle(rng: np.random.Generator, k: int) -> np.ndarray:
    """Single-cycle permutation of range(k); has no fixed point for k >= 2."""
    perm = np.arange(k)
    for i in range(k - 1, 0, -1):
        j = int(rng.integers(0, i))
        perm[i], perm[j] = perm[j], perm[i]
    return perm


def inject_noise(corpus: Corpus, rate: float, seed: int) -> Corpus:
    """Mismatch ceil(rate * n) pairs by deranging their captions.

    The chosen subset's text features (and text object ids) are permuted by
    a fixed-point-free cycle, so every selected pair ends up with some other
    pair's caption and the realized noise rate is exact. Annotated labels
    stay 1; ground-truth match flags flip to False.
    """
    if not (0 <= rate < 1):
        raise InvalidInput(f"noise rate must be in [0, 1), got {rate}")
    if corpus.split != "train":
        raise InvalidInput("noise injection is only defined for the train split")
    n = len(corpus.pairs)
    k = int(math.ceil(rate * n - 1e-9))
    if k == 0:
        return replace(corpus, pairs=list(corpus.pairs), noise_rate=0.0)
    if k == 1:
        if n < 2:
            warnings.warn("cannot derange a single pair; corpus left noiseless")
            return replace(corpus, pairs=list(corpus.pairs), noise_rate=0.0)
        k = 2  # a 1-element subset cannot be deranged

    rng = np.random.default_rng(seed)
    subset = np.sort(rng.choice(n, size=k, replace=False))
    perm = _sattolo_cycle(rng, k)

    new_pairs = list(corpus.pairs)
    for pos, idx in enumerate(subset):
        victim = corpus.pairs[idx]
        donor = corpus.pairs[subset[perm[pos]]]
        gt = None
        if victim.ground_truth is not None and donor.ground_truth is not None:
            gt = GroundTruth(
                true_match=False,
                visual_objects=victim.ground_truth.visual_objects,
                text_objects=donor.ground_truth.text_objects,
            )
        new_pairs[idx] = FeaturePair(
            pair_id=victim.pair_id,
            visual_features=victim.visual_features,
            text_features=donor.text_features,
            annotated_label=1,
            ground_truth=gt,
        )
    return replace(corpus, pairs=new_pairs, noise_rate=k / n)


def write_corpus(corpus: Corpus, path) -> None:
    """Write the binary container and its JSON metadata sidecar."""
    path = Path(path)
    n = len(corpus.pairs)
    for p in corpus.pairs:
        if p.visual_features.shape[1:] != (corpus.d_v,) or p.text_features.shape[1:] != (corpus.d_l,):
            raise InvalidInput(f"pair {p.pair_id} does not match corpus dims")

    blob = bytearray()
    blob += CORPUS_MAGIC
    blob += struct.pack("<IIIII", CORPUS_VERSION, _SPLIT_CODES[corpus.split], n, corpus.d_v, corpus.d_l)
    for p in corpus.pairs:
        blob += struct.pack("<II", p.n_visual, p.n_text)
    for p in corpus.pairs:
        blob += np.ascontiguousarray(p.visual_features, dtype="<f4").tobytes()
        blob += np.ascontiguousarray(p.text_features, dtype="<f4").tobytes()
    path.write_bytes(bytes(blob))

    if any(p.ground_truth is not None for p in corpus.pairs):
        if not corpus.has_ground_truth:
            raise InvalidInput("ground truth must be present for all pairs or none")
        ground_truth = {
            "true_match": [bool(p.ground_truth.true_match) for p in corpus.pairs],
            "visual_objects": [list(p.ground_truth.visual_objects) for p in corpus.pairs],
            "text_objects": [list(p.ground_truth.text_objects) for p in corpus.pairs],
        }
    else:
        ground_truth = None
    meta = {
        "format_version": CORPUS_VERSION,
        "split": corpus.split,
        "n_pairs": n,
        "d_v": corpus.d_v,
        "d_l": corpus.d_l,
        "noise_rate": corpus.noise_rate,
        "pair_ids": [p.pair_id for p in corpus.pairs],
        "ground_truth": ground_truth,
        "generator": corpus.generator_params,
    }
    sidecar_path(path).write_text(json.dumps(meta, indent=1))


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta.json")


def _take(blob: bytes, offset: int, size: int, section: str) -> tuple[bytes, int]:
    if offset + size > len(blob):
        raise FormatError(f"truncated file: missing {section}", offset=offset)
    return blob[offset : offset + size], offset + size


def read_corpus(path) -> Corpus:
    """Read a corpus container; raises FormatError on any malformed input."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc

    magic, off = _take(blob, 0, 4, "magic")
    if magic != CORPUS_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {CORPUS_MAGIC!r}", offset=0)
    header, off = _take(blob, off, 20, "header")
    version, split_code, n, d_v, d_l = struct.unpack("<IIIII", header)
    if version != CORPUS_VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    if split_code not in _SPLIT_NAMES:
        raise FormatError(f"unknown split code {split_code}", offset=8)

    counts_bytes, off = _take(blob, off, 8 * n, "item counts table")
    counts = np.frombuffer(counts_bytes, dtype="<u4").reshape(n, 2)
    expected_payload = int(4 * (counts[:, 0].astype(np.int64) * d_v + counts[:, 1].astype(np.int64) * d_l).sum())
    if off + expected_payload > len(blob):
        raise FormatError("truncated file: missing feature payload", offset=off)
    if off + expected_payload < len(blob):
        raise FormatError("trailing bytes after feature payload", offset=off + expected_payload)

    meta = None
    meta_path = sidecar_path(path)
    if meta_path.exists():
        try:
            meta = json.loads(meta_path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise FormatError(f"malformed sidecar {meta_path.name}: {exc}") from exc
        for key in ("split", "n_pairs", "d_v", "d_l"):
            if key not in meta:
                raise FormatError(f"sidecar missing field {key!r}")
        if (meta["split"], meta["n_pairs"], meta["d_v"], meta["d_l"]) != (_SPLIT_NAMES[split_code], n, d_v, d_l):
            raise FormatError("sidecar metadata disagrees with binary header")

    gt = meta.get("ground_truth") if meta else None
    if gt is not None:
        for key in ("true_match", "visual_objects", "text_objects"):
            if key not in gt or len(gt[key]) != n:
                raise FormatError(f"sidecar ground truth field {key!r} missing or wrong length")
    pair_ids = meta.get("pair_ids") if meta else None
    if pair_ids is not None and len(pair_ids) != n:
        raise FormatError("sidecar pair_ids has wrong length")

    pairs = []
    for i in range(n):
        n_vis, n_txt = int(counts[i, 0]), int(counts[i, 1])
        vis_bytes, off = _take(blob, off, 4 * n_vis * d_v, f"visual features of pair {i}")
        txt_bytes, off = _take(blob, off, 4 * n_txt * d_l, f"text features of pair {i}")
        vis = np.frombuffer(vis_bytes, dtype="<f4").reshape(n_vis, d_v).copy()
        txt = np.frombuffer(txt_bytes, dtype="<f4").reshape(n_txt, d_l).copy()
        ground = None
        if gt is not None:
            ground = GroundTruth(
                true_match=bool(gt["true_match"][i]),
                visual_objects=tuple(int(o) for o in gt["visual_objects"][i]),
                text_objects=tuple(int(o) for o in gt["text_objects"][i]),
            )
        pairs.append(
            FeaturePair(
                pair_id=int(pair_ids[i]) if pair_ids is not None else i,
                visual_features=vis,
                text_features=txt,
                ground_truth=ground,
            )
        )

    return Corpus(
        split=_SPLIT_NAMES[split_code],
        pairs=pairs,
        d_v=d_v,
        d_l=d_l,
        noise_rate=float(meta["noise_rate"]) if meta and "noise_rate" in meta else 0.0,
        generator_params=meta.get("generator") if meta else None,
    )


def corpus_equal(a: Corpus, b: Corpus) -> bool:
    """Bit-exact equality of payload and metadata (used by round-trip tests)."""
    if (a.split, a.d_v, a.d_l, a.noise_rate, a.generator_params, len(a)) != (
        b.split,
        b.d_v,
        b.d_l,
        b.noise_rate,
        b.generator_params,
        len(b),
    ):
        return False
    for pa, pb in zip(a.pairs, b.pairs):
        if pa.pair_id != pb.pair_id or pa.annotated_label != pb.annotated_label:
            return False
        if pa.visual_features.shape != pb.visual_features.shape or pa.text_features.shape != pb.text_features.shape:
            return False
        if not (np.array_equal(pa.visual_features, pb.visual_features) and np.array_equal(pa.text_features, pb.text_features)):
            return False
        if pa.ground_truth != pb.ground_truth:
            return False
    return True
