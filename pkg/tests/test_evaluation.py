"""Retrieval recall, division confusion accounting, relation-alignment risk."""

import math

import numpy as np
import pytest

from recon import (
    InvalidInput,
    Partition,
    PartitionAssignment,
    SimilarityModel,
    division_quality,
    generate_synthetic,
    inject_noise,
    model_retrieval_report,
    recall_at_k,
    relation_alignment_risk,
    retrieval_report,
)

from conftest import make_corpus, small_model


def assignment(pair_id, partition, y_cm=0.5, y_im=0.1):
    return PartitionAssignment(
        pair_id=pair_id,
        y_cm=y_cm,
        y_im=y_im,
        partition=partition,
        penalization=1.0,
        pseudo_label=0.5,
    )


class TestRecallAtK:
    def test_dominant_diagonal_is_perfect(self):
        sim = np.eye(8) * 10 + np.random.default_rng(0).normal(size=(8, 8))
        recalls = recall_at_k(sim, np.arange(8))
        assert recalls[1] == pytest.approx(100.0)

    def test_true_item_always_sixth(self):
        # Gallery scores descend with column index; the true item sits at
        # rank 6 for every query.
        sim = np.tile(np.arange(10, 0, -1, dtype=float), (10, 1))
        true_index = np.full(10, 5)  # column 5 is the 6th-best score
        recalls = recall_at_k(sim, true_index)
        assert recalls[1] == pytest.approx(0.0)
        assert recalls[5] == pytest.approx(0.0)
        assert recalls[10] == pytest.approx(100.0)

    def test_matches_sort_oracle(self):
        rng = np.random.default_rng(3)
        sim = rng.normal(size=(20, 20))
        true_index = np.arange(20)
        recalls = recall_at_k(sim, true_index)
        for k in (1, 5, 10):
            hits = 0
            for q in range(20):
                order = np.argsort(-sim[q], kind="stable")
                hits += int(np.where(order == q)[0][0] < k)
            assert recalls[k] == pytest.approx(100.0 * hits / 20)

    def test_tie_goes_to_lower_gallery_index(self):
        sim = np.array([[1.0, 1.0]])
        # Query 0's true item is column 1; column 0 ties and wins by index.
        assert recall_at_k(sim, np.array([1]), ks=(1,))[1] == pytest.approx(0.0)
        assert recall_at_k(sim, np.array([0]), ks=(1,))[1] == pytest.approx(100.0)

    def test_rejects_bad_index(self):
        with pytest.raises(InvalidInput):
            recall_at_k(np.eye(3), np.array([0, 1, 5]))


class TestRetrievalReport:
    def test_rsum_adds_six_recalls(self):
        rng = np.random.default_rng(1)
        sim = rng.normal(size=(12, 12))
        report = retrieval_report(sim)
        total = sum(report.image_to_text.values()) + sum(report.text_to_image.values())
        assert report.rsum == pytest.approx(total)

    def test_text_direction_uses_transpose(self):
        sim = np.array([[5.0, 0.0], [0.0, -5.0]])
        report = retrieval_report(sim)
        # Column 1's best row is row 0, so text query 1 misses at rank 1.
        assert report.text_to_image[1] == pytest.approx(50.0)

    def test_model_report_on_separable_corpus(self):
        corpus = generate_synthetic(10, 12, 3, 8, 8, 0.0, seed=1, latent_dim=8, mixing="identity")
        report = model_retrieval_report(corpus, SimilarityModel.identity(8))
        assert report.rsum > 0.0
        assert set(report.image_to_text) == {1, 5, 10}


class TestDivisionQuality:
    def test_perfect_division(self):
        assignments = [assignment(0, Partition.CLEAN), assignment(1, Partition.NOISY)]
        report = division_quality(assignments, np.array([True, False]))
        assert report.mismatch_precision == pytest.approx(1.0)
        assert report.mismatch_recall == pytest.approx(1.0)
        assert report.precision_defined and report.recall_defined

    def test_all_clean_no_mismatches_flagged_undefined(self):
        assignments = [assignment(i, Partition.CLEAN) for i in range(4)]
        report = division_quality(assignments, np.ones(4, dtype=bool))
        assert report.mismatch_precision == pytest.approx(1.0)
        assert report.mismatch_recall == pytest.approx(1.0)
        assert not report.precision_defined
        assert not report.recall_defined

    def test_one_escaped_mismatch_drops_recall(self):
        truth = np.array([False] * 10 + [True] * 10)
        assignments = [
            assignment(i, Partition.CLEAN if i == 0 else Partition.NOISY) for i in range(10)
        ] + [assignment(i, Partition.CLEAN) for i in range(10, 20)]
        report = division_quality(assignments, truth)
        assert report.mismatch_recall == pytest.approx(0.9)
        assert report.mismatch_precision == pytest.approx(1.0)

    def test_partition_counts_add_up(self):
        truth = np.array([True, True, False, True])
        parts = [Partition.CLEAN, Partition.LOCAL_ASSOCIATED, Partition.NOISY, Partition.NOISY]
        report = division_quality(
            [assignment(i, p) for i, p in enumerate(parts)], truth
        )
        assert report.total == 4
        assert report.partitions["clean"].size == 1
        assert report.partitions["local"].size == 1
        assert report.partitions["noisy"].size == 2
        assert report.partitions["noisy"].true_mismatches == 1

    def test_rejects_length_mismatch(self):
        with pytest.raises(InvalidInput):
            division_quality([assignment(0, Partition.CLEAN)], np.array([True, False]))


class TestRelationAlignmentRisk:
    def test_zero_for_identity_on_noiseless(self):
        corpus = generate_synthetic(8, 12, 3, 8, 8, 0.0, seed=1, latent_dim=8, mixing="identity")
        risk = relation_alignment_risk(corpus, SimilarityModel.identity(8), 0.1)
        assert risk == pytest.approx(0.0, abs=1e-9)

    def test_positive_for_random_model(self):
        corpus = make_corpus(n_pairs=10)
        risk = relation_alignment_risk(corpus, small_model(), 0.1)
        assert risk > 0.0

    def test_mismatched_pairs_are_ignored(self):
        corpus = generate_synthetic(12, 12, 3, 8, 8, 0.0, seed=1, latent_dim=8, mixing="identity")
        noisy = inject_noise(corpus, 0.5, seed=2)
        # Mismatched pairs share no objects, so only true pairs contribute;
        # the identity model still scores a clean zero.
        risk = relation_alignment_risk(noisy, SimilarityModel.identity(8), 0.1)
        assert risk == pytest.approx(0.0, abs=1e-9)

    def test_worse_model_scores_higher(self):
        corpus = generate_synthetic(16, 12, 3, 8, 8, 0.0, seed=1, latent_dim=8, mixing="identity")
        aligned = relation_alignment_risk(corpus, SimilarityModel.identity(8), 0.1)
        scrambled = relation_alignment_risk(corpus, small_model(d_v=8, d_l=8, d_e=8, seed=9), 0.1)
        assert scrambled > aligned
