"""Shared fixtures: tiny corpora and small random models."""

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from recon import SimilarityModel, derive_seed, generate_synthetic, inject_noise

settings.register_profile(
    "recon",
    deadline=None,
    max_examples=50,
    # Fixtures drawn into property tests here are read-only (fitted mixture
    # models, frozen corpora), so per-example reset is unnecessary.
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile("recon")

# The acceptance module records one gate line per release criterion here;
# printing them in the terminal summary keeps them visible even though
# pytest captures per-test stdout.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance gate")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


# Shapes kept deliberately small so the whole unit suite stays fast; the
# acceptance module runs the full-size experiments.
TINY = dict(n_objects_vocab=12, items_per_modality=3, d_v=10, d_l=8, noise_sigma=0.05)


def make_corpus(n_pairs=16, seed=0, split="train", **overrides):
    params = dict(TINY, world_seed=0, **overrides)
    return generate_synthetic(
        n_pairs,
        params.pop("n_objects_vocab"),
        params.pop("items_per_modality"),
        params.pop("d_v"),
        params.pop("d_l"),
        params.pop("noise_sigma"),
        seed=derive_seed(seed, "generate"),
        split=split,
        **params,
    )


def make_noisy_corpus(n_pairs=20, rate=0.4, seed=0, **overrides):
    clean = make_corpus(n_pairs=n_pairs, seed=seed, **overrides)
    return inject_noise(clean, rate, derive_seed(seed, "noise"))


def small_model(d_v=10, d_l=8, d_e=6, seed=0, train_similarity=False):
    return SimilarityModel.random_init(
        d_v, d_l, d_e, seed=seed, train_similarity=train_similarity
    )


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def tiny_corpus():
    return make_corpus()


@pytest.fixture
def noisy_corpus():
    return make_noisy_corpus()


@pytest.fixture
def model():
    return small_model()


@pytest.fixture(autouse=True)
def _torch_default_dtype():
    # The pipeline computes in float64 end to end; keep tests honest about it.
    previous = torch.get_default_dtype()
    yield
    torch.set_default_dtype(previous)
