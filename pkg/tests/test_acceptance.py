"""Acceptance gate: one test per release criterion, sized to run on a laptop.

Each test prints a single PASS/FAIL line (visible in captured output) and
asserts afterwards, so a red criterion still reports its measurements.
Criterion 6's ablation arm is currently expected to fail; the experiment is
implemented faithfully and its numbers are printed rather than tuned away.
"""

import math
import time

import numpy as np
import pytest
import torch

import conftest

from recon import (
    FormatError,
    TrainConfig,
    corpus_equal,
    derive_seed,
    fit_gmm,
    generate_synthetic,
    inject_noise,
    loss_clean,
    loss_cm,
    loss_local,
    loss_noisy,
    matching_probabilities,
    proxy_reconstruct,
    read_corpus,
    relation_alignment_risk,
    risk_im,
    train,
    warmup_loss,
    write_corpus,
)
from recon.cli import main as cli_main
from recon.division import clean_posterior, discrepancy_score, penalization, update_pseudo_label
from recon.evaluation import division_quality, model_retrieval_report
from recon.model import (
    SimilarityModel,
    batch_similarity_from_embedded,
    encode_batch,
    parameter_vector,
    value_and_grad_closure,
)
from recon.numerics import cross_entropy, grad_check, kl_divergence, softmax_row, softmax_rows
from recon.relation import intra_relation


def report(criterion, ok, detail):
    line = f"[criterion {criterion}] {'PASS' if ok else 'FAIL'}: {detail}"
    conftest.ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def t(values):
    return torch.tensor(values, dtype=torch.float64)


# --------------------------------------------------------------- criterion 1


def test_criterion_1_formula_examples():
    """Closed-form examples: 1e-9 for pure arithmetic, 1e-6 for softmax/KL chains."""
    started = time.perf_counter()
    e = math.e
    checks = [
        # description, got, want, tolerance
        ("softmax equal scores", softmax_row(t([2.2, 2.2]), 0.1)[0].item(), 0.5, 1e-9),
        ("softmax [1,0] tau .1", softmax_row(t([1.0, 0.0]), 0.1)[0].item(), 0.9999546, 1e-6),
        ("softmax overflow guard", softmax_row(t([1000.0, 0.0]), 1.0)[0].item(), 1.0, 1e-9),
        ("kl identical", kl_divergence(t([0.5, 0.5]), t([0.5, 0.5])).item(), 0.0, 1e-9),
        (
            "kl [.7,.3]||[.5,.5]",
            kl_divergence(t([0.7, 0.3]), t([0.5, 0.5])).item(),
            0.7 * math.log(1.4) + 0.3 * math.log(0.6),
            1e-6,
        ),
        ("ce label 1 prob 1", cross_entropy(t(1.0), t(1.0)).item(), 0.0, 1e-9),
        ("ce label 0 annihilates", cross_entropy(t(0.0), t(0.3)).item(), 0.0, 1e-9),
        ("ce half half", cross_entropy(t(0.5), t(0.5)).item(), 0.5 * math.log(2), 1e-9),
        (
            "cm identity example",
            loss_cm(matching_probabilities(torch.eye(2, dtype=torch.float64), 0.1)).item(),
            -math.log(math.exp(10) / (math.exp(10) + 1)),
            1e-6,
        ),
        (
            "matching probs constant",
            matching_probabilities(torch.zeros(4, 4, dtype=torch.float64), 0.1).p_v2l[0, 0].item(),
            0.25,
            1e-9,
        ),
        ("discrepancy at 0", discrepancy_score(0.0), 0.0, 1e-9),
        ("discrepancy at e-1", discrepancy_score(e - 1), 0.5, 1e-6),
        ("discrepancy at e^2-1", discrepancy_score(e**2 - 1), 2.0 / 3.0, 1e-6),
        ("penalization at 0", penalization(0.0, 0.1), 1.0, 1e-9),
        ("penalization .2/.1", penalization(0.2, 0.1), e**2, 1e-6 * e**2),
        ("penalization .5/.1", penalization(0.5, 0.1), e**5, 1e-6 * e**5),
        ("pseudo momentum", update_pseudo_label(0.5, 0.9, 0.6), 0.66, 1e-9),
        ("pseudo frozen", update_pseudo_label(0.5, 0.9, 1.0), 0.5, 1e-9),
        ("pseudo replaced", update_pseudo_label(0.5, 0.9, 0.0), 0.9, 1e-9),
        (
            "warmup all-equal n=4",
            warmup_loss(torch.full((4, 4), 0.3, dtype=torch.float64), 0.2).item(),
            3 * 2 * 0.2,
            1e-9,
        ),
        (
            "warmup inactive hinge",
            warmup_loss(t([[0.9, 0.5], [0.5, 0.9]]), 0.2).item(),
            0.0,
            1e-9,
        ),
        ("local composition", 0.2 + 0.5 / e**2, 0.2677, 1e-4),
        ("noisy half/half pair", 2 * cross_entropy(t(0.5), t(0.5)).item(), 0.6931, 1e-4),
    ]
    worst = max(abs(got - want) for _, got, want, _ in checks)
    failures = [d for d, got, want, tol in checks if abs(got - want) > tol]
    elapsed = time.perf_counter() - started
    report(
        1,
        not failures and elapsed < 5.0,
        f"{len(checks)} closed-form examples, worst abs error {worst:.2e}, "
        f"{elapsed:.2f}s (failures: {failures or 'none'})",
    )


# --------------------------------------------------------------- criterion 2


def test_criterion_2_gradient_suite():
    """Six losses x 10 random small batches agree with central differences."""
    started = time.perf_counter()
    cfg = TrainConfig(batch_size=8, embed_dim=4)

    def build(seed):
        rng = np.random.default_rng(seed)
        n_b = int(rng.integers(2, 9))
        corpus = generate_synthetic(
            n_b, 10, 3, 8, 6, 0.05, seed=int(rng.integers(1 << 30)), world_seed=0
        )
        model = SimilarityModel.random_init(8, 6, 4, seed=seed, train_similarity=bool(seed % 2))
        # Per-pair weights are inputs to the loss, not part of the model being
        # differentiated, so they are drawn once per trial and held fixed.
        lambdas = 1.0 + rng.random(n_b) * 5
        labels = rng.random(n_b)
        return corpus, model, lambdas, labels

    losses = {
        "warmup": lambda m, c, lam, lab: warmup_loss(
            batch_similarity_from_embedded(encode_batch(c.pairs, m), m), 0.2
        ),
        "cm": lambda m, c, lam, lab: loss_cm(
            matching_probabilities(
                batch_similarity_from_embedded(encode_batch(c.pairs, m), m), cfg.tau
            )
        ),
        "im": lambda m, c, lam, lab: risk_im(encode_batch(c.pairs, m), cfg.tau_r),
        "clean": lambda m, c, lam, lab: loss_clean(encode_batch(c.pairs, m), m, cfg),
        "local": lambda m, c, lam, lab: loss_local(encode_batch(c.pairs, m), m, cfg, lam),
        "noisy": lambda m, c, lam, lab: loss_noisy(encode_batch(c.pairs, m), m, cfg, lab),
    }

    worst = {}
    for name, loss_fn in losses.items():
        errs = []
        for trial in range(10):
            corpus, model, lambdas, labels = build(1000 * trial + hash(name) % 997)
            value_and_grad, value_only = value_and_grad_closure(
                model, lambda m: loss_fn(m, corpus, lambdas, labels)
            )
            errs.append(
                grad_check(value_and_grad, parameter_vector(model).numpy(), value_fn=value_only)
            )
        worst[name] = max(errs)

    elapsed = time.perf_counter() - started
    ok = all(err < 1e-4 for err in worst.values()) and elapsed < 30.0
    detail = ", ".join(f"{k}={v:.1e}" for k, v in worst.items())
    report(2, ok, f"worst relative gradient errors: {detail}; {elapsed:.1f}s")


# --------------------------------------------------------------- criterion 3


def test_criterion_3_em_oracle():
    started = time.perf_counter()
    failures = []
    for seed in range(20):
        rng = np.random.default_rng(seed)
        losses = np.concatenate(
            [rng.normal(0.1, 0.01, size=100), rng.normal(3.0, 0.1, size=100)]
        )
        gmm = fit_gmm(losses)
        lo, hi = sorted(gmm.means)
        if abs(lo - 0.1) / 0.1 >= 0.05 or abs(hi - 3.0) / 3.0 >= 0.05:
            failures.append((seed, lo, hi))
    elapsed = time.perf_counter() - started
    report(
        3,
        not failures and elapsed < 5.0,
        f"mixture means within 5% on {20 - len(failures)}/20 seeds, {elapsed:.2f}s"
        + (f" (failed: {failures})" if failures else ""),
    )


# --------------------------------------------------------------- criterion 4


def test_criterion_4_proxy_oracle():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(100):
        n_v = int(rng.integers(1, 7))
        n_l = int(rng.integers(1, 7))
        l_items = rng.normal(size=(n_l, 5))
        l_items /= np.linalg.norm(l_items, axis=1, keepdims=True)
        opposite = intra_relation(t(l_items), 0.1, modality="text")
        cross = t(rng.normal(size=(n_v, n_l)))

        proxy = proxy_reconstruct(cross, opposite, 0.1)

        # Brute-force gather-then-normalize, no shared code path.
        routed = [int(np.argmax(cross[i].numpy())) for i in range(n_v)]
        gathered = np.array(
            [[float(l_items[routed[i]] @ l_items[routed[j]]) for j in range(n_v)] for i in range(n_v)]
        )
        shifted = gathered / 0.1
        shifted -= shifted.max(axis=1, keepdims=True)
        expected = np.exp(shifted)
        expected /= expected.sum(axis=1, keepdims=True)
        worst = max(worst, float(np.abs(proxy.values.numpy() - expected).max()))
    report(4, worst < 1e-12, f"100 random pairs, worst elementwise gap {worst:.2e}")


# --------------------------------------------------------------- criterion 5


@pytest.mark.parametrize("rate", [0.2, 0.4, 0.6])
def test_criterion_5_division_separation(rate):
    started = time.perf_counter()
    base = generate_synthetic(
        2000, 32, 4, 64, 32, 0.05, seed=derive_seed(0, "generate"), world_seed=0
    )
    noisy = inject_noise(base, rate, derive_seed(0, "noise"))
    result = train(noisy, TrainConfig(epochs=5, seed=0))
    quality = division_quality(result.final_division.assignments, noisy.true_match_mask())
    clean = quality.partitions["clean"]
    clean_mismatch_fraction = clean.true_mismatches / clean.size if clean.size else 0.0
    elapsed = time.perf_counter() - started
    ok = clean_mismatch_fraction < rate / 2 and quality.mismatch_recall > rate and elapsed < 300
    report(
        5,
        ok,
        f"r={rate}: clean-partition mismatch fraction {clean_mismatch_fraction:.3f} "
        f"(need < {rate / 2}), noisy-partition recall {quality.mismatch_recall:.3f} "
        f"(need > {rate}), {elapsed:.0f}s",
    )


# --------------------------------------------------------------- criterion 6


def test_criterion_6_end_to_end_robustness():
    """Full pipeline vs triplet-only and vs the no-structure ablation, 3 seeds.

    Seeds 0-2 were fixed before the experiment was first run and the numbers
    are reported as measured. The triplet comparison passes by a wide margin.
    The ablation arm is a known tie in this linear-encoder setting: the
    intra-modal term is agreement-seeking (its true-pair gradients are nearly
    parallel to the contrastive term's here), and the structural refinement
    only shuffles pairs between the two partitions that both keep the
    full-strength contrastive loss — so switching both off changes test rSum
    by under one point in every regime we measured, and this test currently
    fails on that arm rather than being tuned until it doesn't.
    """
    started = time.perf_counter()
    make = lambda n, seed, split: generate_synthetic(
        n, 48, 4, 64, 32, 0.05, seed=derive_seed(seed, "generate"), split=split, world_seed=0
    )
    train_corpus = inject_noise(make(2000, 11, "train"), 0.4, derive_seed(11, "noise"))
    val_corpus = make(500, 12, "val")
    test_corpus = make(500, 13, "test")

    arms = {
        "full": {},
        "triplet": {"triplet_only": True},
        "ablation": {"use_intra_loss": False, "use_im_refinement": False},
    }
    rsums = {arm: [] for arm in arms}
    for seed in (0, 1, 2):
        for arm, overrides in arms.items():
            cfg = TrainConfig(
                warmup_epochs=5, epochs=15, learning_rate=0.1, seed=seed, **overrides
            )
            result = train(train_corpus, cfg, val_corpus=val_corpus)
            rsums[arm].append(model_retrieval_report(test_corpus, result.best_model).rsum)

    beats_triplet = [f > tr for f, tr in zip(rsums["full"], rsums["triplet"])]
    beats_ablation = [f > ab for f, ab in zip(rsums["full"], rsums["ablation"])]
    elapsed = time.perf_counter() - started
    fmt = lambda xs: "/".join(f"{x:.0f}" for x in xs)
    ok = all(beats_triplet) and all(beats_ablation) and elapsed < 900
    report(
        6,
        ok,
        f"test rSum full {fmt(rsums['full'])} vs triplet {fmt(rsums['triplet'])} "
        f"(wins {sum(beats_triplet)}/3) vs ablation {fmt(rsums['ablation'])} "
        f"(wins {sum(beats_ablation)}/3), {elapsed:.0f}s",
    )


# --------------------------------------------------------------- criterion 7


def test_criterion_7_alignment_risk_trend():
    decreases = []
    risks = []
    for seed in (0, 1, 2):
        corpus = generate_synthetic(
            400, 32, 4, 64, 32, 0.05, seed=derive_seed(40 + seed, "generate"), world_seed=0
        )
        cfg = TrainConfig(epochs=6, learning_rate=0.1, seed=seed)
        result = train(corpus, cfg)
        r_init = relation_alignment_risk(corpus, result.init_model, cfg.tau_r)
        r_best = relation_alignment_risk(corpus, result.best_model, cfg.tau_r)
        risks.append((r_init, r_best))
        decreases.append(r_best < r_init)
    detail = ", ".join(f"seed {s}: {a:.3f}->{b:.3f}" for s, (a, b) in enumerate(risks))
    report(7, all(decreases), f"alignment risk init->best on noiseless data: {detail}")


# --------------------------------------------------------------- criterion 8


def test_criterion_8_determinism(tmp_path):
    corpus_path = tmp_path / "train.rcds"
    assert (
        cli_main(
            ["generate", "--pairs", "100", "--objects", "16", "--items", "3",
             "--dv", "12", "--dl", "10", "--noise", "0.3", "--seed", "2",
             "-o", str(corpus_path)]
        )
        == 0
    )
    digests = []
    for name in ("r1", "r2"):
        run_dir = tmp_path / name
        assert (
            cli_main(
                ["train", "--corpus", str(corpus_path), "--run-dir", str(run_dir),
                 "--batch-size", "32", "--embed-dim", "8", "--warmup", "2",
                 "--epochs", "3", "--seed", "2"]
            )
            == 0
        )
        digests.append(
            (
                (run_dir / "epochs.jsonl").read_bytes(),
                (run_dir / "partitions.csv").read_bytes(),
            )
        )
    same_jsonl = digests[0][0] == digests[1][0]
    same_csv = digests[0][1] == digests[1][1]
    report(
        8,
        same_jsonl and same_csv,
        f"byte-identical epochs.jsonl: {same_jsonl}, partition CSV: {same_csv}",
    )


# --------------------------------------------------------------- criterion 9


def test_criterion_9_format_round_trip(tmp_path):
    rng = np.random.default_rng(9)
    failures = []
    for i in range(50):
        n_pairs = 1 if i < 3 else int(rng.integers(1, 41))  # force degenerate cases
        corpus = generate_synthetic(
            n_pairs,
            int(rng.integers(6, 20)),
            int(rng.integers(2, 5)),
            int(rng.integers(4, 16)),
            int(rng.integers(4, 16)),
            float(rng.uniform(0, 0.2)),
            seed=int(rng.integers(1 << 30)),
            split=("train", "val", "test")[i % 3],
        )
        if corpus.split == "train" and n_pairs >= 4 and rng.random() < 0.5:
            corpus = inject_noise(corpus, float(rng.uniform(0.2, 0.6)), int(rng.integers(1 << 30)))
        path = tmp_path / f"c{i}.rcds"
        write_corpus(corpus, path)
        if not corpus_equal(read_corpus(path), corpus):
            failures.append(i)

    sample = tmp_path / "c0.rcds"
    corruptions = {
        "truncated": lambda raw: raw[: len(raw) // 2],
        "bad magic": lambda raw: b"XXXX" + raw[4:],
        "bad version": lambda raw: raw[:4] + bytes([raw[4] + 1]) + raw[5:],
        "flipped payload size": lambda raw: raw + b"\x00\x00\x00\x00",
        "emptied": lambda raw: b"",
    }
    uncaught = []
    for name, mangle in corruptions.items():
        target = tmp_path / "corrupt.rcds"
        target.write_bytes(mangle(sample.read_bytes()))
        sidecar = target.with_name(target.name + ".meta.json")
        sidecar.write_text(sample.with_name(sample.name + ".meta.json").read_text())
        try:
            read_corpus(target)
            uncaught.append(name)
        except FormatError:
            pass
        except Exception as exc:  # a crash, not a diagnosis
            uncaught.append(f"{name} ({type(exc).__name__})")

    report(
        9,
        not failures and not uncaught,
        f"50/{50 - len(failures)} corpora round-tripped bit-exact; "
        f"corruptions diagnosed: {len(corruptions) - len(uncaught)}/{len(corruptions)}"
        + (f" (uncaught: {uncaught})" if uncaught else ""),
    )
