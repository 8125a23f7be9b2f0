"""Compare full training against two reduced variants under 40% mismatches.

Three arms share corpora and seeds: the full pipeline; warmup-style triplet
training only; and an ablation with the intra-modal loss and the
structure-based refinement switched off (division by matching loss alone).
Test rSum per seed is printed for each arm.

    python3 scripts/robustness_ablation.py --seeds 0 1 2
"""

import argparse
import statistics

from recon import TrainConfig, derive_seed, generate_synthetic, inject_noise, train
from recon.evaluation import model_retrieval_report

ARMS = {
    "full": {},
    "triplet-only": {"triplet_only": True},
    "no-structure": {"use_intra_loss": False, "use_im_refinement": False},
}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--rate", type=float, default=0.4)
    ap.add_argument("--pairs", type=int, default=2000)
    ap.add_argument("--epochs", type=int, default=15)
    ap.add_argument("--warmup", type=int, default=5)
    ap.add_argument("--lr", type=float, default=0.1)
    args = ap.parse_args()

    make = lambda n, seed, split: generate_synthetic(
        n, 48, 4, 64, 32, 0.05, seed=derive_seed(seed, "generate"), split=split, world_seed=0
    )
    train_corpus = inject_noise(make(args.pairs, 11, "train"), args.rate, derive_seed(11, "noise"))
    val_corpus = make(500, 12, "val")
    test_corpus = make(500, 13, "test")

    print(f"{'arm':>14} " + " ".join(f"seed {s:>3}" for s in args.seeds) + "    mean")
    for arm, overrides in ARMS.items():
        rsums = []
        for seed in args.seeds:
            cfg = TrainConfig(
                warmup_epochs=args.warmup,
                epochs=args.epochs,
                learning_rate=args.lr,
                seed=seed,
                **overrides,
            )
            result = train(train_corpus, cfg, val_corpus=val_corpus)
            rsums.append(model_retrieval_report(test_corpus, result.best_model).rsum)
        cells = " ".join(f"{r:>8.1f}" for r in rsums)
        print(f"{arm:>14} {cells} {statistics.mean(rsums):>7.1f}")


if __name__ == "__main__":
    main()
