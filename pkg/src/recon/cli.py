"""Command-line front end: generate / train / divide / eval / report.

Exit codes are a stable scripting contract: 0 success, 2 usage or input
error (bad flags, malformed files, mismatched splits), 3 numerical
divergence during training.

Training configuration is resolved in precedence order: built-in defaults,
then a JSON config file (``--config``), then explicit command-line flags.
The run directory root defaults to $RECON_RUN_DIR, falling back to
``./runs``.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import platform
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .data import generate_synthetic, inject_noise, read_corpus, write_corpus
from .division import Partition, divide, write_partition_csv
from .errors import InvalidConfig, InvalidInput, NumericalFailure, ReconError
from .evaluation import division_quality, model_retrieval_report, relation_alignment_risk
from .model import load_checkpoint
from .seeding import derive_seed
from .training import TrainConfig, train

__all__ = ["main", "entrypoint"]


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _run_root() -> Path:
    return Path(os.environ.get("RECON_RUN_DIR", "runs"))


# ---------------------------------------------------------------- generate


def _cmd_generate(args) -> int:
    corpus = generate_synthetic(
        n_pairs=args.pairs,
        n_objects_vocab=args.objects,
        items_per_modality=args.items,
        d_v=args.dv,
        d_l=args.dl,
        noise_sigma=args.sigma,
        seed=derive_seed(args.seed, "generate"),
        split=args.split,
        latent_dim=args.latent_dim,
        mixing=args.mixing,
        world_seed=args.world_seed,
        n_clusters=args.n_clusters,
        cluster_spread=args.cluster_spread,
    )
    if args.noise > 0:
        corpus = inject_noise(corpus, args.noise, derive_seed(args.seed, "noise"))
    out = Path(args.output)
    write_corpus(corpus, out)
    mism = sum(not p.ground_truth.true_match for p in corpus.pairs)
    print(
        f"wrote {out}: {len(corpus)} pairs (split={corpus.split}, d_v={corpus.d_v}, "
        f"d_l={corpus.d_l}, noise_rate={corpus.noise_rate:.4f}, mismatched={mism})"
    )
    return 0


# ------------------------------------------------------------------- train


_CONFIG_FLAGS = {
    # flag destination -> TrainConfig field
    "batch_size": "batch_size",
    "tau": "tau",
    "tau_r": "tau_r",
    "omega1": "omega1",
    "omega2": "omega2",
    "alpha": "alpha",
    "beta": "beta",
    "gamma": "gamma",
    "xi": "xi",
    "warmup": "warmup_epochs",
    "epochs": "epochs",
    "lr": "learning_rate",
    "momentum": "momentum",
    "seed": "seed",
    "embed_dim": "embed_dim",
    "train_similarity": "train_similarity",
    "symmetric_kl": "symmetric_kl",
    "intra_loss": "use_intra_loss",
    "im_refinement": "use_im_refinement",
    "triplet_only": "triplet_only",
}


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="JSON file of config overrides")
    parser.add_argument("--batch-size", type=int, dest="batch_size")
    parser.add_argument("--tau", type=float)
    parser.add_argument("--tau-r", type=float, dest="tau_r")
    parser.add_argument("--omega1", type=float)
    parser.add_argument("--omega2", type=float)
    parser.add_argument("--alpha", type=float)
    parser.add_argument("--beta", type=float)
    parser.add_argument("--gamma", type=float)
    parser.add_argument("--xi", type=float)
    parser.add_argument("--warmup", type=int, help="warmup epochs")
    parser.add_argument("--epochs", type=int, help="post-warmup epochs")
    parser.add_argument("--lr", type=float, help="learning rate")
    parser.add_argument("--momentum", type=float)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--embed-dim", type=int, dest="embed_dim")
    parser.add_argument("--train-similarity", action=argparse.BooleanOptionalAction, dest="train_similarity", default=None)
    parser.add_argument("--symmetric-kl", action=argparse.BooleanOptionalAction, dest="symmetric_kl", default=None)
    parser.add_argument("--intra-loss", action=argparse.BooleanOptionalAction, dest="intra_loss", default=None)
    parser.add_argument("--im-refinement", action=argparse.BooleanOptionalAction, dest="im_refinement", default=None)
    parser.add_argument("--triplet-only", action=argparse.BooleanOptionalAction, dest="triplet_only", default=None)


def _resolve_config(args) -> TrainConfig:
    values = TrainConfig().to_dict()
    if args.config is not None:
        try:
            file_values = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise InvalidConfig(f"cannot read config file {args.config}: {exc}") from exc
        if not isinstance(file_values, dict):
            raise InvalidConfig("config file must hold a JSON object")
        unknown = set(file_values) - set(values)
        if unknown:
            raise InvalidConfig(f"unknown config fields in {args.config}: {sorted(unknown)}")
        values.update(file_values)
    for flag, field in _CONFIG_FLAGS.items():
        flag_value = getattr(args, flag, None)
        if flag_value is not None:
            values[field] = flag_value
    return TrainConfig.from_dict(values)


def _cmd_train(args) -> int:
    corpus_path = Path(args.corpus)
    corpus = read_corpus(corpus_path)
    val_corpus = None
    val_entry = None
    if args.val_corpus is not None:
        val_path = Path(args.val_corpus)
        val_corpus = read_corpus(val_path)
        val_entry = {"path": str(val_path), "sha256": _sha256(val_path)}

    config = _resolve_config(args)
    corpus_hash = _sha256(corpus_path)
    run_dir = Path(args.run_dir) if args.run_dir else _run_root() / f"run-{corpus_hash[:8]}-s{config.seed}"
    run_dir.mkdir(parents=True, exist_ok=True)

    manifest = {
        "config": config.to_dict(),
        "corpus": {"path": str(corpus_path), "sha256": corpus_hash},
        "val_corpus": val_entry,
        "seed": config.seed,
        "artifacts": {
            "init_checkpoint": "init.rcmd",
            "best_checkpoint": "best.rcmd",
            "final_checkpoint": "final.rcmd",
            "epoch_log": "epochs.jsonl",
            "partitions": "partitions.csv",
        },
        "versions": {
            "recon": __version__,
            "numpy": np.__version__,
            "torch": torch.__version__,
            "python": platform.python_version(),
        },
    }
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    result = train(corpus, config, val_corpus=val_corpus, run_dir=run_dir)
    if result.best_rsum is not None:
        print(f"best validation rSum {result.best_rsum:.2f} at epoch {result.best_epoch}")
    print(f"run artifacts in {run_dir}")
    return 0


# ------------------------------------------------------------------ divide


def _cmd_divide(args) -> int:
    corpus = read_corpus(Path(args.corpus))
    if len(corpus) < 2:
        raise InvalidInput("division needs at least 2 pairs")
    model = load_checkpoint(Path(args.checkpoint))
    if (model.d_v, model.d_l) != (corpus.d_v, corpus.d_l):
        raise InvalidInput(
            f"checkpoint dims ({model.d_v}, {model.d_l}) do not match corpus dims ({corpus.d_v}, {corpus.d_l})"
        )
    config = _resolve_config(args)
    outcome = divide(
        corpus.pairs,
        model,
        temperature=config.tau,
        relation_temperature=config.tau_r,
        batch_size=config.batch_size,
        omega1=config.omega1,
        omega2=config.omega2,
        alpha=config.alpha,
        beta=config.beta,
        seed=derive_seed(config.seed, "division-cli"),
        symmetric_kl=config.symmetric_kl,
        refine_with_im=config.use_im_refinement,
    )
    sizes = outcome.sizes()
    print("partition sizes: " + ", ".join(f"{k}={v}" for k, v in sizes.items()))
    if corpus.has_ground_truth:
        report = division_quality(outcome.assignments, corpus.true_match_mask())
        print(json.dumps(report.to_dict(), sort_keys=True))
    if args.out is not None:
        truth = corpus.true_match_mask() if corpus.has_ground_truth else None
        write_partition_csv(outcome.assignments, Path(args.out), truth)
        print(f"wrote {args.out}")
    return 0


# -------------------------------------------------------------------- eval


def _render_retrieval_table(report) -> str:
    lines = [
        f"{'':14}{'R@1':>8}{'R@5':>8}{'R@10':>8}",
        f"{'image->text':14}" + "".join(f"{report.image_to_text[k]:8.1f}" for k in (1, 5, 10)),
        f"{'text->image':14}" + "".join(f"{report.text_to_image[k]:8.1f}" for k in (1, 5, 10)),
        f"{'rSum':14}{report.rsum:8.1f}",
    ]
    return "\n".join(lines)


def _cmd_eval(args) -> int:
    corpus = read_corpus(Path(args.corpus))
    if len(corpus) == 0:
        raise InvalidInput("cannot evaluate an empty corpus")
    if args.expect_split is not None and corpus.split != args.expect_split:
        raise InvalidInput(f"corpus split is {corpus.split!r}, expected {args.expect_split!r}")
    model = load_checkpoint(Path(args.checkpoint))
    if (model.d_v, model.d_l) != (corpus.d_v, corpus.d_l):
        raise InvalidInput(
            f"checkpoint dims ({model.d_v}, {model.d_l}) do not match corpus dims ({corpus.d_v}, {corpus.d_l})"
        )

    config = _resolve_config(args)
    retrieval = model_retrieval_report(corpus, model)
    print(_render_retrieval_table(retrieval))
    payload = {"retrieval": retrieval.to_dict(), "division": None, "alignment_risk": None}

    if corpus.has_ground_truth and len(corpus) >= 2:
        outcome = divide(
            corpus.pairs,
            model,
            temperature=config.tau,
            relation_temperature=config.tau_r,
            batch_size=config.batch_size,
            omega1=config.omega1,
            omega2=config.omega2,
            alpha=config.alpha,
            beta=config.beta,
            seed=derive_seed(config.seed, "division-eval"),
            symmetric_kl=config.symmetric_kl,
            refine_with_im=config.use_im_refinement,
        )
        truth = corpus.true_match_mask()
        payload["division"] = division_quality(outcome.assignments, truth).to_dict()
        payload["alignment_risk"] = relation_alignment_risk(corpus, model, config.tau_r)
        print(f"alignment risk: {payload['alignment_risk']:.6f}")

        if args.dump_mismatches:
            accepted = [
                (a, truth[i]) for i, a in enumerate(outcome.assignments) if a.partition is not Partition.NOISY
            ]
            accepted.sort(key=lambda item: -item[0].y_im)
            print(f"top {args.dump_mismatches} accepted pairs by relation discrepancy:")
            print(f"{'pair_id':>8}{'y_cm':>10}{'y_im':>10}{'partition':>12}{'true_match':>12}")
            for a, is_match in accepted[: args.dump_mismatches]:
                print(f"{a.pair_id:>8}{a.y_cm:>10.4f}{a.y_im:>10.4f}{a.partition.value:>12}{str(bool(is_match)):>12}")

    text = json.dumps(payload, sort_keys=True)
    if args.json is not None:
        Path(args.json).write_text(text + "\n")
        print(f"wrote {args.json}")
    else:
        print(text)
    return 0


# ------------------------------------------------------------------ report


def _cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    manifest_path = run_dir / "manifest.json"
    if not manifest_path.exists():
        raise InvalidInput(f"no manifest.json in {run_dir}")
    manifest = json.loads(manifest_path.read_text())
    print(f"run {run_dir}")
    print(f"corpus: {manifest['corpus']['path']} (sha256 {manifest['corpus']['sha256'][:12]}...)")
    print(f"seed: {manifest['seed']}")
    config = manifest["config"]
    print(
        "config: "
        + ", ".join(f"{k}={config[k]}" for k in ("batch_size", "tau", "omega1", "omega2", "alpha", "beta", "xi", "warmup_epochs", "epochs"))
    )

    epochs_path = run_dir / "epochs.jsonl"
    if not epochs_path.exists():
        print("no epoch log")
        return 0
    rows = [json.loads(line) for line in epochs_path.read_text().splitlines() if line.strip()]
    if not rows:
        print("epoch log is empty")
        return 0
    print(f"{'epoch':>6}{'phase':>8}{'warmup':>10}{'clean':>10}{'local':>10}{'noisy':>10}{'val rSum':>10}")
    for row in rows:
        def fmt(key):
            value = row.get(key)
            return f"{value:10.4f}" if value is not None else f"{'-':>10}"

        print(
            f"{row['epoch']:>6}{row['phase']:>8}"
            + fmt("mean_warmup_loss") + fmt("mean_clean_loss") + fmt("mean_local_loss") + fmt("mean_noisy_loss")
            + f"{row['val_rsum']:10.2f}"
        )
    best = max(rows, key=lambda r: r["val_rsum"])
    print(f"best validation rSum {best['val_rsum']:.2f} at epoch {best['epoch']}")
    return 0


# ----------------------------------------------------------------- parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="recon",
        description="Relation-consistency training for cross-modal retrieval with unreliable pair annotations.",
    )
    parser.add_argument("--version", action="version", version=f"recon {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="write a synthetic feature corpus")
    gen.add_argument("--pairs", type=int, required=True, help="number of image-text pairs")
    gen.add_argument("--objects", type=int, default=32, help="latent object vocabulary size")
    gen.add_argument("--items", type=int, default=4, help="max items per modality per pair")
    gen.add_argument("--dv", type=int, default=64, help="visual feature dimension")
    gen.add_argument("--dl", type=int, default=32, help="text feature dimension")
    gen.add_argument("--sigma", type=float, default=0.05, help="feature noise scale")
    gen.add_argument("--noise", type=float, default=0.0, help="fraction of pairs to mismatch")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--world-seed", type=int, default=0, dest="world_seed",
                     help="prototype/mixing seed; keep it fixed across the splits of one experiment")
    gen.add_argument("--split", choices=("train", "val", "test"), default="train")
    gen.add_argument("--latent-dim", type=int, default=None, dest="latent_dim")
    gen.add_argument("--mixing", choices=("identity", "random"), default="random")
    gen.add_argument("--clusters", type=int, default=None, dest="n_clusters",
                     help="group object prototypes into this many clusters")
    gen.add_argument("--cluster-spread", type=float, default=0.3, dest="cluster_spread",
                     help="prototype offset scale around each cluster center")
    gen.add_argument("-o", "--output", required=True)
    gen.set_defaults(func=_cmd_generate)

    tr = sub.add_parser("train", help="run the full training schedule on a corpus")
    tr.add_argument("--corpus", required=True)
    tr.add_argument("--val-corpus", dest="val_corpus", help="separate validation corpus for checkpoint selection")
    tr.add_argument("--run-dir", dest="run_dir", help="artifact directory (default: derived under $RECON_RUN_DIR or ./runs)")
    _add_config_flags(tr)
    tr.set_defaults(func=_cmd_train)

    dv = sub.add_parser("divide", help="run a frozen division pass with an existing checkpoint")
    dv.add_argument("--corpus", required=True)
    dv.add_argument("--checkpoint", required=True)
    dv.add_argument("--out", help="partition CSV output path")
    _add_config_flags(dv)
    dv.set_defaults(func=_cmd_divide)

    ev = sub.add_parser("eval", help="retrieval metrics (and division quality when ground truth exists)")
    ev.add_argument("--corpus", required=True)
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--expect-split", choices=("train", "val", "test"), dest="expect_split")
    ev.add_argument("--dump-mismatches", type=int, default=0, dest="dump_mismatches",
                    help="list the K accepted pairs with the highest relation discrepancy")
    ev.add_argument("--json", help="write the JSON report here instead of stdout")
    _add_config_flags(ev)
    ev.set_defaults(func=_cmd_eval)

    rp = sub.add_parser("report", help="summarize a run directory")
    rp.add_argument("--run-dir", dest="run_dir", required=True)
    rp.set_defaults(func=_cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NumericalFailure as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return 3
    except (ReconError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
