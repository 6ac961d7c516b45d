"""Command-line entry point: ``qvae {train,evaluate,reconstruct,generate,latent,info}``.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

import argparse
import logging
import math
import os
import sys
import warnings

import numpy as np

from .autograd import Tensor, determinism
from .data import DataFormatError, load_dataset, preprocess
from .metrics import (
    fid_report,
    gmm_fit,
    image_grid_pgm,
    mse,
    train_feature_extractor,
    write_report_csv,
    export_latents,
)
from .models import LATENT_DIM, VARIANTS, param_count
from .trainer import (
    CheckpointError,
    TrainConfig,
    TrainingError,
    encode_mean,
    load_checkpoint,
    reconstruct,
    train,
)

logger = logging.getLogger("qvae")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
FX_ACCURACY_FLOOR = {"mnist": 0.95, "usps": 0.90}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _positive_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}")
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _nonneg_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}")
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {v}")
    return v


def _positive_float(text):
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}")
    if not (math.isfinite(v) and v > 0):
        raise argparse.ArgumentTypeError(f"must be a finite number > 0, got {text}")
    return v


def _finite_float(text):
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}")
    if not math.isfinite(v):
        raise argparse.ArgumentTypeError(f"must be finite, got {text}")
    return v


def build_parser():
    p = _Parser(prog="qvae", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a model and write checkpoint + metrics.csv")
    t.add_argument("--dataset", choices=("mnist", "usps"), required=True)
    t.add_argument("--variant", choices=VARIANTS, required=True)
    t.add_argument("--data-dir", required=True)
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--epochs", type=_positive_int, default=200)
    t.add_argument("--batch-size", type=_positive_int, default=400)
    t.add_argument("--lr", type=_positive_float, default=1e-3)
    t.add_argument("--seed", type=_nonneg_int, default=0)
    t.add_argument("--angle-scale", type=_finite_float, default=math.pi)
    t.add_argument("--subset", type=_positive_int, default=None,
                   help="use only the first N training images")
    t.add_argument("--test-subset", type=_positive_int, default=None,
                   help="use only the first N test images for the per-epoch MSE")
    t.add_argument("--checkpoint-every", type=_positive_int, default=None)
    t.add_argument("--deterministic", action="store_true")

    e = sub.add_parser("evaluate", help="MSE and proxy-FID report")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data-dir", required=True)
    e.add_argument("--out", required=True, help="report CSV path")
    e.add_argument("--dataset", choices=("mnist", "usps"), default=None,
                   help="defaults to the dataset recorded in the checkpoint")
    e.add_argument("--fid-samples", type=_positive_int, default=None,
                   help="number of test images (and generated images) for FID")
    e.add_argument("--seed", type=_nonneg_int, default=0)
    e.add_argument("--fx-epochs", type=_positive_int, default=5)
    e.add_argument("--fx-batch-size", type=_positive_int, default=128)

    r = sub.add_parser("reconstruct", help="paired input/reconstruction grid")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--data-dir", required=True)
    r.add_argument("--count", type=_positive_int, required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--dataset", choices=("mnist", "usps"), default=None)
    r.add_argument("--columns", type=_positive_int, default=8)

    g = sub.add_parser("generate", help="decode standard-normal latents to a grid")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--count", type=_positive_int, required=True)
    g.add_argument("--seed", type=_nonneg_int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--columns", type=_positive_int, default=8)

    lat = sub.add_parser("latent", help="export test-set latent means and fit a GMM")
    lat.add_argument("--checkpoint", required=True)
    lat.add_argument("--data-dir", required=True)
    lat.add_argument("--out", required=True)
    lat.add_argument("--dataset", choices=("mnist", "usps"), default=None)
    lat.add_argument("--gmm-k", type=_positive_int, default=10)
    lat.add_argument("--seed", type=_nonneg_int, default=0)

    i = sub.add_parser("info", help="print parameter counts")
    i.add_argument("--checkpoint", required=True)
    return p


def _dataset_of(args, config):
    name = args.dataset or config.get("dataset")
    if name not in ("mnist", "usps"):
        raise UsageError("checkpoint does not record a dataset; pass --dataset mnist|usps")
    return name


def cmd_train(args):
    config = TrainConfig(
        dataset=args.dataset,
        variant=args.variant,
        learning_rate=args.lr,
        epochs=args.epochs,
        batch_size=args.batch_size,
        seed=args.seed,
        angle_scale=args.angle_scale,
        deterministic=args.deterministic,
        out_dir=args.out,
        subset=args.subset,
        checkpoint_every=args.checkpoint_every,
    )
    train_set = load_dataset(args.dataset, args.data_dir, "train")
    test_set = load_dataset(args.dataset, args.data_dir, "test")
    if args.test_subset:
        test_set = test_set.subset(args.test_subset)
    _, log = train(config, train_set, test_set)
    last = log[-1]
    print(
        f"trained {args.variant} on {args.dataset}: epoch {last['epoch']} "
        f"recon/sample {last['recon_per_sample']:.4f} kl/sample {last['kl_per_sample']:.4f} "
        f"test_mse {last['test_mse']:.6f}"
    )
    print(f"wrote {os.path.join(args.out, 'checkpoint.qvae')} and {os.path.join(args.out, 'metrics.csv')}")


def cmd_evaluate(args):
    bundle, config = load_checkpoint(args.checkpoint)
    dataset = _dataset_of(args, config)
    train_set = load_dataset(dataset, args.data_dir, "train")
    test_set = load_dataset(dataset, args.data_dir, "test")
    real = preprocess(test_set)
    if args.fid_samples:
        real = real[: args.fid_samples]
    deterministic = config.get("deterministic", True)
    with determinism(deterministic):
        recon = reconstruct(bundle, real)
        z = np.random.default_rng(args.seed).standard_normal((len(real), LATENT_DIM))
        generated = reconstruct_from_latents(bundle, z)
    fx = train_feature_extractor(
        preprocess(train_set), train_set.labels, seed=args.seed,
        test=(preprocess(test_set), test_set.labels), floor=FX_ACCURACY_FLOOR[dataset],
        epochs=args.fx_epochs, batch_size=args.fx_batch_size,
    )
    rows = [
        ("mse", dataset, bundle.variant, mse(recon, real)),
        ("proxy_fid_reconstruction", dataset, bundle.variant, fid_report(real, recon, fx)),
        ("proxy_fid_generation", dataset, bundle.variant, fid_report(real, generated, fx)),
        ("proxy_fx_test_accuracy", dataset, bundle.variant, fx.test_accuracy_),
    ]
    write_report_csv(rows, args.out)
    for metric, _, _, value in rows:
        print(f"{metric}: {value:.6g}")
    print("note: proxy-FID uses a small local CNN embedding, not Inception-v3")


def reconstruct_from_latents(bundle, z, batch_size=500):
    out = [bundle.decode(Tensor(z[i : i + batch_size].astype(np.float32))).data
           for i in range(0, len(z), batch_size)]
    return np.concatenate(out)


def cmd_reconstruct(args):
    bundle, config = load_checkpoint(args.checkpoint)
    dataset = _dataset_of(args, config)
    images = preprocess(load_dataset(dataset, args.data_dir, "test"))[: args.count]
    with determinism(config.get("deterministic", True)):
        recon = reconstruct(bundle, images)
    # alternate a row of inputs with the row of their reconstructions
    cols = args.columns
    tiles = []
    for start in range(0, len(images), cols):
        chunk_in, chunk_out = images[start : start + cols], recon[start : start + cols]
        pad = cols - len(chunk_in)
        blank = np.ones((pad,) + images.shape[1:], np.float32)
        tiles += [chunk_in, blank, chunk_out, blank]
    w, h = image_grid_pgm(np.concatenate(tiles), cols, args.out)
    print(f"wrote {args.out} ({w}x{h}, {len(images)} pairs)")


def cmd_generate(args):
    bundle, config = load_checkpoint(args.checkpoint)
    z = np.random.default_rng(args.seed).standard_normal((args.count, LATENT_DIM))
    with determinism(config.get("deterministic", True)):
        images = reconstruct_from_latents(bundle, z)
    w, h = image_grid_pgm(images, args.columns, args.out)
    print(f"wrote {args.out} ({w}x{h}, {args.count} samples)")


def cmd_latent(args):
    from sklearn.metrics import adjusted_rand_score

    bundle, config = load_checkpoint(args.checkpoint)
    dataset = _dataset_of(args, config)
    test_set = load_dataset(dataset, args.data_dir, "test")
    with determinism(config.get("deterministic", True)):
        mu = encode_mean(bundle, preprocess(test_set))
    export_latents(mu, test_set.labels, args.out)
    print(f"wrote {args.out} ({len(mu)} rows)")
    if args.gmm_k > len(mu):
        raise UsageError(f"--gmm-k {args.gmm_k} exceeds the {len(mu)} exported latents")
    gmm = gmm_fit(mu, k=args.gmm_k, seed=args.seed)
    ari = adjusted_rand_score(test_set.labels, gmm.predict(mu))
    print(
        f"gmm k={args.gmm_k}: {gmm.n_iter_} EM iterations, mean log-likelihood "
        f"{gmm.log_likelihood_trace_[-1]:.4f}, adjusted Rand index vs labels {ari:.4f}"
    )


def cmd_info(args):
    bundle, config = load_checkpoint(args.checkpoint)
    enc, dec, total = param_count(bundle)
    print(f"variant: {bundle.variant}")
    if config.get("dataset"):
        print(f"dataset: {config['dataset']}")
    print(f"encoder parameters: {enc:,}")
    print(f"decoder parameters: {dec:,}")
    print(f"total parameters: {total:,}")
    if bundle.variant == "q":
        print(f"angle scale: {bundle.angle_scale!r}")


COMMANDS = {
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "reconstruct": cmd_reconstruct,
    "generate": cmd_generate,
    "latent": cmd_latent,
    "info": cmd_info,
}


def run(argv=None):
    """Parse ``argv`` and dispatch; returns the exit code."""
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename or exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (CheckpointError, DataFormatError, TrainingError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
