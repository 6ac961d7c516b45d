"""Seeded training loop, metric log and binary checkpoints."""

import csv
import io
import json
import logging
import math
import os
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor, determinism
from .data import iter_batches, preprocess, shuffled_indices
from .models import VARIANTS, ModelBundle, check_variant, decoder_spec, elbo_loss, encoder_spec

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"QVAE"
CHECKPOINT_VERSION = 1
EVAL_BATCH = 500
METRICS_HEADER = ["epoch", "recon_per_sample", "kl_per_sample", "test_mse"]

# stream ids for np.random.SeedSequence([seed, stream])
INIT_STREAM, NOISE_STREAM = 0, 1


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    dataset: str = "mnist"
    variant: str = "q"
    learning_rate: float = 1e-3
    epochs: int = 200
    batch_size: int = 400
    seed: int = 0
    angle_scale: float = math.pi
    deterministic: bool = True
    out_dir: str = None
    subset: int = None
    checkpoint_every: int = None

    def __post_init__(self):
        self.variant = check_variant(self.variant)
        if self.dataset is not None and self.dataset not in ("mnist", "usps"):
            raise ValueError(f"dataset must be mnist or usps, got {self.dataset!r}")
        if not self.learning_rate >= 0:
            raise ValueError(f"learning rate must be >= 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.seed < 0:
            raise ValueError(f"seed must be non-negative, got {self.seed}")
        if self.subset is not None and self.subset < 1:
            raise ValueError(f"subset must be >= 1, got {self.subset}")

    def echo(self):
        """Run-defining fields; the output location is excluded."""
        d = asdict(self)
        d.pop("out_dir")
        d.pop("checkpoint_every")
        return d


def rng_stream(seed, stream):
    return np.random.default_rng(np.random.SeedSequence([int(seed), stream]))


def as_images(data):
    """Accept a RawDataset or an already preprocessed (N, 1, 32, 32) array."""
    if hasattr(data, "source"):
        return preprocess(data)
    return np.asarray(data, dtype=np.float32)


def reconstruct(bundle, images, batch_size=EVAL_BATCH):
    """Decode the posterior mean of every image (no sampling)."""
    out = []
    for idx in iter_batches(len(images), batch_size, drop_last=False):
        mu, _ = bundle.encode(Tensor(images[idx]))
        out.append(bundle.decode(mu).data)
    return np.concatenate(out) if out else np.empty((0,) + images.shape[1:], np.float32)


def encode_mean(bundle, images, batch_size=EVAL_BATCH):
    out = [bundle.encode(Tensor(images[idx]))[0].data
           for idx in iter_batches(len(images), batch_size, drop_last=False)]
    return np.concatenate(out)


def evaluate_mse(bundle, images, batch_size=EVAL_BATCH):
    recon = reconstruct(bundle, images, batch_size)
    diff = recon.astype(np.float64) - images.astype(np.float64)
    return float(np.mean(diff * diff))


def train_epoch(bundle, optimizer, images, batch_size, seed, epoch, noise_rng):
    """One sweep in seeded shuffle order; returns summed (recon, kl, n_samples)."""
    order = shuffled_indices(len(images), seed, epoch)
    recon_sum = kl_sum = 0.0
    seen = 0
    for step, idx in enumerate(iter_batches(len(images), batch_size, order)):
        x = images[idx]
        eps = noise_rng.standard_normal((len(idx), bundle_latent(bundle)))
        optimizer.zero_grad()
        x_hat, mu, logvar = bundle.forward(x, eps)
        recon, kl, total = elbo_loss(x, x_hat, mu, logvar)
        loss = total.item()
        if not math.isfinite(loss):
            raise TrainingError(f"non-finite loss {loss} at epoch {epoch + 1}, step {step + 1}")
        ag.backward(total)
        optimizer.step()
        recon_sum += recon.item()
        kl_sum += kl.item()
        seen += len(idx)
    return recon_sum, kl_sum, seen


def bundle_latent(bundle):
    return bundle.encoder["enc.fc_mu.bias"].shape[0]


def train(config, data, test_data=None, callback=None):
    """Train one model; returns (bundle, log).

    ``log`` has one dict per epoch with per-sample reconstruction and KL
    terms and the test-set MSE.  If ``config.out_dir`` is set, the final
    checkpoint and ``metrics.csv`` are written there.  Without ``test_data``
    the MSE column is measured on the training images.
    """
    if hasattr(data, "source") and config.dataset and data.source != config.dataset:
        raise ValueError(f"dataset is {data.source!r} but config asks for {config.dataset!r}")
    images = as_images(data)
    if config.subset is not None:
        images = images[: config.subset]
    if len(images) < config.batch_size:
        raise ValueError(f"{len(images)} training images is fewer than one batch of {config.batch_size}")
    test_images = as_images(test_data) if test_data is not None else images

    log = []
    with determinism(config.deterministic):
        bundle = ModelBundle.create(
            config.variant, rng_stream(config.seed, INIT_STREAM), config.angle_scale
        )
        optimizer = ag.Adam(bundle.parameters(), lr=config.learning_rate)
        noise_rng = rng_stream(config.seed, NOISE_STREAM)
        for epoch in range(config.epochs):
            recon, kl, n = train_epoch(
                bundle, optimizer, images, config.batch_size, config.seed, epoch, noise_rng
            )
            row = {
                "epoch": epoch + 1,
                "recon_per_sample": recon / n,
                "kl_per_sample": kl / n,
                "test_mse": evaluate_mse(bundle, test_images),
            }
            log.append(row)
            logger.info(
                "epoch %d recon %.3f kl %.3f test_mse %.5f",
                row["epoch"], row["recon_per_sample"], row["kl_per_sample"], row["test_mse"],
            )
            if callback is not None:
                callback(bundle, row)
            if config.out_dir and config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
                save_checkpoint(
                    bundle, config, os.path.join(config.out_dir, f"checkpoint_epoch{epoch + 1:04d}.qvae")
                )
    if config.out_dir:
        os.makedirs(config.out_dir, exist_ok=True)
        save_checkpoint(bundle, config, os.path.join(config.out_dir, "checkpoint.qvae"))
        write_metrics_csv(log, os.path.join(config.out_dir, "metrics.csv"))
    return bundle, log


def write_metrics_csv(log, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
        for row in log:
            writer.writerow([row["epoch"]] + [repr(float(row[k])) for k in METRICS_HEADER[1:]])


def read_metrics_csv(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != METRICS_HEADER:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        return [
            {"epoch": int(r["epoch"]), **{k: float(r[k]) for k in METRICS_HEADER[1:]}}
            for r in reader
        ]


# ---------------------------------------------------------------- checkpoints
#
# layout, all integers little-endian:
#   b"QVAE" | u32 version | u8 variant | u32 config_len | config JSON (utf-8)
#   u32 n_tensors | n * (u16 name_len | name | u8 rank | rank * u32 | f32 data)


def save_checkpoint(bundle, config, path):
    echo = config.echo() if hasattr(config, "echo") else dict(config or {})
    echo["angle_scale"] = bundle.angle_scale
    cfg = json.dumps(echo, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<IB", CHECKPOINT_VERSION, VARIANTS.index(bundle.variant)))
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    named = bundle.named_parameters()
    buf.write(struct.pack("<I", len(named)))
    for name, t in named:
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", t.ndim))
        buf.write(struct.pack(f"<{t.ndim}I", *t.shape))
        buf.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


class _Reader:
    def __init__(self, blob, path):
        self.blob, self.pos, self.path = blob, 0, path

    def take(self, n):
        if self.pos + n > len(self.blob):
            raise CheckpointError(f"{self.path}: truncated checkpoint at byte {self.pos}")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path):
    """Return (bundle, config_echo).  Shapes are validated against the variant."""
    with open(path, "rb") as fh:
        r = _Reader(fh.read(), path)
    if r.take(4) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a QVAE checkpoint")
    version, variant_id = r.unpack("<IB")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    if variant_id >= len(VARIANTS):
        raise CheckpointError(f"{path}: unknown variant id {variant_id}")
    variant = VARIANTS[variant_id]
    (cfg_len,) = r.unpack("<I")
    config = json.loads(r.take(cfg_len).decode("utf-8"))
    (count,) = r.unpack("<I")
    tensors = OrderedDict()
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (rank,) = r.unpack("<B")
        shape = r.unpack(f"<{rank}I")
        n = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(r.take(4 * n), dtype="<f4").astype(np.float32).reshape(shape)
        tensors[name] = data
    if r.pos != len(r.blob):
        raise CheckpointError(f"{path}: {len(r.blob) - r.pos} trailing bytes")

    def build(spec):
        out = OrderedDict()
        for name, shape, _ in spec:
            if name not in tensors:
                raise CheckpointError(f"{path}: missing tensor {name} for variant {variant}")
            if tuple(tensors[name].shape) != tuple(shape):
                raise CheckpointError(
                    f"{path}: tensor {name} has shape {tensors[name].shape}, variant {variant} needs {shape}"
                )
            out[name] = Tensor(tensors.pop(name), requires_grad=True, name=name)
        return out

    encoder, decoder = build(encoder_spec(variant)), build(decoder_spec())
    if tensors:
        raise CheckpointError(f"{path}: unexpected tensors {sorted(tensors)} for variant {variant}")
    angle = float(config.get("angle_scale", math.pi))
    return ModelBundle(variant, encoder, decoder, angle), config
