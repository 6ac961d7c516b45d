import math
import struct

import numpy as np
import pytest

from qvae.models import ModelBundle, param_count
from qvae.trainer import (
    CHECKPOINT_MAGIC,
    INIT_STREAM,
    CheckpointError,
    TrainConfig,
    TrainingError,
    evaluate_mse,
    load_checkpoint,
    read_metrics_csv,
    rng_stream,
    save_checkpoint,
    train,
)


@pytest.fixture(scope="module")
def tiny(mnist_splits):
    from qvae.data import preprocess

    train_set, test_set = mnist_splits
    return preprocess(train_set)[:120], preprocess(test_set)[:60]


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(variant="x")
    with pytest.raises(ValueError):
        TrainConfig(dataset="cifar")
    cfg = TrainConfig()
    assert (cfg.learning_rate, cfg.epochs, cfg.batch_size) == (1e-3, 200, 400)
    assert cfg.angle_scale == math.pi


def test_lr_zero_leaves_parameters_untouched(tiny):
    x, _ = tiny
    cfg = TrainConfig(dataset=None, variant="q", learning_rate=0.0, epochs=1, batch_size=40)
    bundle, _ = train(cfg, x)
    fresh = ModelBundle.create("q", rng_stream(0, INIT_STREAM))
    for (_, a), (_, b) in zip(bundle.named_parameters(), fresh.named_parameters()):
        assert a.data.tobytes() == b.data.tobytes()


def test_log_shape_and_finiteness(tiny):
    x, xt = tiny
    _, log = train(TrainConfig(dataset=None, variant="cdp", epochs=3, batch_size=40), x, xt)
    assert [r["epoch"] for r in log] == [1, 2, 3]
    assert all(math.isfinite(v) for r in log for v in r.values())


def test_short_tail_dropped(tiny):
    x, _ = tiny
    seen = []
    cfg = TrainConfig(dataset=None, variant="c", epochs=1, batch_size=50)
    from qvae import trainer as tr

    orig = tr.elbo_loss

    def spy(x_, *a):
        seen.append(len(x_))
        return orig(x_, *a)

    tr.elbo_loss = spy
    try:
        train(cfg, x)
    finally:
        tr.elbo_loss = orig
    assert seen == [50, 50]


def test_non_finite_loss_names_epoch_and_step(tiny):
    x, _ = tiny
    bad = x.copy()
    bad[:] = np.nan
    with pytest.raises(TrainingError, match="epoch 1, step 1"):
        train(TrainConfig(dataset=None, variant="c", epochs=1, batch_size=40), bad)


def test_dataset_tag_must_match(mnist_splits):
    train_set, _ = mnist_splits
    with pytest.raises(ValueError, match="config asks for"):
        train(TrainConfig(dataset="usps", epochs=1), train_set)


def test_checkpoint_roundtrip(tmp_path):
    b = ModelBundle.create("q", 7, angle_scale=1.0)
    path = tmp_path / "m.qvae"
    save_checkpoint(b, TrainConfig(dataset="usps", variant="q", angle_scale=1.0), path)
    loaded, cfg = load_checkpoint(path)
    assert loaded.variant == "q" and loaded.angle_scale == 1.0 and cfg["dataset"] == "usps"
    for (n1, a), (n2, c) in zip(b.named_parameters(), loaded.named_parameters()):
        assert n1 == n2 and a.data.tobytes() == c.data.tobytes()
    assert param_count(loaded)[0] == 37_024


def test_checkpoint_header_layout(tmp_path):
    path = tmp_path / "m.qvae"
    save_checkpoint(ModelBundle.create("cdp"), TrainConfig(variant="cdp"), path)
    blob = path.read_bytes()
    assert blob[:4] == CHECKPOINT_MAGIC
    version, variant = struct.unpack("<IB", blob[4:9])
    assert (version, variant) == (1, 1)


def _corrupt(tmp_path, fn):
    path = tmp_path / "m.qvae"
    save_checkpoint(ModelBundle.create("c"), TrainConfig(variant="c"), path)
    path.write_bytes(fn(path.read_bytes()))
    return path


def test_checkpoint_bad_magic(tmp_path):
    path = _corrupt(tmp_path, lambda b: b"XVAE" + b[4:])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_checkpoint_version_mismatch(tmp_path):
    path = _corrupt(tmp_path, lambda b: b[:4] + struct.pack("<I", 99) + b[8:])
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)


def test_checkpoint_truncated(tmp_path):
    path = _corrupt(tmp_path, lambda b: b[:-10])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)


def test_checkpoint_variant_shape_inconsistency(tmp_path):
    # relabel a C checkpoint as CDP: encoder tensors no longer fit the variant
    path = _corrupt(tmp_path, lambda b: b[:8] + bytes([1]) + b[9:])
    with pytest.raises(CheckpointError, match="shape"):
        load_checkpoint(path)


def test_reload_reproduces_logged_mse(tiny, tmp_path):
    x, xt = tiny
    cfg = TrainConfig(dataset=None, variant="q", epochs=2, batch_size=40, out_dir=str(tmp_path))
    _, log = train(cfg, x, xt)
    bundle, _ = load_checkpoint(tmp_path / "checkpoint.qvae")
    assert abs(evaluate_mse(bundle, xt) - log[-1]["test_mse"]) <= 1e-6
    csv_rows = read_metrics_csv(tmp_path / "metrics.csv")
    assert csv_rows == log


def test_identical_runs_are_byte_identical(tiny, tmp_path):
    x, xt = tiny
    for d in ("a", "b"):
        train(TrainConfig(dataset=None, variant="c", epochs=2, batch_size=40, out_dir=str(tmp_path / d)), x, xt)
    for name in ("checkpoint.qvae", "metrics.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_checkpoint_every(tiny, tmp_path):
    x, _ = tiny
    cfg = TrainConfig(dataset=None, variant="cdp", epochs=2, batch_size=60, out_dir=str(tmp_path), checkpoint_every=1)
    train(cfg, x)
    assert sorted(p.name for p in tmp_path.glob("*.qvae")) == [
        "checkpoint.qvae", "checkpoint_epoch0001.qvae", "checkpoint_epoch0002.qvae"
    ]
