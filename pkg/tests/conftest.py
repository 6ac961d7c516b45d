import os
import sys
from pathlib import Path

import numpy as np
import pytest

from qvae import autograd as ag

DATA = Path(__file__).parent / "data"
MNIST_DIR = DATA / "mnist"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def mnist_dir():
    return str(MNIST_DIR)


@pytest.fixture(scope="session")
def mnist_splits():
    from qvae.data import load_dataset

    return load_dataset("mnist", MNIST_DIR, "train"), load_dataset("mnist", MNIST_DIR, "test")


def numeric_grad(f, arrays, h=1e-6):
    """Central differences of scalar ``f(*arrays)`` w.r.t. every entry (float64)."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = a[i]
            a[i] = old + h
            fp = f(*arrays)
            a[i] = old - h
            fm = f(*arrays)
            a[i] = old
            g[i] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def rel_err(a, b):
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)


def gradcheck(build, arrays, tol=1e-4, h=1e-6):
    """Compare reverse-mode grads of ``build(*tensors)`` against central differences.

    ``build`` maps float64 tensors to a scalar tensor.  Returns the worst
    relative error.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    tensors = [ag.Tensor(a.copy(), requires_grad=True) for a in arrays]
    ag.backward(build(*tensors))
    numeric = numeric_grad(lambda *xs: build(*[ag.Tensor(x) for x in xs]).item(), arrays, h)
    worst = max(rel_err(t.grad, n) for t, n in zip(tensors, numeric))
    assert worst < tol, f"gradient mismatch, relative error {worst:.3g}"
    return worst


def pytest_collection_modifyitems(config, items):
    if os.environ.get("QVAE_FULL_DATA"):
        return
    skip = pytest.mark.skip(reason="set QVAE_FULL_DATA to run the full-data reproduction")
    for item in items:
        if "full_scale" in item.keywords:
            item.add_marker(skip)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    lines = list(getattr(module, "VERDICTS", None) or [])
    for rep in terminalreporter.stats.get("skipped", []):
        if "test_acceptance" in rep.nodeid and rep.when == "setup":
            reason = rep.longrepr[2] if isinstance(rep.longrepr, tuple) else ""
            lines.append(f"[SKIP] {rep.nodeid.split('::')[-1]} ({reason.removeprefix('Skipped: ')})")
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
