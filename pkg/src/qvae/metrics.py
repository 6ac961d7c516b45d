"""Evaluation: pixel MSE, proxy-FID, latent GMM clustering and exports.

FID here is computed over the 64-wide feature layer of a small CNN trained on
the digit labels, not over an Inception embedding, so values are only
comparable between models scored with the same extractor.
"""

import csv
import math
import warnings
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils import check_array, check_random_state
from sklearn.utils.validation import check_is_fitted

from . import autograd as ag
from .autograd import ShapeError, Tensor, determinism
from .data import iter_batches

FEATURE_DIM = 64
MIN_FID_SAMPLES = 500
JACOBI_TOL = 1e-12
JACOBI_MAX_SWEEPS = 100


class FidSampleWarning(UserWarning):
    """Too few samples for a well-conditioned covariance estimate."""


def mse(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"mse: shape mismatch {a.shape} vs {b.shape}")
    d = a - b
    return float(np.mean(d * d))


# ------------------------------------------------------------ eigensolver


def sym_eigen(M, tol=JACOBI_TOL, max_sweeps=JACOBI_MAX_SWEEPS):
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns ``(eigenvalues, V)`` with eigenvalues in descending order and
    orthonormal eigenvectors in the columns of ``V``.  Iterates until the
    off-diagonal Frobenius norm falls below ``tol`` (scaled by the matrix
    norm when that exceeds 1).
    """
    A = np.array(M, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ShapeError(f"sym_eigen needs a square matrix, got {A.shape}")
    if not np.allclose(A, A.T, rtol=0, atol=1e-9):
        raise ValueError("sym_eigen: matrix is not symmetric within 1e-9")
    A = (A + A.T) / 2
    n = A.shape[0]
    V = np.eye(n)
    threshold = tol * max(1.0, np.linalg.norm(A))

    def off_norm():
        return np.linalg.norm(A - np.diag(np.diag(A)))

    for _ in range(max_sweeps):
        if off_norm() < threshold:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                scale = abs(A[p, p]) + abs(A[q, q])
                if abs(apq) <= 1e-18 * scale or abs(apq) < 1e-300:
                    # below rounding of the diagonal: drop without rotating
                    A[p, q] = A[q, p] = 0.0
                    continue
                theta = (A[q, q] - A[p, p]) / (2.0 * apq)
                if abs(theta) > 1e150:
                    t = 0.5 / theta
                else:
                    t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                cp, cq = A[:, p].copy(), A[:, q].copy()
                A[:, p] = c * cp - s * cq
                A[:, q] = s * cp + c * cq
                rp, rq = A[p, :].copy(), A[q, :].copy()
                A[p, :] = c * rp - s * rq
                A[q, :] = s * rp + c * rq
                A[p, q] = A[q, p] = 0.0
                vp, vq = V[:, p].copy(), V[:, q].copy()
                V[:, p] = c * vp - s * vq
                V[:, q] = s * vp + c * vq
    else:
        if off_norm() >= threshold:
            warnings.warn("sym_eigen: Jacobi sweeps did not converge", RuntimeWarning)
    w = np.diag(A).copy()
    order = np.argsort(-w, kind="stable")
    return w[order], V[:, order]


def sqrtm_psd(M):
    w, V = sym_eigen(M)
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


# ---------------------------------------------------------- Fréchet distance


@dataclass
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray
    count: int

    @classmethod
    def from_features(cls, features):
        f = np.asarray(features, dtype=np.float64)
        if f.ndim != 2 or f.shape[0] < 2:
            raise ValueError(f"need at least 2 feature rows, got shape {f.shape}")
        mu = f.mean(axis=0)
        centred = f - mu
        cov = centred.T @ centred / (f.shape[0] - 1)
        return cls(mu, (cov + cov.T) / 2, f.shape[0])


def frechet_distance(s1, s2):
    """``|mu1 - mu2|^2 + Tr(S1) + Tr(S2) - 2 Tr((S2^1/2 S1 S2^1/2)^1/2)``, clamped at 0."""
    mu1, mu2 = np.atleast_1d(s1.mean), np.atleast_1d(s2.mean)
    c1, c2 = np.atleast_2d(s1.cov), np.atleast_2d(s2.cov)
    if mu1.shape != mu2.shape or c1.shape != c2.shape:
        raise ShapeError(f"frechet_distance: dimension mismatch {mu1.shape} vs {mu2.shape}")
    root2 = sqrtm_psd(c2)
    inner = root2 @ c1 @ root2
    w, _ = sym_eigen((inner + inner.T) / 2)
    tr_covmean = np.sum(np.sqrt(np.clip(w, 0.0, None)))
    diff = mu1 - mu2
    d = diff @ diff + np.trace(c1) + np.trace(c2) - 2.0 * tr_covmean
    return float(max(d, 0.0))


# --------------------------------------------------------- feature extractor


class ProxyFeatureExtractor(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Small CNN digit classifier whose 64-wide hidden layer embeds images.

    conv(1->8, k3, p1) - ReLU - maxpool2 - conv(8->16, k3, p1) - ReLU - maxpool2
    - dense(1024->64) - ReLU [features] - dense(64->10).

    ``fit`` takes (N, 1, 32, 32) images in [0, 1] and integer labels.
    """

    def __init__(self, epochs=5, batch_size=128, learning_rate=1e-3, random_state=0,
                 deterministic=True):
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.random_state = random_state
        self.deterministic = deterministic

    def _init_params(self, rng):
        spec = [
            ("conv1.weight", (8, 1, 3, 3), 9), ("conv1.bias", (8,), None),
            ("conv2.weight", (16, 8, 3, 3), 72), ("conv2.bias", (16,), None),
            ("fc.weight", (1024, FEATURE_DIM), 1024), ("fc.bias", (FEATURE_DIM,), None),
            ("head.weight", (FEATURE_DIM, 10), FEATURE_DIM), ("head.bias", (10,), None),
        ]
        params = OrderedDict()
        for name, shape, fan_in in spec:
            if fan_in is None:
                data = np.zeros(shape, np.float32)
            else:
                b = math.sqrt(1.0 / fan_in)
                data = rng.uniform(-b, b, size=shape).astype(np.float32)
            params[name] = Tensor(data, requires_grad=True, name=name)
        return params

    def _features(self, x):
        p = self.params_
        h = ag.maxpool2d(ag.relu(ag.conv2d(x, p["conv1.weight"], p["conv1.bias"], 1, 1)))
        h = ag.maxpool2d(ag.relu(ag.conv2d(h, p["conv2.weight"], p["conv2.bias"], 1, 1)))
        h = ag.reshape(h, (x.shape[0], 1024))
        return ag.relu(ag.linear(h, p["fc.weight"], p["fc.bias"]))

    def _logits(self, feats):
        p = self.params_
        return ag.linear(feats, p["head.weight"], p["head.bias"])

    @staticmethod
    def _check_images(X):
        X = np.asarray(X, dtype=np.float32)
        if X.ndim == 2 and X.shape[1] == 1024:
            X = X.reshape(-1, 1, 32, 32)
        if X.ndim != 4 or X.shape[1:] != (1, 32, 32):
            raise ShapeError(f"expected (N, 1, 32, 32) images, got {X.shape}")
        return X

    def fit(self, X, y):
        X = self._check_images(X)
        y = np.asarray(y, dtype=np.int64)
        if len(y) != len(X):
            raise ValueError(f"{len(X)} images but {len(y)} labels")
        rng = np.random.default_rng(self.random_state)
        self.classes_ = np.arange(10)
        with determinism(self.deterministic):
            self.params_ = self._init_params(rng)
            opt = ag.Adam(list(self.params_.values()), lr=self.learning_rate)
            self.loss_curve_ = []
            for _ in range(self.epochs):
                order = rng.permutation(len(X))
                total = 0.0
                for idx in iter_batches(len(X), self.batch_size, order, drop_last=False):
                    opt.zero_grad()
                    loss = ag.softmax_cross_entropy(self._logits(self._features(Tensor(X[idx]))), y[idx])
                    ag.backward(loss)
                    opt.step()
                    total += loss.item() * len(idx)
                self.loss_curve_.append(total / len(X))
        for t in self.params_.values():
            t.requires_grad = False
            t.grad = None
        return self

    def transform(self, X):
        check_is_fitted(self, "params_")
        X = self._check_images(X)
        out = [self._features(Tensor(X[idx])).data
               for idx in iter_batches(len(X), 500, drop_last=False)]
        return np.concatenate(out).astype(np.float64)

    def decision_function(self, X):
        check_is_fitted(self, "params_")
        X = self._check_images(X)
        out = [self._logits(self._features(Tensor(X[idx]))).data
               for idx in iter_batches(len(X), 500, drop_last=False)]
        return np.concatenate(out)

    def predict(self, X):
        return self.decision_function(X).argmax(axis=1)


def train_feature_extractor(images, labels, seed=0, test=None, floor=None, **kwargs):
    """Fit a :class:`ProxyFeatureExtractor`; warn if test accuracy is under ``floor``."""
    fx = ProxyFeatureExtractor(random_state=seed, **kwargs).fit(images, labels)
    if test is not None:
        fx.test_accuracy_ = float(fx.score(*test))
        if floor is not None and fx.test_accuracy_ < floor:
            warnings.warn(
                f"feature extractor test accuracy {fx.test_accuracy_:.3f} is below {floor:.2f}; "
                "proxy-FID values may not be meaningful",
                RuntimeWarning,
            )
    return fx


def fid_report(real, generated, fx):
    """Proxy-FID between two image sets using ``fx``'s feature layer."""
    real = np.asarray(real)
    generated = np.asarray(generated)
    if len(real) < 2 or len(generated) < 2:
        raise ValueError("fid_report needs at least 2 images per side")
    if min(len(real), len(generated)) < MIN_FID_SAMPLES:
        warnings.warn(
            f"FID on {min(len(real), len(generated))} samples; covariance estimates are unstable "
            f"below {MIN_FID_SAMPLES}",
            FidSampleWarning,
        )
    s_real = GaussianStats.from_features(fx.transform(real))
    s_gen = GaussianStats.from_features(fx.transform(generated))
    return frechet_distance(s_real, s_gen)


# ------------------------------------------------------------------------ GMM


class DiagonalGMM(BaseEstimator):
    """Gaussian mixture with diagonal covariances fitted by EM.

    Initial means use k-means++ seeding.  Variances never drop below
    ``var_floor``; this keeps every M-step a constrained maximiser, so the
    per-iteration log-likelihood in ``log_likelihood_trace_`` never decreases.
    """

    def __init__(self, n_components=10, tol=1e-6, max_iter=200, var_floor=1e-6, random_state=0):
        self.n_components = n_components
        self.tol = tol
        self.max_iter = max_iter
        self.var_floor = var_floor
        self.random_state = random_state

    def _kmeanspp(self, X, rng):
        n = X.shape[0]
        centres = [X[rng.integers(n)]]
        d2 = np.sum((X - centres[0]) ** 2, axis=1)
        for _ in range(1, self.n_components):
            total = d2.sum()
            idx = rng.choice(n, p=d2 / total) if total > 0 else rng.integers(n)
            centres.append(X[idx])
            d2 = np.minimum(d2, np.sum((X - X[idx]) ** 2, axis=1))
        return np.array(centres)

    def _log_joint(self, X):
        var = self.variances_
        ll = -0.5 * (
            np.sum(np.log(2 * np.pi * var), axis=1)[None, :]
            + np.sum((X[:, None, :] - self.means_[None]) ** 2 / var[None], axis=2)
        )
        return ll + np.log(self.weights_)[None, :]

    def _e_step(self, X):
        lj = self._log_joint(X)
        norm = logsumexp(lj, axis=1)
        return np.exp(lj - norm[:, None]), float(norm.mean())

    def _m_step(self, X, resp):
        nk = resp.sum(axis=0) + 10 * np.finfo(float).eps
        self.weights_ = nk / nk.sum()
        self.means_ = resp.T @ X / nk[:, None]
        sq = resp.T @ (X * X) / nk[:, None] - self.means_ ** 2
        self.variances_ = np.maximum(sq, self.var_floor)

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        n, d = X.shape
        if n < self.n_components:
            raise ValueError(f"need at least {self.n_components} samples, got {n}")
        rng = np.random.default_rng(check_random_state(self.random_state).randint(2**31 - 1))
        self.means_ = self._kmeanspp(X, rng)
        self.weights_ = np.full(self.n_components, 1.0 / self.n_components)
        self.variances_ = np.tile(np.maximum(X.var(axis=0), self.var_floor), (self.n_components, 1))
        resp, ll = self._e_step(X)
        trace = []
        self.converged_ = False
        for it in range(self.max_iter):
            self._m_step(X, resp)
            resp, new_ll = self._e_step(X)
            trace.append(new_ll)
            if len(trace) > 1 and trace[-1] - trace[-2] < self.tol:
                self.converged_ = True
                break
        self.n_iter_ = len(trace)
        self.log_likelihood_trace_ = np.array(trace)
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "means_")
        return self._e_step(check_array(X, dtype=np.float64))[0]

    def predict(self, X):
        return self.predict_proba(X).argmax(axis=1)

    def score(self, X, y=None):
        """Mean per-sample log-likelihood."""
        check_is_fitted(self, "means_")
        return self._e_step(check_array(X, dtype=np.float64))[1]


def gmm_fit(latents, k=10, seed=0, **kwargs):
    return DiagonalGMM(n_components=k, random_state=seed, **kwargs).fit(latents)


# ------------------------------------------------------------------ exports


def export_latents(mu, labels, path):
    """Write ``label,mu_0..mu_{d-1}`` rows."""
    mu = np.asarray(mu)
    labels = np.asarray(labels)
    if len(mu) != len(labels):
        raise ValueError(f"{len(mu)} latent rows but {len(labels)} labels")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label"] + [f"mu_{i}" for i in range(mu.shape[1])])
        for lab, row in zip(labels, mu):
            w.writerow([int(lab)] + [format(float(v), ".9g") for v in row])


def read_latents(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0] != "label":
        raise ValueError(f"{path}: not a latent CSV")
    body = np.array(rows[1:], dtype=np.float64).reshape(len(rows) - 1, len(rows[0]))
    return body[:, 1:], body[:, 0].astype(np.int64)


def image_grid(images, columns, sep=2):
    """Tile (N, 1, H, W) or (N, H, W) images into one uint8 array, white separators."""
    imgs = np.asarray(images, dtype=np.float64)
    if imgs.ndim == 4:
        imgs = imgs[:, 0]
    if columns < 1:
        raise ValueError(f"columns must be >= 1, got {columns}")
    n, h, w = imgs.shape
    cols = min(columns, n) if n else columns
    rows = max(1, -(-n // cols))
    grid = np.full((rows * h + (rows - 1) * sep, cols * w + (cols - 1) * sep), 255, np.uint8)
    pix = np.clip(np.rint(255.0 * np.clip(imgs, 0.0, 1.0)), 0, 255).astype(np.uint8)
    for i in range(n):
        r, c = divmod(i, cols)
        top, left = r * (h + sep), c * (w + sep)
        grid[top : top + h, left : left + w] = pix[i]
    return grid


def image_grid_pgm(images, columns, path, sep=2):
    grid = image_grid(images, columns, sep)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{grid.shape[1]} {grid.shape[0]}\n255\n".encode("ascii"))
        fh.write(grid.tobytes())
    return grid.shape[1], grid.shape[0]


def read_pgm(path):
    """Read a P5 file as written by :func:`image_grid_pgm`."""
    with open(path, "rb") as fh:
        blob = fh.read()
    head, pos = [], 0
    while len(head) < 4:
        while blob[pos : pos + 1].isspace():
            pos += 1
        end = pos
        while not blob[end : end + 1].isspace():
            end += 1
        head.append(blob[pos:end])
        pos = end
    if head[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(head[1]), int(head[2]), int(head[3])
    # exactly one whitespace byte separates the header from the raster
    return np.frombuffer(blob[pos + 1 :], dtype=np.uint8).reshape(h, w), maxval


def write_report_csv(rows, path):
    """Rows of (metric, dataset, variant, value)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "dataset", "variant", "value"])
        for metric, dataset, variant, value in rows:
            w.writerow([metric, dataset, variant, repr(float(value))])
