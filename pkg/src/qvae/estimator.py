"""scikit-learn style front door to the three VAE variants."""

import math

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .autograd import Tensor, determinism
from .models import LATENT_DIM, check_variant, elbo_loss, param_count
from .trainer import (
    NOISE_STREAM,
    TrainConfig,
    encode_mean,
    load_checkpoint,
    reconstruct,
    rng_stream,
    save_checkpoint,
    train,
)
from .validation import check_images, check_latents


class VAE(TransformerMixin, BaseEstimator):
    """Variational autoencoder on 32x32 grayscale images.

    Parameters
    ----------
    variant : {"c", "cdp", "q"}, default="q"
        ``"c"`` feeds all 1024 pixels to a two-layer encoder; ``"cdp"`` keeps
        the top-left pixel of each 2x2 window; ``"q"`` additionally maps each
        kept pixel to a single-qubit Pauli-Z expectation.
    angle_scale : float, default=pi
        Rotation angle per unit pixel for the quantum front-end.
    learning_rate, epochs, batch_size :
        Adam step size and training schedule.
    random_state : int, default=0
        Base seed for initialization, shuffling and latent noise.
    deterministic : bool, default=True
        Run BLAS single-threaded so repeated fits are bit-identical.

    ``transform`` returns posterior means, ``inverse_transform`` decodes
    latents back to images.
    """

    def __init__(self, variant="q", angle_scale=math.pi, learning_rate=1e-3, epochs=200,
                 batch_size=400, random_state=0, deterministic=True):
        self.variant = variant
        self.angle_scale = angle_scale
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.random_state = random_state
        self.deterministic = deterministic

    def _config(self, dataset=None, out_dir=None):
        return TrainConfig(
            dataset=dataset,
            variant=check_variant(self.variant),
            learning_rate=self.learning_rate,
            epochs=self.epochs,
            batch_size=self.batch_size,
            seed=self.random_state,
            angle_scale=self.angle_scale,
            deterministic=self.deterministic,
            out_dir=out_dir,
        )

    def fit(self, X, y=None, X_test=None):
        X = check_images(X)
        X_test = check_images(X_test) if X_test is not None else None
        self.bundle_, self.history_ = train(self._config(), X, X_test)
        return self

    def transform(self, X):
        check_is_fitted(self, "bundle_")
        with determinism(self.deterministic):
            return encode_mean(self.bundle_, check_images(X))

    def inverse_transform(self, Z):
        check_is_fitted(self, "bundle_")
        Z = check_latents(Z, LATENT_DIM)
        with determinism(self.deterministic):
            return self.bundle_.decode(Tensor(Z)).data

    def reconstruct(self, X):
        check_is_fitted(self, "bundle_")
        with determinism(self.deterministic):
            return reconstruct(self.bundle_, check_images(X))

    def sample(self, n_samples=1, random_state=None):
        """Decode ``n_samples`` latents drawn from the standard normal prior."""
        rng = np.random.default_rng(self.random_state if random_state is None else random_state)
        return self.inverse_transform(rng.standard_normal((n_samples, LATENT_DIM)))

    def score(self, X, y=None):
        """Mean per-image ELBO (negative of the summed-BCE + KL loss)."""
        check_is_fitted(self, "bundle_")
        X = check_images(X)
        rng = rng_stream(self.random_state, NOISE_STREAM)
        with determinism(self.deterministic):
            x_hat, mu, logvar = self.bundle_.forward(X, rng.standard_normal((len(X), LATENT_DIM)))
            _, _, total = elbo_loss(X, x_hat, mu, logvar)
        return -total.item() / len(X)

    def param_counts(self):
        """(encoder, decoder, total) trainable parameter counts."""
        if hasattr(self, "bundle_"):
            return param_count(self.bundle_)
        return param_count(check_variant(self.variant))

    def save(self, path, dataset=None):
        check_is_fitted(self, "bundle_")
        save_checkpoint(self.bundle_, self._config(dataset), path)

    @classmethod
    def load(cls, path):
        bundle, cfg = load_checkpoint(path)
        est = cls(
            variant=bundle.variant,
            angle_scale=bundle.angle_scale,
            learning_rate=cfg.get("learning_rate", 1e-3),
            epochs=cfg.get("epochs", 200),
            batch_size=cfg.get("batch_size", 400),
            random_state=cfg.get("seed", 0),
            deterministic=cfg.get("deterministic", True),
        )
        est.bundle_ = bundle
        return est
