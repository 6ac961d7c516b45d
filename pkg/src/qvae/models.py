"""Encoder variants, the shared decoder, reparameterization and the ELBO.

Layer widths follow the published parameter counts: the classical encoder is
1024 -> 256 -> 128 -> (16, 16) and the pooled encoders are 256 -> 128 -> (16, 16).
Dense weights are stored (in, out); transposed-convolution weights are stored
(in_channels, out_channels, k, k).
"""

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import ShapeError, Tensor
from .filters import quantum_encode, window_pool_first

VARIANTS = ("c", "cdp", "q")
LATENT_DIM = 16
IMAGE_SHAPE = (1, 32, 32)
LOGVAR_CLAMP = 10.0
OUTPUT_EPS = ag.BCE_EPS

DECODER_CHANNELS = (64, 32, 16, 1)
DECODER_KERNEL = 4


def _dense(name, n_in, n_out):
    return [(f"{name}.weight", (n_in, n_out), n_in), (f"{name}.bias", (n_out,), None)]


def encoder_spec(variant):
    """List of (name, shape, fan_in) for the encoder; fan_in None marks a bias."""
    variant = check_variant(variant)
    layers = []
    if variant == "c":
        layers += _dense("enc.fc1", 1024, 256)
        layers += _dense("enc.fc2", 256, 128)
    else:
        layers += _dense("enc.fc1", 256, 128)
    layers += _dense("enc.fc_mu", 128, LATENT_DIM)
    layers += _dense("enc.fc_logvar", 128, LATENT_DIM)
    return layers


def decoder_spec():
    c0 = DECODER_CHANNELS[0]
    k = DECODER_KERNEL
    layers = _dense("dec.fc", LATENT_DIM, c0 * 4 * 4)
    for i, (cin, cout) in enumerate(zip(DECODER_CHANNELS[:-1], DECODER_CHANNELS[1:]), 1):
        layers.append((f"dec.deconv{i}.weight", (cin, cout, k, k), cin * k * k))
        layers.append((f"dec.deconv{i}.bias", (cout,), None))
    return layers


def check_variant(variant):
    v = str(variant).lower()
    if v not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    return v


def _init(spec, rng, dtype=np.float32):
    params = OrderedDict()
    for name, shape, fan_in in spec:
        if fan_in is None:
            data = np.zeros(shape, dtype=dtype)
        else:
            bound = np.sqrt(1.0 / fan_in)
            data = rng.uniform(-bound, bound, size=shape).astype(dtype)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params


@dataclass
class ModelBundle:
    """Variant tag plus encoder and decoder parameter sets."""

    variant: str
    encoder: "OrderedDict[str, Tensor]"
    decoder: "OrderedDict[str, Tensor]"
    angle_scale: float = np.pi

    @classmethod
    def create(cls, variant, random_state=0, angle_scale=np.pi, dtype=np.float32):
        variant = check_variant(variant)
        rng = random_state if isinstance(random_state, np.random.Generator) else (
            np.random.default_rng(random_state)
        )
        encoder = _init(encoder_spec(variant), rng, dtype)
        decoder = _init(decoder_spec(), rng, dtype)
        return cls(variant, encoder, decoder, float(angle_scale))

    def parameters(self):
        return list(self.encoder.values()) + list(self.decoder.values())

    def named_parameters(self):
        return list(self.encoder.items()) + list(self.decoder.items())

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    # ------------------------------------------------------------- forward
    def front_end(self, x):
        """Flattened input to the first dense layer."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.ndim != 4 or x.shape[1:] != IMAGE_SHAPE:
            raise ShapeError(f"encoder expects (B, 1, 32, 32) images, got {x.shape}")
        b = x.shape[0]
        if self.variant == "c":
            return ag.reshape(x, (b, 1024))
        pooled = ag.reshape(window_pool_first(x), (b, 256))
        if self.variant == "q":
            return quantum_encode(pooled, self.angle_scale)
        return pooled

    def encode(self, x):
        e = self.encoder
        h = self.front_end(x)
        h = ag.relu(ag.linear(h, e["enc.fc1.weight"], e["enc.fc1.bias"]))
        if self.variant == "c":
            h = ag.relu(ag.linear(h, e["enc.fc2.weight"], e["enc.fc2.bias"]))
        mu = ag.linear(h, e["enc.fc_mu.weight"], e["enc.fc_mu.bias"])
        logvar = ag.linear(h, e["enc.fc_logvar.weight"], e["enc.fc_logvar.bias"])
        return mu, ag.clamp(logvar, -LOGVAR_CLAMP, LOGVAR_CLAMP)

    def decode(self, z):
        z = z if isinstance(z, Tensor) else Tensor(z)
        if z.ndim != 2 or z.shape[1] != LATENT_DIM:
            raise ShapeError(f"decoder expects (B, {LATENT_DIM}) latents, got {z.shape}")
        d = self.decoder
        b = z.shape[0]
        h = ag.linear(z, d["dec.fc.weight"], d["dec.fc.bias"])
        h = ag.relu(ag.reshape(h, (b, DECODER_CHANNELS[0], 4, 4)))
        n = len(DECODER_CHANNELS) - 1
        for i in range(1, n + 1):
            h = ag.conv_transpose2d(
                h, d[f"dec.deconv{i}.weight"], d[f"dec.deconv{i}.bias"], stride=2, padding=1
            )
            if i < n:
                h = ag.relu(h)
        # float32 sigmoid saturates to exactly 0 or 1; keep outputs strictly inside
        return ag.clamp(ag.sigmoid(h), OUTPUT_EPS, 1.0 - OUTPUT_EPS)

    def forward(self, x, eps):
        mu, logvar = self.encode(x)
        z = reparameterize(mu, logvar, eps)
        return self.decode(z), mu, logvar


def reparameterize(mu, logvar, eps):
    """``z = mu + exp(logvar / 2) * eps`` with ``eps`` a pre-drawn standard normal array.

    ``eps`` may also be a Generator, in which case it is drawn here.
    """
    if isinstance(eps, np.random.Generator):
        eps = eps.standard_normal(mu.shape)
    eps = np.asarray(eps, dtype=mu.data.dtype)
    if eps.shape != mu.shape or logvar.shape != mu.shape:
        raise ShapeError(f"reparameterize: mu {mu.shape}, logvar {logvar.shape}, eps {eps.shape}")
    std = ag.exp(ag.mul(logvar, 0.5))
    return ag.add(mu, ag.mul(std, Tensor(eps, dtype=mu.data.dtype)))


def kl_divergence(mu, logvar):
    """Sum over batch and latent dims of KL(N(mu, var) || N(0, I))."""
    inner = ag.sub(ag.sub(ag.add(logvar, 1.0), ag.square(mu)), ag.exp(logvar))
    return ag.mul(ag.sum(inner), -0.5)


def elbo_loss(x, x_hat, mu, logvar):
    """Return (reconstruction, kl, total) as scalar tensors; total is the negative ELBO."""
    target = x.data if isinstance(x, Tensor) else np.asarray(x)
    recon = ag.bce_sum(x_hat, target)
    kl = kl_divergence(mu, logvar)
    return recon, kl, ag.add(recon, kl)


def param_count(bundle_or_variant):
    """(encoder, decoder, total) trainable scalar counts."""
    if isinstance(bundle_or_variant, ModelBundle):
        enc = sum(p.size for p in bundle_or_variant.encoder.values())
        dec = sum(p.size for p in bundle_or_variant.decoder.values())
    else:
        enc = sum(int(np.prod(s)) for _, s, _ in encoder_spec(bundle_or_variant))
        dec = sum(int(np.prod(s)) for _, s, _ in decoder_spec())
    return enc, dec, enc + dec
