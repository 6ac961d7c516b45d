"""Classical, direct-passing and quantum-encoded variational autoencoders."""

from .estimator import VAE
from .filters import FirstPixelPool, QuantumAngleEncoder
from .metrics import DiagonalGMM, ProxyFeatureExtractor
from .models import ModelBundle, param_count

__all__ = [
    "VAE",
    "FirstPixelPool",
    "QuantumAngleEncoder",
    "DiagonalGMM",
    "ProxyFeatureExtractor",
    "ModelBundle",
    "param_count",
]
__version__ = "0.1.0"
