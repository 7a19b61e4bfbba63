"""Design-based adversarial robustness toolkit for no-reference
image-quality regressors: Fourier-domain orthogonal convolutions, spectral
placement analysis, channel pruning with fine-tuning, gradient attacks,
and the robustness/performance evaluation harness."""

from . import attacks, cayley, dataio, defense, metrics, net, spectral, tensor
from .errors import OiqaError

__all__ = ["attacks", "cayley", "dataio", "defense", "metrics", "net",
           "spectral", "tensor", "OiqaError"]
__version__ = "0.1.0"
