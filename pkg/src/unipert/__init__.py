"""Universal adversarial perturbations: clipped-loss stochastic gradient attacks,
iterative DeepFool accumulation, and universal adversarial training."""

from .kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
