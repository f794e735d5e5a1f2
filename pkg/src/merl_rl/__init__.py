"""PPO with variance-explained and next-state auxiliary heads on the value network."""

from .diffcore import ConfigurationError, NumericalError, UsageError
from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "ConfigurationError", "NumericalError", "UsageError", "__version__"]
