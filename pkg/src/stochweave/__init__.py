"""Conditional variational inference for multimodal transition models."""

import jax

# Everything runs in float64; finite-difference checks depend on it.
jax.config.update("jax_enable_x64", True)

from stochweave.diffcore import ConfigError, NumericalFailure  # noqa: E402
from stochweave.estimators import ConditionalVAE  # noqa: E402

__all__ = ["ConditionalVAE", "ConfigError", "NumericalFailure"]
__version__ = "0.1.0"
