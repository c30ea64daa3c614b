"""Max-and-Smooth: two-step approximate Bayesian inference for extended
latent Gaussian models with replicated or grouped observations.

The Max step collapses each group's likelihood to a Gaussian in its latent
parameters (mode/curvature or moment matching); the Smooth step runs exact
conjugate inference in the resulting Gaussian pseudo model.
"""

from . import exact, forecast, gmrf, maxstep, models, priors, smooth, sparse
from ._engine import NUMBA_ENABLED, engine_name

__version__ = "0.1.0"

__all__ = [
    "NUMBA_ENABLED",
    "engine_name",
    "exact",
    "forecast",
    "gmrf",
    "maxstep",
    "models",
    "priors",
    "smooth",
    "sparse",
    "__version__",
]
