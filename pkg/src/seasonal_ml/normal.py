"""Standard normal quantile and distribution functions.

Thin wrappers around ``scipy.special.ndtri`` / ``ndtr`` so that the
Gaussianizing transform and the tercile conversion share one
implementation.
"""

import numpy as np
from scipy import special


def norm_ppf(p, scale=1.0):
    """Quantile function of a centred normal with standard deviation ``scale``."""
    return np.multiply(scale, special.ndtri(p))


def norm_cdf(x):
    return special.ndtr(x)


def norm_sf(x):
    """Upper tail ``1 - cdf(x)`` evaluated without cancellation."""
    return special.ndtr(np.negative(x))
