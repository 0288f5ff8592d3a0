"""Differentiable Bernstein estimator of the upper (1-alpha) sample quantile.

With the sample sorted in descending order r_(1) >= ... >= r_(n), the k-th
order statistic receives the binomial weight

    w_k = C(n-1, k-1) * alpha^(k-1) * (1-alpha)^(n-k),

so the estimate sum_k w_k * r_(k) is a smooth convex combination whose weight
mass concentrates around index n*alpha, i.e. around the sample points closest
to the quantile boundary. Weights are computed in the log domain (log-gamma)
because the binomial coefficient overflows float64 long before n = 1000 while
the power term underflows; only their combined logarithm is representable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, NumericError

__all__ = [
    "QuantileEstimate",
    "bernstein_weights",
    "bernstein_upper_quantile",
    "simple_upper_quantile",
    "effective_support",
]


@dataclass
class QuantileEstimate:
    """Differentiable quantile value plus the weights that produced it.

    ``radii`` is the input tensor the estimate was computed from; after a
    backward pass its ``grad`` holds the weight vector routed through the
    sort permutation.
    """

    value: Tensor
    weights: np.ndarray
    alpha: float
    n: int
    radii: Tensor


def bernstein_weights(n: int, alpha: float) -> np.ndarray:
    """Binomial weights over the descending order statistics.

    Exact simplex member: computed via log-gamma and normalized by the
    floating-point sum, so the weights are non-negative and sum to 1 up to
    one final rounding.
    """
    if n < 1:
        raise ConfigError(f"need at least one sample, got n={n}")
    if not 0.0 < alpha < 1.0:
        raise ConfigError(f"alpha must lie strictly inside (0, 1), got {alpha}")
    if n == 1:
        return np.ones(1)
    j = np.arange(n)  # j = k - 1
    log_w = (gammaln(n) - gammaln(j + 1) - gammaln(n - j)
             + j * np.log(alpha) + (n - 1 - j) * np.log1p(-alpha))
    w = np.exp(log_w)
    return w / w.sum()


def bernstein_upper_quantile(radii, alpha: float) -> QuantileEstimate:
    """Smooth upper-(1-alpha)-quantile estimate of a batch of radii.

    Differentiable with respect to the radii: the sort permutation is frozen
    at forward time, so the gradient of the estimate is exactly the weight
    vector scattered back to the original sample positions.
    """
    radii = radii if isinstance(radii, Tensor) else Tensor(np.asarray(radii).reshape(-1))
    n = radii.size
    weights = bernstein_weights(n, alpha)
    sorted_r, _ = ad.sort_descending(radii)
    value = ad.sum(ad.mul(sorted_r, Tensor(weights)))
    return QuantileEstimate(value=value, weights=weights, alpha=alpha, n=n, radii=radii)


def simple_upper_quantile(radii, alpha: float) -> float:
    """Plain order-statistic estimate on the descending-sorted sample.

    Takes r_(alpha*n) when alpha*n is an integer and r_(floor(alpha*n)+1)
    otherwise. Not differentiable; evaluation only.
    """
    r = np.asarray(radii, dtype=np.float64).reshape(-1)
    n = r.size
    if n < 1:
        raise ConfigError("need at least one sample")
    if not 0.0 < alpha < 1.0:
        raise ConfigError(f"alpha must lie strictly inside (0, 1), got {alpha}")
    if np.isnan(r).any():
        raise NumericError("NaN radius")
    desc = np.sort(r)[::-1]
    m = alpha * n
    nearest = round(m)
    if nearest >= 1 and abs(m - nearest) < 1e-9 * max(1.0, m):
        k = int(nearest)
    else:
        k = int(np.floor(m)) + 1
    return float(desc[k - 1])


def effective_support(weights: np.ndarray, threshold: float) -> int:
    """Number of weights exceeding ``threshold``."""
    return int(np.count_nonzero(np.asarray(weights) > threshold))
