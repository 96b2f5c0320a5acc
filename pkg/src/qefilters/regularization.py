"""Physics-inspired penalties on the filter bank, with analytic gradients.

Three terms keep learned filters shaped like plausible sensor response
curves: a single dominant lobe per filter, minimum spacing between the
dominant-peak centroids of different filters, and bandwidth bounds on each
filter's dominant peak. The dominant-peak selection (argmax over amplitudes)
is treated as piecewise constant: no gradient flows through which peak is
dominant, only through the selected peak's parameters. The ReLU subgradient
at zero is taken as zero, so a penalty sitting exactly on its boundary stays
inactive.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError
from .filterbank import (
    AMPLITUDE_LOGIT,
    CENTROID,
    LOG_BANDWIDTH,
    FilterBankParams,
)
from .projection import ParamGradients

REG_COMPONENTS = ("dominance", "separation", "bandwidth")


@dataclass(frozen=True)
class RegConfig:
    """Hyperparameters of the regularizers and the objective weight.

    ``d_min`` has no canonical value; 0.1 on the normalized axis keeps up to
    seven filters placeable while still forcing diversity. ``enabled`` exists
    for component-ablation studies; disabling a term zeroes exactly that term
    and its gradient.
    """

    r_max: float = 0.3
    d_min: float = 0.1
    beta_min: float = 0.03
    beta_max: float = 0.25
    lambda_reg: float = 0.1
    epsilon: float = 1e-8
    enabled: tuple[str, ...] = REG_COMPONENTS

    def __post_init__(self):
        if not 0.0 < self.r_max < 1.0:
            raise ConfigurationError(f"r_max must lie in (0, 1), got {self.r_max}")
        if not 0.0 <= self.d_min < 1.0:
            raise ConfigurationError(f"d_min must lie in [0, 1), got {self.d_min}")
        if not 0.0 < self.beta_min < self.beta_max:
            raise ConfigurationError(
                f"need 0 < beta_min < beta_max, got ({self.beta_min}, {self.beta_max})"
            )
        if self.lambda_reg < 0.0:
            raise ConfigurationError(f"lambda_reg must be >= 0, got {self.lambda_reg}")
        unknown = set(self.enabled) - set(REG_COMPONENTS)
        if unknown:
            raise ConfigurationError(f"unknown regularizer components: {sorted(unknown)}")


@dataclass(frozen=True)
class RegLosses:
    """The three penalty values and their exact sum."""

    dominance: float
    separation: float
    bandwidth: float
    total: float = field(default=0.0)

    @classmethod
    def of(cls, dominance: float, separation: float, bandwidth: float) -> "RegLosses":
        return cls(dominance, separation, bandwidth, dominance + separation + bandwidth)


def _empty_grad(params: FilterBankParams) -> np.ndarray:
    return np.zeros_like(params.table)


def dominance_loss(
    params: FilterBankParams, r_max: float, epsilon: float = 1e-8
) -> tuple[float, ParamGradients]:
    """Penalize secondary peaks taller than r_max of the dominant one.

    Per filter: ReLU(a_second / (a_max + eps) - r_max), averaged over filters.
    Defined as zero for single-peak filters, where no secondary peak exists.
    Gradients reach the amplitude logits through the sigmoid chain.
    """
    grad = _empty_grad(params)
    num_filters, num_peaks = params.num_filters, params.peaks_per_filter
    if num_peaks == 1:
        return 0.0, ParamGradients(grad)
    amplitude = params.amplitudes
    total = 0.0
    for f in range(num_filters):
        a = amplitude[f]
        star = int(np.argmax(params.amplitude_logits[f]))
        rest = np.delete(np.arange(num_peaks), star)
        second = rest[int(np.argmax(a[rest]))]
        ratio = a[second] / (a[star] + epsilon)
        margin = ratio - r_max
        if margin > 0.0:
            total += margin
            d_second = 1.0 / (a[star] + epsilon) / num_filters
            d_star = -a[second] / (a[star] + epsilon) ** 2 / num_filters
            grad[f, second, AMPLITUDE_LOGIT] += d_second * a[second] * (1.0 - a[second])
            grad[f, star, AMPLITUDE_LOGIT] += d_star * a[star] * (1.0 - a[star])
    return total / num_filters, ParamGradients(grad)


def separation_loss(params: FilterBankParams, d_min: float) -> tuple[float, ParamGradients]:
    """Penalize dominant-peak centroids of different filters closer than d_min.

    (1/F^2) * sum over ordered pairs f != k of ReLU(d_min - |c_f* - c_k*|).
    Gradients reach only the selected centroids; the argmax choosing each
    filter's dominant peak is locally constant.
    """
    grad = _empty_grad(params)
    num_filters = params.num_filters
    if num_filters == 1:
        return 0.0, ParamGradients(grad)
    star = params.dominant_peaks()
    c = params.centroids[np.arange(num_filters), star]  # (F,)
    diff = c[:, None] - c[None, :]
    margin = d_min - np.abs(diff)
    np.fill_diagonal(margin, 0.0)
    active = margin > 0.0
    np.fill_diagonal(active, False)
    loss = float(margin[active].sum()) / num_filters**2
    # Both ordered pairs (f, k) and (k, f) contribute the same derivative.
    d_c = -2.0 * np.sum(np.sign(diff) * active, axis=1) / num_filters**2
    grad[np.arange(num_filters), star, CENTROID] = d_c
    return loss, ParamGradients(grad)


def bandwidth_loss(
    params: FilterBankParams, beta_min: float, beta_max: float
) -> tuple[float, ParamGradients]:
    """Penalize dominant-peak bandwidths outside [beta_min, beta_max].

    (1/F) * sum over filters of ReLU(beta_min - beta*) + ReLU(beta* - beta_max),
    with the exp chain back to the log-bandwidth.
    """
    grad = _empty_grad(params)
    num_filters = params.num_filters
    star = params.dominant_peaks()
    rows = np.arange(num_filters)
    beta = params.bandwidths[rows, star]
    low = np.maximum(beta_min - beta, 0.0)
    high = np.maximum(beta - beta_max, 0.0)
    loss = float((low + high).sum()) / num_filters
    d_beta = (-(beta < beta_min).astype(float) + (beta > beta_max).astype(float)) / num_filters
    grad[rows, star, LOG_BANDWIDTH] = d_beta * beta
    return loss, ParamGradients(grad)


def total_reg(params: FilterBankParams, config: RegConfig) -> tuple[RegLosses, ParamGradients]:
    """Sum the enabled penalty terms; the gradient is the sum of theirs."""
    grad = ParamGradients(_empty_grad(params))
    dom = sep = bw = 0.0
    if "dominance" in config.enabled:
        dom, g = dominance_loss(params, config.r_max, config.epsilon)
        grad = grad + g
    if "separation" in config.enabled:
        sep, g = separation_loss(params, config.d_min)
        grad = grad + g
    if "bandwidth" in config.enabled:
        bw, g = bandwidth_loss(params, config.beta_min, config.beta_max)
        grad = grad + g
    return RegLosses.of(dom, sep, bw), grad
