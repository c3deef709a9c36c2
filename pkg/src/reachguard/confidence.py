"""Bayesian confidence estimation over a discrete set of beta values.

The belief tracks how well the predictor's Gaussians explain the human's
observed controls. Each candidate beta rescales the predicted covariance to
sigma/beta, so beta = 1 trusts the predictor and small beta widens it. The
posterior over {beta_low, beta_high} is updated with the observation
likelihoods, mixed toward the uniform initial prior by a small epsilon so
stale evidence decays, and collapsed to a single effective beta by
posterior-weighted averaging.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import solve_triangular

from .errors import NumericalFailureError

_LOG_2PI = math.log(2.0 * math.pi)
_INITIAL_PRIOR = (0.5, 0.5)


@dataclass(frozen=True)
class ConfidenceBelief:
    """Belief over the two-point beta set; b_low + b_high = 1."""

    beta_low: float = 0.2
    beta_high: float = 1.0
    b_low: float = 0.5
    b_high: float = 0.5
    epsilon: float = 0.05

    def __post_init__(self):
        if not (0.0 < self.beta_low < self.beta_high):
            raise ValueError(
                f"need 0 < beta_low < beta_high, got ({self.beta_low}, {self.beta_high})"
            )
        if self.beta_high != 1.0:
            raise ValueError(f"beta_high is pinned to 1, got {self.beta_high}")
        if not (0.0 <= self.epsilon < 1.0):
            raise ValueError(f"epsilon must lie in [0, 1), got {self.epsilon}")
        if self.b_low < 0.0 or self.b_high < 0.0:
            raise ValueError("belief weights must be nonnegative")
        if abs(self.b_low + self.b_high - 1.0) > 1e-9:
            raise ValueError(
                f"belief must sum to 1, got {self.b_low + self.b_high}"
            )

    def as_tuple(self):
        return (self.b_low, self.b_high)


def _chol(sigma: np.ndarray) -> np.ndarray:
    sigma = np.asarray(sigma, dtype=float)
    if sigma.ndim != 2 or sigma.shape[0] != sigma.shape[1]:
        raise ValueError(f"sigma must be square, got shape {sigma.shape}")
    if np.abs(sigma - sigma.T).max() > 1e-9:
        raise ValueError("sigma must be symmetric")
    try:
        return np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError as exc:
        raise NumericalFailureError(
            "covariance matrix is singular or not positive definite; "
            "cannot evaluate the observation likelihood"
        ) from exc


def log_likelihood(u_obs, mu, sigma, beta: float) -> float:
    """Log density of u_obs under N(mu, sigma / beta)."""
    if not (beta > 0.0) or not math.isfinite(beta):
        raise ValueError(f"beta must be positive and finite, got {beta}")
    u_obs = np.asarray(u_obs, dtype=float)
    mu = np.asarray(mu, dtype=float)
    if u_obs.shape != mu.shape or u_obs.ndim != 1:
        raise ValueError("u_obs and mu must be matching 1-D vectors")
    if not (np.all(np.isfinite(u_obs)) and np.all(np.isfinite(mu))):
        raise ValueError("non-finite observation or mean")
    d = u_obs.shape[0]
    chol = _chol(sigma)
    # Mahalanobis distance under sigma; scaling sigma by 1/beta scales it by beta.
    z = solve_triangular(chol, u_obs - mu, lower=True)
    maha = float(z @ z)
    logdet_sigma = 2.0 * float(np.sum(np.log(np.diag(chol))))
    return -0.5 * (d * _LOG_2PI + logdet_sigma - d * math.log(beta) + beta * maha)


def likelihood(u_obs, mu, sigma, beta: float) -> float:
    """Density of u_obs under N(mu, sigma / beta)."""
    return math.exp(log_likelihood(u_obs, mu, sigma, beta))


def bayes_update(belief: ConfidenceBelief, u_obs, mu, sigma) -> ConfidenceBelief:
    """Posterior belief after observing one control action.

    Works in log space; if both likelihoods vanish entirely the prior is
    kept unchanged and a warning is emitted.
    """
    log_f = np.array(
        [
            log_likelihood(u_obs, mu, sigma, belief.beta_low),
            log_likelihood(u_obs, mu, sigma, belief.beta_high),
        ]
    )
    prior = np.array(belief.as_tuple())
    with np.errstate(divide="ignore"):
        log_w = np.where(prior > 0.0, np.log(prior, where=prior > 0.0), -np.inf)
    log_w = log_w + log_f
    peak = log_w.max()
    if not np.isfinite(peak):
        warnings.warn(
            "degenerate observation: both confidence likelihoods vanished; "
            "keeping the prior belief",
            RuntimeWarning,
            stacklevel=2,
        )
        return belief
    w = np.exp(log_w - peak)
    post = w / w.sum()
    return replace(belief, b_low=float(post[0]), b_high=float(post[1]))


def epsilon_static(belief: ConfidenceBelief) -> ConfidenceBelief:
    """Mix the belief toward the uniform initial prior by epsilon."""
    eps = belief.epsilon
    b_low = (1.0 - eps) * belief.b_low + eps * _INITIAL_PRIOR[0]
    b_high = (1.0 - eps) * belief.b_high + eps * _INITIAL_PRIOR[1]
    total = b_low + b_high
    return replace(belief, b_low=b_low / total, b_high=b_high / total)


def effective_beta(belief: ConfidenceBelief) -> float:
    """Belief-weighted beta used to scale prediction covariance."""
    return belief.beta_low * belief.b_low + belief.beta_high * belief.b_high
