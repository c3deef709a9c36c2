"""Gaussian control predictions and bounded-control extraction.

A predictor emits, at each planning step, a sequence of N Gaussian
distributions over the human's next controls (u1, u2). Scaling the
covariance by 1/beta widens the distribution when model confidence is low.
Trimming keeps, per step and control dimension, the centered interval that
captures probability mass gamma of the marginal:

    delta = sigma * sqrt(2) * erfinv(gamma),   bounds = mu -+ delta

so sigma scales as beta^(-1/2) and the interval width follows. Hard caps
then clamp the interval to the vehicle's physical control range, and the
first/last steps become the endpoint pair that the reachability solver
interpolates over its horizon.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erfinv

from .errors import ScenarioFormatError

U1_CAP = 2.0  # rad/s, physical steering-rate limit
U2_CAP = 10.0  # m/s^2, physical acceleration limit
HARD_CAPS = ((-U1_CAP, U1_CAP), (-U2_CAP, U2_CAP))

_SYM_TOL = 1e-9


@dataclass
class GaussianControlPrediction:
    """Per-step Gaussian control distributions over a short horizon.

    means: (N, 2) control means; covariances: (N, 2, 2) symmetric PSD;
    dt: seconds between prediction steps.
    """

    means: np.ndarray
    covariances: np.ndarray
    dt: float = 0.5

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=float)
        self.covariances = np.asarray(self.covariances, dtype=float)
        if self.means.ndim != 2 or self.means.shape[1] != 2:
            raise ValueError(f"means must be (N, 2), got {self.means.shape}")
        n = self.means.shape[0]
        if self.covariances.shape != (n, 2, 2):
            raise ValueError(
                f"covariances must be ({n}, 2, 2), got {self.covariances.shape}"
            )
        if self.dt <= 0.0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if not np.all(np.isfinite(self.means)) or not np.all(
            np.isfinite(self.covariances)
        ):
            raise ValueError("prediction contains non-finite entries")
        asym = np.abs(self.covariances - np.transpose(self.covariances, (0, 2, 1)))
        if asym.max(initial=0.0) > _SYM_TOL:
            raise ValueError("covariances must be symmetric")
        eig = np.linalg.eigvalsh(self.covariances)
        if eig.min(initial=0.0) < -1e-10:
            raise ValueError("covariances must be positive semidefinite")

    @property
    def horizon(self) -> int:
        return self.means.shape[0]


@dataclass
class ControlBounds:
    """Per-step box bounds on controls: lower[k] <= upper[k] elementwise."""

    lower: np.ndarray  # (N, 2)
    upper: np.ndarray  # (N, 2)

    def __post_init__(self):
        self.lower = np.asarray(self.lower, dtype=float)
        self.upper = np.asarray(self.upper, dtype=float)
        if self.lower.shape != self.upper.shape or self.lower.ndim != 2:
            raise ValueError("lower/upper must share shape (N, 2)")
        if np.any(self.lower > self.upper + 1e-12):
            raise ValueError("lower bound exceeds upper bound")


@dataclass(frozen=True)
class ControlBoundsEndpoints:
    """Bounds at the start and end of the horizon; linear in between."""

    u_min_start: tuple  # (u1, u2) lower bounds at tau = t
    u_max_start: tuple
    u_min_end: tuple  # lower bounds at tau = t + T
    u_max_end: tuple

    def as_tuple(self) -> tuple:
        return (
            self.u_min_start + self.u_max_start + self.u_min_end + self.u_max_end
        )


def scale_covariance(pred: GaussianControlPrediction,
                     beta: float) -> GaussianControlPrediction:
    """Widen the predicted covariances to sigma/beta."""
    if not (beta > 0.0) or not math.isfinite(beta):
        raise ValueError(f"beta must be positive and finite, got {beta}")
    return GaussianControlPrediction(
        means=np.array(pred.means, copy=True),
        covariances=pred.covariances / beta,
        dt=pred.dt,
    )


def gamma_half_width(sigma: float, gamma: float) -> float:
    """Half-width capturing central mass gamma of N(0, sigma^2)."""
    if not (0.0 < gamma < 1.0):
        raise ValueError(f"gamma must lie in (0, 1), got {gamma}")
    if sigma < 0.0:
        raise ValueError(f"sigma must be nonnegative, got {sigma}")
    return float(sigma * math.sqrt(2.0) * erfinv(gamma))


def bounds_from_gamma(pred: GaussianControlPrediction,
                      gamma: float) -> ControlBounds:
    """Trim each per-step marginal to its central gamma-mass interval."""
    if not (0.0 < gamma < 1.0):
        raise ValueError(f"gamma must lie in (0, 1), got {gamma}")
    sig = np.sqrt(np.diagonal(pred.covariances, axis1=1, axis2=2))  # (N, 2)
    delta = sig * math.sqrt(2.0) * float(erfinv(gamma))
    return ControlBounds(lower=pred.means - delta, upper=pred.means + delta)


def apply_hard_caps(bounds: ControlBounds, caps=HARD_CAPS) -> ControlBounds:
    """Clamp bounds to the physical control box; idempotent."""
    lo = np.array(bounds.lower, copy=True)
    hi = np.array(bounds.upper, copy=True)
    for i, (c_lo, c_hi) in enumerate(caps):
        if c_lo > c_hi:
            raise ValueError(f"cap {i} is inverted: ({c_lo}, {c_hi})")
        lo[:, i] = np.clip(lo[:, i], c_lo, c_hi)
        hi[:, i] = np.clip(hi[:, i], c_lo, c_hi)
    return ControlBounds(lower=lo, upper=hi)


def endpoints(bounds: ControlBounds) -> ControlBoundsEndpoints:
    """Keep the first and last per-step bounds as the interpolation anchors."""
    if bounds.lower.shape[0] < 1:
        raise ValueError("bounds must cover at least one step")
    return ControlBoundsEndpoints(
        u_min_start=tuple(float(c) for c in bounds.lower[0]),
        u_max_start=tuple(float(c) for c in bounds.upper[0]),
        u_min_end=tuple(float(c) for c in bounds.lower[-1]),
        u_max_end=tuple(float(c) for c in bounds.upper[-1]),
    )


def interp_bounds(ep: ControlBoundsEndpoints, tau: float, horizon: float):
    """Bounds at elapsed time tau within [0, horizon], linearly interpolated.

    Returns (u_min, u_max) as float arrays of shape (2,).
    """
    if horizon <= 0.0:
        raise ValueError(f"horizon must be positive, got {horizon}")
    if tau < -1e-12 or tau > horizon + 1e-12:
        raise ValueError(f"tau {tau} outside [0, {horizon}]")
    s = min(max(tau / horizon, 0.0), 1.0)
    u_min = (1.0 - s) * np.array(ep.u_min_start) + s * np.array(ep.u_min_end)
    u_max = (1.0 - s) * np.array(ep.u_max_start) + s * np.array(ep.u_max_end)
    return u_min, u_max


def scripted_prediction(scenario, t: float) -> GaussianControlPrediction:
    """Prediction the scenario defines for wall-clock time t.

    The scenario must expose `dt` and a `predictions` sequence with one
    entry per macro step.
    """
    dt = scenario.dt
    k = int(round(t / dt))
    if abs(t - k * dt) > 1e-9:
        raise ScenarioFormatError(f"t={t} is not a multiple of scenario dt={dt}")
    preds = scenario.predictions
    if k < 0 or k >= len(preds):
        raise ScenarioFormatError(
            f"scenario defines no prediction for step {k} (t={t}); "
            f"have {len(preds)} steps"
        )
    return preds[k]
