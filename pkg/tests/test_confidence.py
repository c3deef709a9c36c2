"""Belief-update oracles: scipy density cross-check and closed-form posteriors."""

import math

import numpy as np
import pytest
from scipy.stats import multivariate_normal

from reachguard.confidence import (
    ConfidenceBelief,
    bayes_update,
    effective_beta,
    epsilon_static,
    likelihood,
    log_likelihood,
)
from reachguard.errors import NumericalFailureError


def test_belief_validation():
    b = ConfidenceBelief()
    assert b.beta_low == 0.2 and b.beta_high == 1.0
    assert b.as_tuple() == (0.5, 0.5)
    with pytest.raises(ValueError):
        ConfidenceBelief(beta_low=0.0)
    with pytest.raises(ValueError):
        ConfidenceBelief(beta_low=1.5)
    with pytest.raises(ValueError):
        ConfidenceBelief(beta_high=0.9)
    with pytest.raises(ValueError):
        ConfidenceBelief(epsilon=1.0)
    with pytest.raises(ValueError):
        ConfidenceBelief(b_low=0.7, b_high=0.7)
    with pytest.raises(ValueError):
        ConfidenceBelief(b_low=-0.1, b_high=1.1)


def test_log_likelihood_matches_scipy():
    # independent oracle: scipy's multivariate normal at covariance sigma/beta
    rng = np.random.default_rng(5)
    sigma = np.array([[0.5, 0.2], [0.2, 0.8]])
    for beta in (0.2, 0.5, 1.0):
        for _ in range(10):
            mu = rng.uniform(-2, 2, 2)
            u = rng.uniform(-3, 3, 2)
            ref = multivariate_normal(mean=mu, cov=sigma / beta).logpdf(u)
            assert log_likelihood(u, mu, sigma, beta) == pytest.approx(ref, abs=1e-10)
            assert likelihood(u, mu, sigma, beta) == pytest.approx(
                math.exp(ref), rel=1e-9
            )


def test_log_likelihood_rejects_bad_inputs():
    eye = np.eye(2)
    with pytest.raises(ValueError):
        log_likelihood([0.0, 0.0], [0.0, 0.0], eye, 0.0)
    with pytest.raises(ValueError):
        log_likelihood([0.0], [0.0, 0.0], eye, 1.0)
    with pytest.raises(ValueError):
        log_likelihood([np.nan, 0.0], [0.0, 0.0], eye, 1.0)
    with pytest.raises(ValueError):
        log_likelihood([0.0, 0.0], [0.0, 0.0], np.array([[1.0, 0.3], [0.0, 1.0]]), 1.0)
    with pytest.raises(NumericalFailureError):
        log_likelihood([0.0, 0.0], [0.0, 0.0], np.zeros((2, 2)), 1.0)


def test_on_mean_observation_posterior():
    # u_obs == mu: likelihood ratio f_low/f_high = (beta_low/beta_high)^(d/2) = 0.2,
    # so from a uniform prior b_high = 1/1.2 and the weighted beta is 13/15.
    belief = ConfidenceBelief()
    post = bayes_update(belief, [0.1, -0.3], [0.1, -0.3], np.diag([0.04, 0.25]))
    assert post.b_high == pytest.approx(1.0 / 1.2, abs=1e-12)
    assert post.b_low == pytest.approx(0.2 / 1.2, abs=1e-12)
    assert effective_beta(post) == pytest.approx(0.2 * (0.2 / 1.2) + 1.0 / 1.2, abs=1e-12)
    assert effective_beta(post) == pytest.approx(0.8666666667, abs=1e-9)
    # the uniform prior itself averages to 0.6
    assert effective_beta(belief) == pytest.approx(0.6)


def test_posterior_closed_form_random():
    # direct two-point Bayes rule with an explicit inverse, no cholesky
    rng = np.random.default_rng(9)
    sigma = np.array([[0.3, 0.1], [0.1, 0.6]])
    inv = np.linalg.inv(sigma)
    det = np.linalg.det(sigma)
    belief = ConfidenceBelief(b_low=0.3, b_high=0.7)
    for _ in range(25):
        mu = rng.uniform(-1, 1, 2)
        u = rng.uniform(-2, 2, 2)
        maha = float((u - mu) @ inv @ (u - mu))
        f = [
            beta / (2 * math.pi * math.sqrt(det)) * math.exp(-0.5 * beta * maha)
            for beta in (0.2, 1.0)
        ]
        w = np.array([0.3 * f[0], 0.7 * f[1]])
        expect = w / w.sum()
        post = bayes_update(belief, u, mu, sigma)
        assert post.b_low == pytest.approx(expect[0], abs=1e-12)
        assert post.b_high == pytest.approx(expect[1], abs=1e-12)


def test_update_direction_crossover():
    # the low-beta branch wins once maha > d * ln(beta_high/beta_low) / (beta_high - beta_low)
    belief = ConfidenceBelief()
    crit = 2.0 * math.log(5.0) / 0.8
    eye = np.eye(2)
    near = bayes_update(belief, [math.sqrt(crit - 0.4), 0.0], [0.0, 0.0], eye)
    far = bayes_update(belief, [math.sqrt(crit + 0.4), 0.0], [0.0, 0.0], eye)
    assert near.b_high > 0.5
    assert far.b_low > 0.5
    # a grossly mispredicted control collapses confidence
    wild = bayes_update(belief, [8.0, 8.0], [0.0, 0.0], eye)
    assert wild.b_low > 0.999
    assert effective_beta(wild) < 0.201


def test_degenerate_observation_keeps_prior():
    belief = ConfidenceBelief(b_low=0.4, b_high=0.6)
    with pytest.warns(RuntimeWarning):
        post = bayes_update(belief, [1e200, 0.0], [0.0, 0.0], np.eye(2))
    assert post.b_low == 0.4 and post.b_high == 0.6


def test_epsilon_static_mix():
    uniform = ConfidenceBelief()
    assert epsilon_static(uniform).as_tuple() == pytest.approx((0.5, 0.5))
    sure = ConfidenceBelief(b_low=1.0, b_high=0.0)
    mixed = epsilon_static(sure)
    assert mixed.b_low == pytest.approx(0.975)
    assert mixed.b_high == pytest.approx(0.025)
    frozen = ConfidenceBelief(b_low=1.0, b_high=0.0, epsilon=0.0)
    assert epsilon_static(frozen).as_tuple() == pytest.approx((1.0, 0.0))


def test_perfect_observations_fixed_point():
    # repeated on-mean updates with the epsilon mix converge to the solution of
    # b = 0.95 * 0.2 b / (1 - 0.8 b) + 0.025, i.e. b_low ~ 0.031048
    belief = ConfidenceBelief()
    sigma = np.eye(2)
    for _ in range(50):
        belief = bayes_update(belief, [0.5, -0.5], [0.5, -0.5], sigma)
        belief = epsilon_static(belief)
    assert belief.b_low == pytest.approx(0.0310484, abs=5e-5)
    assert effective_beta(belief) == pytest.approx(0.9751613, abs=5e-5)


def test_mispredicted_observations_stay_low():
    # persistent 3-sigma misses keep confidence pinned near beta_low
    belief = ConfidenceBelief()
    sigma = np.diag([0.01, 0.04])
    for _ in range(30):
        belief = bayes_update(belief, [0.5, 1.0], [0.0, 0.0], sigma)
        belief = epsilon_static(belief)
    assert belief.b_low > 0.95
    assert effective_beta(belief) < 0.24
