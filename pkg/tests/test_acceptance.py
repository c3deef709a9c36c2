"""Acceptance gate: every shipped guarantee, one pass/fail line each.

Run with `pytest -v tests/test_acceptance.py`; each test is one numbered
criterion and its verbose line is the checklist entry. Tolerances are
stated inline next to the asserts. The suite is ordered cheapest first;
the Monte Carlo containment sweep at the end dominates the runtime and
carries its own 15-minute budget.
"""

import json
import math
import time

import numpy as np
import pytest
from scipy.integrate import quad
from scipy.stats import norm

import reachguard.reachability as rr
from reachguard.confidence import (
    ConfidenceBelief,
    bayes_update,
    effective_beta,
    epsilon_static,
)
from reachguard.dynamics import rollout_batch
from reachguard.prediction import (
    ControlBoundsEndpoints,
    GaussianControlPrediction,
    apply_hard_caps,
    bounds_from_gamma,
    endpoints,
    gamma_half_width,
    interp_bounds,
    scale_covariance,
)
from reachguard.reachability import (
    DEFAULT_GRID,
    FRTFamily,
    GridSpec,
    SolveCache,
    cfl_time_step,
    endpoints_from_key,
    frt_set,
    initial_value,
    project_positions,
    solve_frt,
)
from reachguard.sim import load_scenario, run_pair, scenario_path


def _line(criterion: int, ok: bool, detail: str):
    print(f"criterion {criterion}: {'PASS' if ok else 'FAIL'} - {detail}")
    assert ok, detail


def _ep(u1, u2, u1_end=None, u2_end=None):
    u1_end = u1 if u1_end is None else u1_end
    u2_end = u2 if u2_end is None else u2_end
    return ControlBoundsEndpoints(
        u_min_start=(u1[0], u2[0]), u_max_start=(u1[1], u2[1]),
        u_min_end=(u1_end[0], u2_end[0]), u_max_end=(u1_end[1], u2_end[1]),
    )


# ---------------------------------------------------------------------------
# criterion 4: Bayes filter closed forms


def test_criterion_4_belief_closed_forms():
    mu = np.array([0.3, -1.1])
    sigma = np.eye(2)
    post = bayes_update(ConfidenceBelief(), mu, mu, sigma)
    # observing the predicted mean weighs the models by beta^(d/2) = beta,
    # so from equal priors b_high = 1 / (1 + 0.2) exactly
    err_post = abs(post.b_high - 1.0 / 1.2)
    beta = effective_beta(post)
    err_beta = abs(beta - 13.0 / 15.0)
    assert err_post <= 1e-9
    assert err_beta <= 1e-9

    # simplex preservation over 1e6 random updates (with the static mix,
    # as the closed loop applies it)
    rng = np.random.default_rng(4)
    belief = ConfidenceBelief()
    obs = rng.normal(mu, 2.0, size=(1_000_000, 2))
    worst = 0.0
    for u in obs:
        belief = epsilon_static(bayes_update(belief, u, mu, sigma))
        if belief.b_low < 0.0 or belief.b_high < 0.0:
            worst = math.inf
            break
        worst = max(worst, abs(belief.b_low + belief.b_high - 1.0))
    _line(4, err_post <= 1e-9 and err_beta <= 1e-9 and worst <= 1e-12,
          f"posterior err {err_post:.1e}, beta err {err_beta:.1e}, "
          f"simplex drift {worst:.1e} over 1e6 updates")


# ---------------------------------------------------------------------------
# criterion 5: trimming captures exactly the requested mass


def test_criterion_5_trim_mass_quadrature():
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(100):
        mu = rng.uniform(-2.0, 2.0, 2)
        sig = rng.uniform(0.05, 2.0, 2)
        beta = rng.uniform(0.2, 1.0)
        gamma = rng.uniform(0.05, 0.99)
        pred = GaussianControlPrediction(
            means=mu[None], covariances=np.diag(sig ** 2)[None], dt=0.5
        )
        b = bounds_from_gamma(scale_covariance(pred, beta), gamma)
        for i in range(2):
            scale = sig[i] / math.sqrt(beta)
            mass, _ = quad(lambda u: norm.pdf(u, mu[i], scale),
                           b.lower[0, i], b.upper[0, i])
            worst = max(worst, abs(mass - gamma))
    err_ref = abs(gamma_half_width(1.0, 0.1) - 0.12566)
    assert worst <= 1e-6
    assert err_ref <= 1e-4
    _line(5, worst <= 1e-6 and err_ref <= 1e-4,
          f"worst mass error {worst:.2e} over 100 draws, "
          f"half-width(gamma=0.1, sigma=1) err {err_ref:.2e}")


# ---------------------------------------------------------------------------
# criterion 3: analytic tubes


def test_criterion_3_analytic_tubes():
    # (a) zero bounds at zero speed: the tube is exactly the initial set
    still = GridSpec(lo=(-3.0, -3.0, -math.pi, -0.15),
                     hi=(3.0, 3.0, math.pi, 0.15), shape=(13, 13, 61, 7))
    ep0 = _ep((0.0, 0.0), (0.0, 0.0))
    vf0 = solve_frt(0.0, ep0, still, 3.0, eps=(0.75, 0.075, 0.16),
                    check_boundary=False)
    exact = np.array_equal(vf0.values < 0, vf0.l_values < 0)
    assert exact

    # (b) zero bounds at 5 m/s: a straight band sliding 15 m in 3 s
    grid = GridSpec(lo=(-3.0, -6.5, -math.pi, 4.4),
                    hi=(22.0, 6.0, math.pi, 5.6), shape=(51, 26, 127, 9))
    vf = solve_frt(5.0, ep0, grid, 3.0, eps=(0.75, 0.25, 0.08))
    cell = max(grid.spacings())
    xs = np.linspace(0.0, 15.0, 31)
    pts = np.stack([xs, 0 * xs, 0 * xs, 5.0 + 0 * xs], axis=1)
    seg_worst = float(vf.interpolate(pts).max())
    assert seg_worst <= cell  # inside within one grid cell
    occ = project_positions(frt_set(vf))
    y_max = float(np.abs(grid.nodes(1)[np.nonzero(occ)[1]]).max())
    assert y_max <= 2.0 + cell  # tightness: no sideways smear beyond 2 m
    _line(3, exact and seg_worst <= cell and y_max <= 2.0 + cell,
          f"still tube exact; segment worst V {seg_worst:.3f} <= {cell}, "
          f"max |y| {y_max:.2f} <= {2.0 + cell}")


# ---------------------------------------------------------------------------
# criterion 2: lower confidence never shrinks the tube


def test_criterion_2_confidence_nesting():
    grid = GridSpec(lo=(-3.5, -12.0, -math.pi, -2.5),
                    hi=(16.5, 12.0, math.pi, 14.5), shape=(41, 49, 45, 35))
    eps = (1.0, 0.75, 0.25)
    pred = GaussianControlPrediction(
        means=np.zeros((6, 2)),
        covariances=np.tile(np.diag([0.04, 1.0]), (6, 1, 1)),
        dt=0.25,
    )
    horizon = 1.5

    def ep_at(beta):
        return endpoints(apply_hard_caps(
            bounds_from_gamma(scale_covariance(pred, beta), 0.9)))

    # the widest (lowest-beta) configuration fixes the shared numerics
    alphas = rr._derive_alphas(grid, ep_at(0.2))
    dtau = horizon / math.ceil(horizon / cfl_time_step(grid, alphas))
    masks = {}
    for beta in (0.2, 0.5, 1.0):
        vf = solve_frt(6.0, ep_at(beta), grid, horizon, eps=eps,
                       alphas=alphas, dtau=dtau)
        masks[beta] = frt_set(vf)
    bad_05 = int((masks[0.5] & ~masks[0.2]).sum())
    bad_10 = int((masks[1.0] & ~masks[0.5]).sum())
    assert bad_05 == 0 and bad_10 == 0
    _line(2, bad_05 == 0 and bad_10 == 0,
          f"mask(0.2) >= mask(0.5) >= mask(1.0); violating cells "
          f"{bad_05} and {bad_10}; sizes "
          f"{int(masks[0.2].sum())}/{int(masks[0.5].sum())}/{int(masks[1.0].sum())}")


# ---------------------------------------------------------------------------
# criterion 9: precomputed family vs direct solves


def test_criterion_9_family_conservatism():
    grid = GridSpec(lo=(-2.0, -4.0, -math.pi, 0.0), hi=(6.5, 4.0, math.pi, 5.5),
                    shape=(18, 17, 9, 12))
    fam = FRTFamily(
        grid=grid, horizon=1.0, eps=(0.8, 0.8, 1.1),
        knots={
            "v_start": [2.0, 2.5],
            "u1_min_start": [-0.2, -0.1], "u2_min_start": [-1.0, -0.6],
            "u1_max_start": [0.1, 0.2], "u2_max_start": [0.6, 1.0],
            "u1_min_end": [-0.2], "u2_min_end": [-1.0],
            "u1_max_end": [0.2], "u2_max_end": [1.0],
        },
    ).precompute()

    # on-lattice queries are bit-identical to schedule-matched direct solves
    exact = 0
    keys = list(fam.lattice_keys())
    for key in keys:
        v0, ep = endpoints_from_key(key)
        got = fam.query(v0, ep)
        direct = solve_frt(v0, ep, grid, 1.0, eps=fam.eps,
                           alphas=fam.alphas, dtau=fam.dtau)
        exact += int(np.array_equal(got.values, direct.values))

    # off-lattice queries stay supersets of their own direct solves
    rng = np.random.default_rng(9)
    supersets = 0
    for _ in range(20):
        ep = _ep(
            (rng.uniform(-0.2, -0.1), rng.uniform(0.1, 0.2)),
            (rng.uniform(-1.0, -0.6), rng.uniform(0.6, 1.0)),
            u1_end=(-0.2, 0.2), u2_end=(-1.0, 1.0),
        )
        v0 = rng.uniform(2.0, 2.5)
        got = fam.query(v0, ep)
        direct = solve_frt(v0, ep, grid, 1.0, eps=fam.eps,
                           alphas=fam.alphas, dtau=fam.dtau)
        extra = (direct.values < 0) & ~(got.values < 0)
        supersets += int(extra.sum() == 0)
    assert exact == len(keys) and supersets == 20
    _line(9, exact == len(keys) and supersets == 20,
          f"{exact}/{len(keys)} lattice keys bit-identical, "
          f"{supersets}/20 off-lattice queries conservative")


# ---------------------------------------------------------------------------
# criteria 6-8: bundled scenarios


@pytest.fixture(scope="module")
def scenario_runs():
    runs = {}
    for name in ("stop_sign", "uturn"):
        sc = load_scenario(scenario_path(name))
        cache = SolveCache(sc.grid, sc.horizon, eps=sc.eps, maxsize=64)
        runs[name] = (sc, run_pair(sc, cache=cache), run_pair(sc, cache=cache))
    return runs


def _controls_within_bounds(sc, record):
    """True when the realized controls stay inside the bounds the tube used."""
    pred = sc.predictions[record.k]
    ep = endpoints(apply_hard_caps(
        bounds_from_gamma(scale_covariance(pred, record.beta), sc.gamma)))
    n_h = min(sc.horizon_steps, sc.n_steps - record.k)
    for j in range(n_h):
        u = np.asarray(sc.controls[record.k + j], dtype=float)
        for tau in (j * sc.dt, min((j + 1) * sc.dt, sc.horizon)):
            lo, hi = interp_bounds(ep, tau, sc.horizon)
            if np.any(u < lo - 1e-9) or np.any(u > hi + 1e-9):
                return False
    return True


def test_criterion_6_stop_sign_kinematics(scenario_runs):
    sc, (on, off), _ = scenario_runs["stop_sign"]
    m_on, m_off = on.metrics, off.metrics
    assert sc.ego.v0 == 23.0
    assert abs(m_on["detection_distance"] - 19.5) <= 1e-9
    assert abs(m_off["detection_distance"] - 8.0) <= 1e-9
    assert abs(m_on["overshoot"] - 6.9) <= 0.15
    assert abs(m_on["brake_duration"] - 2.3) <= 0.25
    assert abs(m_off["overshoot"] - 18.4) <= 0.15
    _line(6, True,
          f"detections {m_on['detection_distance']}/{m_off['detection_distance']} m, "
          f"overshoots {m_on['overshoot']:.2f} (6.9+-0.15) / "
          f"{m_off['overshoot']:.2f} (18.4+-0.15) m, "
          f"brake {m_on['brake_duration']:.2f} s (2.3+-0.25)")


def test_criterion_7_uturn_kinematics(scenario_runs):
    sc, (on, off), _ = scenario_runs["uturn"]
    m_on, m_off = on.metrics, off.metrics
    assert sc.ego.v0 == 26.0
    assert abs(m_on["detection_distance"] - 39.0) <= 1e-9
    assert abs(m_off["detection_distance"] - 26.0) <= 1e-9
    a_det = on.records[m_on["detection_step"]].accel
    assert abs(abs(a_det) - 8.67) <= 0.1
    assert m_on["stop_x"] is not None and m_on["stop_x"] <= sc.ego.line_x + 1e-6
    assert abs(m_off["brake_duration"] - 2.6) <= 0.25
    assert m_off["stop_x"] is not None and m_off["stop_x"] > sc.ego.line_x
    assert m_off["collision"] is True
    _line(7, True,
          f"detections {m_on['detection_distance']}/{m_off['detection_distance']} m, "
          f"|a| {abs(a_det):.3f} (8.67+-0.1), stop_x {m_on['stop_x']:.2f} <= "
          f"line {sc.ego.line_x}; baseline brakes {m_off['brake_duration']:.2f} s "
          f"(2.6+-0.25), stops {m_off['stop_x']:.2f} past the line, collides")


def test_criterion_8_scenarios_end_to_end(scenario_runs):
    details = []
    ok = True
    for name in ("stop_sign", "uturn"):
        sc, (on, off), (on2, off2) = scenario_runs[name]
        det_on = on.metrics["detection_step"]
        det_off = off.metrics["detection_step"]
        earlier = det_on is not None and det_off is not None and det_on <= det_off - 1
        avoids = on.metrics["collision"] is False
        collides = off.metrics["collision"] is True
        same = (json.dumps(on.to_dict(), sort_keys=True)
                == json.dumps(on2.to_dict(), sort_keys=True)
                and json.dumps(off.to_dict(), sort_keys=True)
                == json.dumps(off2.to_dict(), sort_keys=True))
        # containment must hold on every step whose realized controls lie
        # within the bounds the tube was solved for
        audit_bad = [r.k for r in on.records
                     if _controls_within_bounds(sc, r)
                     and r.containment_margin > 0.0]
        ok &= earlier and avoids and collides and same and not audit_bad
        details.append(
            f"{name}: detect {det_on}<{det_off}, on-collision "
            f"{on.metrics['collision']}, off-collision {off.metrics['collision']}, "
            f"rerun-identical {same}, in-bounds containment breaks {audit_bad}"
        )
    _line(8, ok, "; ".join(details))


# ---------------------------------------------------------------------------
# criterion 1: Monte Carlo containment on the full-size grid


def _fits_domain(grid, v0, ep, horizon, eps):
    """Velocity-envelope precheck that the tube stays off the grid walls."""
    lo, hi = grid.lo, grid.hi
    u1m = max(abs(ep.u_min_start[0]), abs(ep.u_max_start[0]),
              abs(ep.u_min_end[0]), abs(ep.u_max_end[0]))
    u2_hi = max(ep.u_max_start[1], ep.u_max_end[1])
    u2_lo = min(ep.u_min_start[1], ep.u_min_end[1])
    margin = 2.0 * max(grid.spacings())
    if v0 + max(0.0, u2_hi) * horizon > hi[3] - eps[1] - margin:
        return False
    if v0 + min(0.0, u2_lo) * horizon < lo[3] + eps[1] + margin:
        return False
    ts = np.linspace(0.0, horizon, 121)
    v_hi_t = v0 + max(0.0, u2_hi) * ts
    v_lo_t = v0 + min(0.0, u2_lo) * ts
    if eps[0] + np.trapezoid(np.maximum(v_hi_t, 0.0), ts) > hi[0] - margin:
        return False
    if -eps[0] - np.trapezoid(np.maximum(-v_lo_t, 0.0), ts) < lo[0] + margin:
        return False
    tilt = np.minimum(1.0, eps[2] + u1m * ts)
    v_abs = np.maximum(np.abs(v_hi_t), np.abs(v_lo_t))
    y_max = eps[0] + np.trapezoid(v_abs * tilt, ts)
    if y_max > hi[1] - margin or -y_max < lo[1] + margin:
        return False
    return True


def _draw_config(rng, grid, horizon, eps):
    while True:
        v0 = rng.uniform(0.0, 13.0)
        c1 = rng.uniform(-0.3, 0.3)
        h1 = rng.uniform(0.05, 0.6)
        c2 = rng.uniform(-1.5, 1.0)
        h2 = rng.uniform(0.2, 1.5)
        g1 = rng.uniform(0.6, 1.4)
        g2 = rng.uniform(0.6, 1.4)
        ep = ControlBoundsEndpoints(
            u_min_start=(c1 - h1, c2 - h2),
            u_max_start=(c1 + h1, c2 + h2),
            u_min_end=(c1 - h1 * g1, c2 - h2 * g2),
            u_max_end=(c1 + h1 * g1, c2 + h2 * g2),
        )
        if _fits_domain(grid, v0, ep, horizon, eps):
            return v0, ep


def _count_violations(vf, rng, tol, n_traj=10000, n_seg=12):
    """Roll sampled in-bound controls and count states escaping the tube.

    Controls are piecewise constant over `n_seg` segments; each segment's
    draw respects the interpolated bounds at both of its endpoints, so the
    whole trajectory stays within the time-varying control set.
    """
    seg = vf.horizon / n_seg
    states = np.tile([0.0, 0.0, 0.0, vf.v_start], (n_traj, 1))
    violations = 0
    worst = -np.inf
    for s in range(n_seg):
        lo0, hi0 = interp_bounds(vf.endpoints, s * seg, vf.horizon)
        lo1, hi1 = interp_bounds(vf.endpoints, (s + 1) * seg, vf.horizon)
        lo = np.maximum(lo0, lo1)
        hi = np.minimum(hi0, hi1)
        u = rng.uniform(lo, hi, (n_traj, 2))
        states = rollout_batch(states, u[None], seg, substep=0.05)[-1]
        vals = vf.interpolate(states)
        violations += int((vals > tol).sum())
        worst = max(worst, float(vals.max()))
    return violations, worst


def test_criterion_1_monte_carlo_containment():
    horizon = 3.0
    eps = (1.5, 1.0, 0.30)
    tol = 2.0 * max(DEFAULT_GRID.spacings())
    rng = np.random.default_rng(0)
    t0 = time.time()
    total_violations = 0
    worsts = []
    for i in range(5):
        v0, ep = _draw_config(rng, DEFAULT_GRID, horizon, eps)
        vf = solve_frt(v0, ep, DEFAULT_GRID, horizon, eps=eps)
        bad, worst = _count_violations(vf, rng, tol)
        total_violations += bad
        worsts.append(worst)
        assert bad == 0, (
            f"config {i} (v0={v0:.3f}): {bad} of 120000 sampled states "
            f"escaped the tube (worst V {worst:.4f} > tol {tol})"
        )
    elapsed = time.time() - t0
    assert elapsed <= 900.0
    _line(1, total_violations == 0 and elapsed <= 900.0,
          f"0 violations in 5x10000 trajectories (12 states each), worst V "
          f"{max(worsts):.4f} vs tol {tol:.1f}, runtime {elapsed:.0f}s <= 900s")
