"""Closed-loop scenario simulation of the safety-assurance pipeline.

A scenario scripts the human driver's true controls and the (possibly
wrong) Gaussian control predictions the pipeline receives. Each macro step
the simulator:

1. updates the confidence belief from the control the human just executed,
2. scales the current prediction's covariance by the effective beta,
   trims it to the central gamma mass, caps it, and keeps the endpoint
   bounds,
3. solves (or fetches from cache) the forward reachable tube for those
   bounds and the human's current speed,
4. rasterizes the tube around the human's pose, dilates it by the
   collision radius, and scans the ego lane for conflicts,
5. lets the braking planner pick the ego acceleration (braking latches
   until standstill), and
6. advances both vehicles and audits whether the tube actually contained
   the human's subsequent motion.

Everything is deterministic: scripted controls, RK4 integration, exact
ego kinematics, and a quantized solve cache.
"""

from __future__ import annotations

import importlib.resources
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

try:
    import jsonschema
except ImportError:  # pragma: no cover - exercised only without the extra
    jsonschema = None

from . import render
from .confidence import ConfidenceBelief, bayes_update, effective_beta, epsilon_static
from .dynamics import AgentState, rollout, wrap_angle
from .errors import ScenarioFormatError
from .prediction import (
    GaussianControlPrediction,
    U1_CAP,
    U2_CAP,
    apply_hard_caps,
    bounds_from_gamma,
    endpoints,
    scale_covariance,
)
from .reachability import (
    DEFAULT_EPS,
    GridSpec,
    SolveCache,
    frt_set,
    project_positions,
)
from .safety import (
    EGO_A_MAX,
    R_COL,
    collision_check,
    minkowski_dilate,
    path_samples,
    plan_brake,
    world_occupancy,
    ego_advance,
)

SCENARIO_FORMAT = "scenario-v1"
FINE_DT = 0.05  # s, sub-step used for gap measurement and integration

SCENARIO_SCHEMA = {
    "type": "object",
    "required": ["format", "name", "dt", "n_steps", "horizon", "gamma",
                 "ego", "human", "predictions"],
    "properties": {
        "format": {"const": SCENARIO_FORMAT},
        "name": {"type": "string", "minLength": 1},
        "description": {"type": "string"},
        "dt": {"type": "number", "exclusiveMinimum": 0},
        "n_steps": {"type": "integer", "minimum": 1},
        "horizon": {"type": "number", "exclusiveMinimum": 0},
        "gamma": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "cell": {"type": "number", "exclusiveMinimum": 0},
        "threshold": {"type": "number", "minimum": 0},
        "eps": {"type": "array", "items": {"type": "number"}, "minItems": 3,
                "maxItems": 3},
        "grid": {
            "type": "object",
            "required": ["lo", "hi", "shape"],
            "properties": {
                "lo": {"type": "array", "items": {"type": "number"},
                       "minItems": 4, "maxItems": 4},
                "hi": {"type": "array", "items": {"type": "number"},
                       "minItems": 4, "maxItems": 4},
                "shape": {"type": "array", "items": {"type": "integer"},
                          "minItems": 4, "maxItems": 4},
            },
        },
        "belief": {
            "type": "object",
            "properties": {
                "beta_low": {"type": "number", "exclusiveMinimum": 0},
                "epsilon": {"type": "number", "minimum": 0,
                            "exclusiveMaximum": 1},
            },
        },
        "ego": {
            "type": "object",
            "required": ["x0", "v0", "line_x"],
            "properties": {
                "x0": {"type": "number"},
                "v0": {"type": "number", "minimum": 0},
                "line_x": {"type": "number"},
                "zone_end_x": {"type": "number"},
                "a_max": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "human": {
            "type": "object",
            "required": ["x0", "y0", "theta0", "v0", "controls"],
            "properties": {
                "x0": {"type": "number"},
                "y0": {"type": "number"},
                "theta0": {"type": "number"},
                "v0": {"type": "number"},
                "controls": {
                    "type": "array",
                    "items": {"type": "array", "items": {"type": "number"},
                              "minItems": 2, "maxItems": 2},
                    "minItems": 1,
                },
            },
        },
        "predictions": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["from", "to", "sigma"],
                "properties": {
                    "from": {"type": "integer", "minimum": 0},
                    "to": {"type": "integer", "minimum": 0},
                    "mean": {"type": "array", "items": {"type": "number"},
                             "minItems": 2, "maxItems": 2},
                    "track": {"type": "boolean"},
                    "sigma": {"type": "array",
                              "items": {"type": "number",
                                        "exclusiveMinimum": 0},
                              "minItems": 2, "maxItems": 2},
                },
            },
        },
    },
}


@dataclass(frozen=True)
class EgoConfig:
    """Lane-following ego vehicle parameters."""

    x0: float
    v0: float
    line_x: float  # m, where the ego must stop when a conflict is flagged
    zone_end_x: float  # m, far end of the scanned conflict zone
    a_max: float = EGO_A_MAX


@dataclass
class Scenario:
    """Fully scripted closed-loop scenario."""

    name: str
    dt: float
    n_steps: int
    horizon: float
    gamma: float
    ego: EgoConfig
    human0: AgentState
    controls: np.ndarray  # (n_steps, 2) true human controls
    predictions: list  # GaussianControlPrediction per macro step
    belief0: ConfidenceBelief
    grid: GridSpec
    eps: tuple = DEFAULT_EPS
    cell: float = 0.5
    threshold: float = 0.0
    description: str = ""

    @property
    def horizon_steps(self) -> int:
        return int(round(self.horizon / self.dt))


def _expand_predictions(raw_blocks, controls, dt, horizon,
                        n_steps) -> list:
    """Turn block-scheduled prediction specs into one Gaussian per step."""
    n_h = int(round(horizon / dt))
    if abs(n_h * dt - horizon) > 1e-9 or n_h < 1:
        raise ScenarioFormatError(
            f"horizon {horizon} must be a positive multiple of dt {dt}"
        )
    covered = np.zeros(n_steps, dtype=bool)
    preds: list = [None] * n_steps
    for block in raw_blocks:
        k0, k1 = int(block["from"]), int(block["to"])
        if k1 < k0 or k1 >= n_steps:
            raise ScenarioFormatError(
                f"prediction block [{k0}, {k1}] outside 0..{n_steps - 1}"
            )
        if covered[k0:k1 + 1].any():
            raise ScenarioFormatError(
                f"prediction block [{k0}, {k1}] overlaps an earlier block"
            )
        covered[k0:k1 + 1] = True
        sigma = np.asarray(block["sigma"], dtype=float)
        cov = np.diag(sigma ** 2)
        covs = np.repeat(cov[None], n_h, axis=0)
        track = bool(block.get("track", False))
        if not track and "mean" not in block:
            raise ScenarioFormatError(
                f"prediction block [{k0}, {k1}] needs a mean or track=true"
            )
        for k in range(k0, k1 + 1):
            if track:
                means = np.empty((n_h, 2))
                for j in range(n_h):
                    means[j] = controls[min(k + j, n_steps - 1)]
            else:
                means = np.repeat(
                    np.asarray(block["mean"], dtype=float)[None], n_h, axis=0
                )
            preds[k] = GaussianControlPrediction(means=means,
                                                 covariances=covs.copy(),
                                                 dt=dt)
    if not covered.all():
        missing = int(np.flatnonzero(~covered)[0])
        raise ScenarioFormatError(
            f"no prediction block covers step {missing}"
        )
    return preds


def scenario_from_dict(data: dict) -> Scenario:
    """Validate a scenario dictionary and build the runtime object."""
    if jsonschema is not None:
        try:
            jsonschema.validate(data, SCENARIO_SCHEMA)
        except jsonschema.ValidationError as exc:
            raise ScenarioFormatError(
                f"scenario failed validation: {exc.message}"
            ) from exc
    elif data.get("format") != SCENARIO_FORMAT:
        raise ScenarioFormatError(
            f"unsupported scenario format {data.get('format')!r}"
        )

    dt = float(data["dt"])
    n_steps = int(data["n_steps"])
    controls = np.asarray(data["human"]["controls"], dtype=float)
    if controls.shape != (n_steps, 2):
        raise ScenarioFormatError(
            f"human controls must be {n_steps} pairs, got shape {controls.shape}"
        )
    if np.abs(controls[:, 0]).max() > U1_CAP + 1e-9:
        raise ScenarioFormatError(
            f"human turn-rate controls exceed the +-{U1_CAP} rad/s cap"
        )
    if np.abs(controls[:, 1]).max() > U2_CAP + 1e-9:
        raise ScenarioFormatError(
            f"human acceleration controls exceed the +-{U2_CAP} m/s^2 cap"
        )

    ego_raw = data["ego"]
    ego = EgoConfig(
        x0=float(ego_raw["x0"]),
        v0=float(ego_raw["v0"]),
        line_x=float(ego_raw["line_x"]),
        zone_end_x=float(ego_raw.get("zone_end_x", ego_raw["line_x"] + 30.0)),
        a_max=float(ego_raw.get("a_max", EGO_A_MAX)),
    )
    h = data["human"]
    human0 = AgentState(float(h["x0"]), float(h["y0"]),
                        float(h["theta0"]), float(h["v0"]))
    belief_raw = data.get("belief", {})
    belief0 = ConfidenceBelief(
        beta_low=float(belief_raw.get("beta_low", 0.2)),
        epsilon=float(belief_raw.get("epsilon", 0.05)),
    )
    grid = (GridSpec.from_dict(data["grid"]) if "grid" in data else GridSpec())
    horizon = float(data["horizon"])
    preds = _expand_predictions(data["predictions"], controls, dt, horizon,
                                n_steps)
    return Scenario(
        name=str(data["name"]),
        dt=dt,
        n_steps=n_steps,
        horizon=horizon,
        gamma=float(data["gamma"]),
        ego=ego,
        human0=human0,
        controls=controls,
        predictions=preds,
        belief0=belief0,
        grid=grid,
        eps=tuple(data.get("eps", DEFAULT_EPS)),
        cell=float(data.get("cell", 0.5)),
        threshold=float(data.get("threshold", 0.0)),
        description=str(data.get("description", "")),
    )


def load_scenario(path) -> Scenario:
    with open(path) as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as exc:
            raise ScenarioFormatError(f"{path}: invalid JSON: {exc}") from exc
    return scenario_from_dict(data)


def scenario_path(name: str) -> str:
    """Filesystem path of a bundled scenario ("stop_sign" or "uturn")."""
    root = importlib.resources.files("reachguard") / "scenarios"
    path = root / f"{name}.json"
    if not path.is_file():
        have = sorted(p.stem for p in root.iterdir() if p.suffix == ".json")
        raise ScenarioFormatError(
            f"no bundled scenario named {name!r}; available: {have}"
        )
    return str(path)


@dataclass
class StepRecord:
    """Everything observed and decided during one macro step."""

    k: int
    t: float  # s
    human: tuple  # (x, y, theta, v) at the start of the step
    ego_x: float
    ego_v: float
    u_obs: tuple | None  # control observed from the previous step
    b_low: float
    b_high: float
    beta: float
    conflict: bool
    braking: bool
    accel: float
    reason: str
    tube_cells: int
    tube_area: float  # m^2 of dilated world occupancy
    containment_margin: float  # max tube value over the realized future
    min_gap: float  # m, closest center distance during the step
    collision: bool

    def to_dict(self) -> dict:
        return {
            "k": self.k, "t": self.t, "human": list(self.human),
            "ego_x": self.ego_x, "ego_v": self.ego_v,
            "u_obs": None if self.u_obs is None else list(self.u_obs),
            "b_low": self.b_low, "b_high": self.b_high, "beta": self.beta,
            "conflict": self.conflict, "braking": self.braking,
            "accel": self.accel, "reason": self.reason,
            "tube_cells": self.tube_cells, "tube_area": self.tube_area,
            "containment_margin": self.containment_margin,
            "min_gap": self.min_gap, "collision": self.collision,
        }


@dataclass
class SimLog:
    """Per-step records plus summary metrics of one closed-loop run."""

    scenario: str
    adapt: bool
    dt: float
    records: list = field(default_factory=list)
    metrics: dict = field(default_factory=dict)

    def finalize(self, line_x: float):
        det = next((r.k for r in self.records if r.braking), None)
        stop_t = None
        stop_x = None
        for r in self.records:
            if r.braking and r.ego_v > 0.0 and r.accel < 0.0:
                t_star = r.ego_v / -r.accel
                if t_star <= self.dt + 1e-9:
                    stop_t = r.t + t_star
                    stop_x = r.ego_x + r.ego_v * t_star / 2.0
                    break
        min_gap = min((r.min_gap for r in self.records), default=math.inf)
        self.metrics = {
            "detection_step": det,
            "detection_time": None if det is None else det * self.dt,
            "detection_distance": (
                None if det is None else line_x - self.records[det].ego_x
            ),
            "stop_time": stop_t,
            "stop_x": stop_x,
            "overshoot": None if stop_x is None else stop_x - line_x,
            "brake_duration": (
                None if stop_t is None or det is None
                else stop_t - det * self.dt
            ),
            "collision": any(r.collision for r in self.records),
            "min_gap": min_gap,
            "containment_failures": [
                r.k for r in self.records if r.containment_margin > 0.0
            ],
            "final_b_low": self.records[-1].b_low if self.records else None,
            "final_beta": self.records[-1].beta if self.records else None,
        }
        return self

    # -- exports -------------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "adapt": self.adapt,
            "dt": self.dt,
            "metrics": self.metrics,
            "steps": [r.to_dict() for r in self.records],
        }

    def save_json(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=1, sort_keys=True)
        return path

    def save_trace_csv(self, path):
        cols = ("k", "t", "human_x", "human_y", "human_theta", "human_v",
                "ego_x", "ego_v", "b_low", "b_high", "beta", "conflict",
                "braking", "accel", "tube_cells", "tube_area",
                "containment_margin", "min_gap", "collision")
        with open(path, "w") as f:
            f.write(",".join(cols) + "\n")
            for r in self.records:
                row = (r.k, r.t, *r.human, r.ego_x, r.ego_v, r.b_low,
                       r.b_high, r.beta, int(r.conflict), int(r.braking),
                       r.accel, r.tube_cells, r.tube_area,
                       r.containment_margin, r.min_gap, int(r.collision))
                f.write(",".join(repr(float(c)) if isinstance(c, float)
                                 else str(c) for c in row) + "\n")
        return path

    def save_belief_csv(self, path):
        with open(path, "w") as f:
            f.write("k,t,b_low,b_high,beta\n")
            for r in self.records:
                f.write(f"{r.k},{r.t!r},{r.b_low!r},{r.b_high!r},{r.beta!r}\n")
        return path


def load_sim_log(path) -> SimLog:
    with open(path) as f:
        data = json.load(f)
    log = SimLog(scenario=data["scenario"], adapt=data["adapt"], dt=data["dt"])
    for s in data["steps"]:
        log.records.append(StepRecord(
            k=s["k"], t=s["t"], human=tuple(s["human"]), ego_x=s["ego_x"],
            ego_v=s["ego_v"],
            u_obs=None if s["u_obs"] is None else tuple(s["u_obs"]),
            b_low=s["b_low"], b_high=s["b_high"], beta=s["beta"],
            conflict=s["conflict"], braking=s["braking"], accel=s["accel"],
            reason=s["reason"], tube_cells=s["tube_cells"],
            tube_area=s["tube_area"],
            containment_margin=s["containment_margin"],
            min_gap=s["min_gap"], collision=s["collision"],
        ))
    log.metrics = data["metrics"]
    return log


def _body_frame(anchor: np.ndarray, states: np.ndarray) -> np.ndarray:
    """Map world states into the frame anchored at `anchor` (x, y, theta)."""
    out = np.array(states, dtype=float, copy=True)
    c, s = math.cos(anchor[2]), math.sin(anchor[2])
    dx = states[:, 0] - anchor[0]
    dy = states[:, 1] - anchor[1]
    out[:, 0] = c * dx + s * dy
    out[:, 1] = -s * dx + c * dy
    out[:, 2] = np.pi - np.mod(np.pi - (states[:, 2] - anchor[2]), 2 * np.pi)
    return out


def run(scenario: Scenario, adapt: bool = True, cache: SolveCache | None = None,
        audit: bool = True, render_dir=None) -> SimLog:
    """Run the closed loop and return the full log.

    With `adapt` False the confidence machinery is bypassed and the
    pipeline trusts the predictor outright (beta = 1), which is the
    baseline the adaptive run is compared against.
    """
    sc = scenario
    if cache is None:
        cache = SolveCache(sc.grid, sc.horizon, eps=sc.eps)
    n_fine = int(round(sc.dt / FINE_DT))
    if abs(n_fine * FINE_DT - sc.dt) > 1e-9:
        raise ScenarioFormatError(
            f"scenario dt {sc.dt} must be a multiple of {FINE_DT}"
        )

    # The human ignores the ego, so its whole trajectory is known up front:
    # coarse states at macro steps and fine states for gap measurement.
    fine_controls = np.repeat(sc.controls, n_fine, axis=0)
    human_fine = rollout(sc.human0, fine_controls, FINE_DT).states
    human_macro = human_fine[::n_fine]

    belief = sc.belief0
    ego_x, ego_v = sc.ego.x0, sc.ego.v0
    latched = False
    log = SimLog(scenario=sc.name, adapt=adapt, dt=sc.dt)

    for k in range(sc.n_steps):
        t = k * sc.dt
        h_now = human_macro[k]

        # 1. belief update from the control executed during step k-1
        u_obs = None
        if k > 0:
            u_obs = sc.controls[k - 1]
            if adapt:
                prev = sc.predictions[k - 1]
                belief = bayes_update(belief, u_obs, prev.means[0],
                                      prev.covariances[0])
        beta = effective_beta(belief) if adapt else 1.0
        b_low, b_high = belief.as_tuple()
        if adapt:
            belief = epsilon_static(belief)  # becomes the prior for k+1

        # 2. prediction -> scaled, trimmed, capped control bounds
        pred = sc.predictions[k]
        scaled = scale_covariance(pred, beta)
        bounds = apply_hard_caps(bounds_from_gamma(scaled, sc.gamma))
        ep = endpoints(bounds)

        # 3. tube for the human's current speed under those bounds
        vf = cache.get_or_solve(float(h_now[3]), ep)
        mask2 = project_positions(frt_set(vf, sc.threshold))

        # 4. world-frame collision set and lane scan
        occ = world_occupancy(mask2, sc.grid, h_now[:3], cell=sc.cell)
        dil = minkowski_dilate(occ, R_COL)
        pts = path_samples(ego_x, sc.ego.zone_end_x)
        conflict = collision_check(dil, pts) is not None

        # 5. braking decision; once braking starts it holds to standstill
        decision = plan_brake(ego_v, sc.ego.line_x - ego_x,
                              conflict or latched, a_max=sc.ego.a_max)
        if decision.braking:
            latched = True

        # 6. advance both vehicles at fine resolution, tracking the gap
        min_gap = math.inf
        ex, ev = ego_x, ego_v
        for j in range(n_fine + 1):
            hs = human_fine[k * n_fine + j]
            min_gap = min(min_gap, math.hypot(ex - hs[0], hs[1]))
            if j < n_fine:
                ex, ev = ego_advance(ex, ev, decision.accel, FINE_DT)

        # 7. audit: does the tube contain the realized human motion over
        #    the horizon it was solved for?
        margin = -math.inf
        if audit:
            k_end = min(k + sc.horizon_steps, sc.n_steps) * n_fine
            future = human_fine[k * n_fine:k_end + 1]
            body = _body_frame(h_now, future)
            vals = vf.interpolate(body)
            margin = float(np.max(vals))

        log.records.append(StepRecord(
            k=k, t=t, human=tuple(float(c) for c in h_now),
            ego_x=ego_x, ego_v=ego_v,
            u_obs=None if u_obs is None else tuple(float(c) for c in u_obs),
            b_low=float(b_low), b_high=float(b_high), beta=float(beta),
            conflict=conflict, braking=decision.braking,
            accel=float(decision.accel), reason=decision.reason,
            tube_cells=int(mask2.sum()), tube_area=float(dil.area()),
            containment_margin=margin,
            min_gap=float(min_gap), collision=bool(min_gap < R_COL),
        ))

        if render_dir is not None:
            human_state = AgentState(float(h_now[0]), float(h_now[1]),
                                     wrap_angle(float(h_now[2])),
                                     float(h_now[3]))
            render.write_frame(
                f"{render_dir}/frame_{k:03d}.svg",
                human=human_state, ego_x=ego_x, occupancy=occ, dilated=dil,
                line_x=sc.ego.line_x,
                labels=(f"k={k} t={t:.1f}s", f"beta={beta:.3f}",
                        f"braking={int(decision.braking)}"),
            )

        ego_x, ego_v = ego_advance(ego_x, ego_v, decision.accel, sc.dt)

    return log.finalize(sc.ego.line_x)


def run_pair(scenario: Scenario, cache: SolveCache | None = None,
             audit: bool = True) -> tuple:
    """Run the scenario with and without confidence adaptation."""
    if cache is None:
        cache = SolveCache(scenario.grid, scenario.horizon, eps=scenario.eps)
    on = run(scenario, adapt=True, cache=cache, audit=audit)
    off = run(scenario, adapt=False, cache=cache, audit=audit)
    return on, off
