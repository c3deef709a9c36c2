"""Extended unicycle dynamics and fixed-step RK4 integration.

State is (x, y, theta, v): planar position in meters, heading in radians
normalized to (-pi, pi], and signed speed in m/s. Controls are
u = (u1, u2): heading rate in rad/s and longitudinal acceleration in m/s^2.

    x_dot     = v * cos(theta)
    y_dot     = v * sin(theta)
    theta_dot = u1
    v_dot     = u2

Speed is deliberately not clamped here; callers that need a standstill
(e.g. a braking ego) handle the v = 0 crossing themselves.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidStateError

DEFAULT_SUBSTEP = 0.05  # s, internal RK4 step used by step()/rollout()


def wrap_angle(theta: float) -> float:
    """Normalize an angle to (-pi, pi]."""
    return math.pi - (math.pi - theta) % (2.0 * math.pi)


@dataclass
class AgentState:
    """Pose and speed of one vehicle."""

    x: float  # m
    y: float  # m
    theta: float  # rad, (-pi, pi]
    v: float  # m/s

    def __post_init__(self):
        vals = (self.x, self.y, self.theta, self.v)
        if not all(math.isfinite(c) for c in vals):
            raise InvalidStateError(f"non-finite state {vals}")
        self.theta = wrap_angle(self.theta)

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta, self.v], dtype=float)

    @classmethod
    def from_array(cls, arr) -> "AgentState":
        x, y, theta, v = (float(c) for c in arr)
        return cls(x, y, theta, v)


@dataclass(frozen=True)
class ControlInput:
    """Heading rate (rad/s) and acceleration (m/s^2)."""

    u1: float
    u2: float

    def __post_init__(self):
        if not (math.isfinite(self.u1) and math.isfinite(self.u2)):
            raise ValueError(f"non-finite control ({self.u1}, {self.u2})")

    def as_array(self) -> np.ndarray:
        return np.array([self.u1, self.u2], dtype=float)


@dataclass
class Trajectory:
    """Uniformly sampled states: states[k] holds the state at times[k]."""

    times: np.ndarray  # (N,) s
    states: np.ndarray  # (N, 4)
    dt: float  # s between consecutive samples

    def __len__(self):
        return len(self.times)

    def positions(self) -> np.ndarray:
        return self.states[:, :2]


def flow(state_arr: np.ndarray, u_arr: np.ndarray) -> np.ndarray:
    """Right-hand side of the dynamics.

    Accepts a single (4,) state with (2,) control, or batches (..., 4)
    with broadcastable (..., 2) controls.
    """
    theta = state_arr[..., 2]
    v = state_arr[..., 3]
    out = np.empty_like(state_arr)
    out[..., 0] = v * np.cos(theta)
    out[..., 1] = v * np.sin(theta)
    out[..., 2] = u_arr[..., 0]
    out[..., 3] = u_arr[..., 1]
    return out


def _rk4(arr: np.ndarray, u_arr: np.ndarray, dt: float) -> np.ndarray:
    k1 = flow(arr, u_arr)
    k2 = flow(arr + 0.5 * dt * k1, u_arr)
    k3 = flow(arr + 0.5 * dt * k2, u_arr)
    k4 = flow(arr + dt * k3, u_arr)
    return arr + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def rk4_step(state: AgentState, u: ControlInput, dt: float) -> AgentState:
    """One raw fourth-order Runge-Kutta step of size dt."""
    if dt <= 0.0:
        raise ValueError(f"dt must be positive, got {dt}")
    nxt = _rk4(state.as_array(), u.as_array(), dt)
    return AgentState.from_array(nxt)


def step(state: AgentState, u: ControlInput, dt: float,
         substep: float = DEFAULT_SUBSTEP) -> AgentState:
    """Advance the state by dt under constant control.

    Integrates with internal RK4 sub-steps of at most `substep` seconds so a
    long macro step keeps the sub-step accuracy of the simulator.
    """
    if dt <= 0.0:
        raise ValueError(f"dt must be positive, got {dt}")
    if substep <= 0.0:
        raise ValueError(f"substep must be positive, got {substep}")
    n = max(1, math.ceil(dt / substep - 1e-12))
    h = dt / n
    arr = state.as_array()
    u_arr = u.as_array()
    for _ in range(n):
        arr = _rk4(arr, u_arr, h)
    return AgentState.from_array(arr)


def rollout(state: AgentState, controls, dt: float,
            substep: float = DEFAULT_SUBSTEP) -> Trajectory:
    """Apply each control for dt seconds and record the visited states.

    Returns a trajectory of len(controls) + 1 samples starting at `state`.
    """
    if dt <= 0.0:
        raise ValueError(f"dt must be positive, got {dt}")
    states = np.empty((len(controls) + 1, 4), dtype=float)
    states[0] = state.as_array()
    cur = state
    for k, u in enumerate(controls):
        if not isinstance(u, ControlInput):
            u = ControlInput(float(u[0]), float(u[1]))
        cur = step(cur, u, dt, substep)
        states[k + 1] = cur.as_array()
    times = np.arange(len(controls) + 1, dtype=float) * dt
    return Trajectory(times=times, states=states, dt=dt)


def rollout_batch(states0: np.ndarray, controls: np.ndarray, dt: float,
                  substep: float = DEFAULT_SUBSTEP) -> np.ndarray:
    """Vectorized rollout for N agents at once.

    states0: (N, 4); controls: (K, N, 2), controls[k] held for dt seconds.
    Returns (K+1, N, 4) states with headings wrapped to (-pi, pi].
    """
    if dt <= 0.0:
        raise ValueError(f"dt must be positive, got {dt}")
    n_sub = max(1, math.ceil(dt / substep - 1e-12))
    h = dt / n_sub
    out = np.empty((controls.shape[0] + 1,) + states0.shape, dtype=float)
    out[0] = states0
    cur = states0.astype(float, copy=True)
    for k in range(controls.shape[0]):
        u_arr = controls[k]
        for _ in range(n_sub):
            cur = _rk4(cur, u_arr, h)
        out[k + 1] = cur
    out[..., 2] = np.pi - np.mod(np.pi - out[..., 2], 2.0 * np.pi)
    return out
