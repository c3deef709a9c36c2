"""Forward reachable tubes for the extended unicycle on a fixed 4-D grid.

The tube value function V(x, tau) starts at the initial-set function l(x)
and evolves forward over the horizon under

    min{ dV/dtau + H(x, grad V), l(x) - V } = 0,
    H = max_u grad V . f(x, u),

so {V(., t+T) < 0} collects every state reachable within the horizon from
{l < 0} under the (time-interpolated) control bounds. The discrete update
freezes V at l from above:

    V <- min(V - dtau * H_lf, l)

with a local Lax-Friedrichs numerical Hamiltonian on second-order ENO
(minmod-limited) one-sided gradients, advanced by the two-stage TVD
Runge-Kutta scheme. The maximizing control is bang-bang per dimension, so
H needs only the bound endpoints. Dissipation coefficients bound |dH/dp|
per axis: the position axes use the pointwise speeds |v cos theta| and
|v sin theta|, the control axes use max |u1| and max |u2|; the time step
keeps the pointwise Courant sum below CFL_NUMBER, the monotonicity bound
of the underlying first-order scheme with headroom for the sharper
gradients. By default each step derives that sum from the speeds actually
present in the updated region, so slow tubes on fast grids take larger
steps; an explicit dtau is honored unchanged (and validated against the
grid-wide bound) so related solves can share one schedule. The running
min against both
l(x) and the previous step keeps the iterate a tube (pointwise
nonincreasing, frozen at the initial set). The heading axis is periodic;
the other axes see zero-gradient ghost nodes, and a solve fails loudly if
the sub-zero set ever touches a non-periodic boundary.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import math
import os
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .errors import (
    CFLViolationError,
    ConfigurationError,
    DomainTooSmallError,
    NumericalFailureError,
    OutOfRangeError,
)
from .prediction import ControlBoundsEndpoints, interp_bounds

AXES = ("x", "y", "theta", "v")
PERIODIC = (False, False, True, False)

# Defaults sized for 3 s of urban driving in the human's body frame.
DEFAULT_EPS = (1.0, 0.75, 0.16)  # m, m/s, rad margins of the initial set
DEFAULT_HORIZON = 3.0  # s
CFL_NUMBER = 0.75

# Active-box (narrowband) update: only nodes inside the bounding box of
# {V < band} plus a margin are stepped; the far field stays frozen at its
# current (over-approximating) values until the box reaches it.
BAND_SPACINGS = 4.0  # band threshold, in units of the largest grid spacing
BOX_MARGIN = 8  # extra cells kept on each side of the sub-band bounding box
BOX_REBUILD = 4  # steps between bounding-box rebuilds

_MAGIC = b"FRTV1"


@dataclass(frozen=True)
class GridSpec:
    """Rectangular grid over (x, y, theta, v); theta is periodic.

    Non-periodic axes place `shape[d]` nodes inclusively between lo and hi
    (spacing (hi-lo)/(n-1)). The periodic heading axis covers (lo, hi] with
    spacing (hi-lo)/n so the two ends are not double-counted.
    """

    lo: tuple = (-10.0, -25.0, -math.pi, -2.0)
    hi: tuple = (45.0, 25.0, math.pi, 20.0)
    shape: tuple = (111, 101, 61, 45)

    def __post_init__(self):
        if len(self.lo) != 4 or len(self.hi) != 4 or len(self.shape) != 4:
            raise ConfigurationError("grid needs 4 axes: x, y, theta, v")
        for d in range(4):
            if not (self.hi[d] > self.lo[d]):
                raise ConfigurationError(
                    f"grid axis {AXES[d]}: upper {self.hi[d]} must exceed lower {self.lo[d]}"
                )
            if int(self.shape[d]) < 3:
                raise ConfigurationError(
                    f"grid axis {AXES[d]}: need at least 3 cells, got {self.shape[d]}"
                )
        if abs((self.hi[2] - self.lo[2]) - 2.0 * math.pi) > 1e-9:
            raise ConfigurationError(
                "the heading axis wraps, so it must span exactly 2*pi "
                f"(got {self.hi[2] - self.lo[2]:.6g})"
            )
        object.__setattr__(self, "shape", tuple(int(n) for n in self.shape))
        object.__setattr__(self, "lo", tuple(float(c) for c in self.lo))
        object.__setattr__(self, "hi", tuple(float(c) for c in self.hi))

    def spacing(self, d: int) -> float:
        n = self.shape[d]
        if PERIODIC[d]:
            return (self.hi[d] - self.lo[d]) / n
        return (self.hi[d] - self.lo[d]) / (n - 1)

    def spacings(self) -> tuple:
        return tuple(self.spacing(d) for d in range(4))

    def nodes(self, d: int) -> np.ndarray:
        n = self.shape[d]
        if PERIODIC[d]:
            h = self.spacing(d)
            return self.lo[d] + h * np.arange(1, n + 1)
        return np.linspace(self.lo[d], self.hi[d], n)

    @property
    def num_nodes(self) -> int:
        return int(np.prod(self.shape))

    def to_dict(self) -> dict:
        return {"lo": list(self.lo), "hi": list(self.hi), "shape": list(self.shape)}

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        return cls(lo=tuple(d["lo"]), hi=tuple(d["hi"]), shape=tuple(d["shape"]))


DEFAULT_GRID = GridSpec()


def initial_value(grid: GridSpec, v_start: float, eps=DEFAULT_EPS) -> np.ndarray:
    """Initial-set function l(x) in the human's body frame.

    l(x) = max(||(x, y)|| - eps1, |v - v_start| - eps2, |theta| - eps3);
    its sub-zero set is a small ball around the origin at heading 0 and
    speed v_start. Each eps must resolve to at least 1.5 grid cells.
    """
    e1, e2, e3 = (float(e) for e in eps)
    hx, hy, hth, hv = grid.spacings()
    checks = ((e1, max(hx, hy), "eps1", "position"), (e2, hv, "eps2", "v"),
              (e3, hth, "eps3", "theta"))
    for e, h, name, axis in checks:
        if e <= 0.0:
            raise ConfigurationError(f"{name} must be positive, got {e}")
        if e < 1.5 * h - 1e-12:
            raise ConfigurationError(
                f"{name}={e} is below 1.5x the {axis} grid spacing ({h:.4g}); "
                "the initial set would be under-resolved"
            )
    if not (grid.lo[3] <= v_start <= grid.hi[3]):
        raise ConfigurationError(
            f"v_start={v_start} outside grid v range [{grid.lo[3]}, {grid.hi[3]}]"
        )
    xs = grid.nodes(0).astype(np.float32)
    ys = grid.nodes(1).astype(np.float32)
    ths = grid.nodes(2).astype(np.float32)
    vs = grid.nodes(3).astype(np.float32)
    pos = np.sqrt(xs[:, None] ** 2 + ys[None, :] ** 2) - np.float32(e1)
    th_term = np.abs(ths) - np.float32(e3)
    v_term = np.abs(vs - np.float32(v_start)) - np.float32(e2)
    l = np.maximum(pos[:, :, None, None], th_term[None, None, :, None])
    l = np.maximum(l, v_term[None, None, None, :])
    return np.ascontiguousarray(l, dtype=np.float32)


def hamiltonian(grad, state, u_min, u_max) -> float:
    """Reference scalar Hamiltonian max_u grad . f(x, u).

    `grad` is (px, py, ptheta, pv); `state` is (x, y, theta, v). The
    maximizer is bang-bang: each control picks the bound matching the sign
    of its gradient component.
    """
    px, py, pth, pv = (float(g) for g in grad)
    theta, v = float(state[2]), float(state[3])
    h = px * v * math.cos(theta) + py * v * math.sin(theta)
    h += pth * (u_max[0] if pth > 0.0 else u_min[0])
    h += pv * (u_max[1] if pv > 0.0 else u_min[1])
    return h


@njit(inline="always")
def _mm(a, b):
    """minmod: the smaller-magnitude argument when signs agree, else 0."""
    if a * b <= 0.0:
        return 0.0
    return a if abs(a) < abs(b) else b


@njit(cache=True, fastmath={"contract", "nsz", "arcp", "reassoc"})
def _euler_step(Vp, out, ax, ay, hx, hy, hth, hv, u1lo, u1hi, u2lo, u2hi,
                alth, alv, dt):
    """One unfrozen forward Euler sweep of -H_llf on the padded array.

    `Vp` carries two ghost layers per side (zero-gradient on x, y, v;
    wrapped on theta), so the loop body is branch free. One-sided
    gradients are second-order ENO with a minmod-limited correction;
    dissipation along x and y uses the pointwise wave speeds |v cos theta|
    and |v sin theta| (local Lax-Friedrichs) so thin tubes are not
    diffused away, while the control axes use the supplied global bounds.
    """
    nx = Vp.shape[0] - 4
    ny = Vp.shape[1] - 4
    nth = Vp.shape[2] - 4
    nv = Vp.shape[3] - 4
    for i in range(2, nx + 2):
        for j in range(2, ny + 2):
            for k in range(2, nth + 2):
                for m in range(2, nv + 2):
                    v0 = Vp[i, j, k, m]

                    a = Vp[i - 2, j, k, m]
                    b = Vp[i - 1, j, k, m]
                    c = Vp[i + 1, j, k, m]
                    d = Vp[i + 2, j, k, m]
                    d2m = a - 2.0 * b + v0
                    d2c = b - 2.0 * v0 + c
                    d2p = v0 - 2.0 * c + d
                    pxm = (v0 - b + 0.5 * _mm(d2m, d2c)) / hx
                    pxp = (c - v0 - 0.5 * _mm(d2p, d2c)) / hx

                    a = Vp[i, j - 2, k, m]
                    b = Vp[i, j - 1, k, m]
                    c = Vp[i, j + 1, k, m]
                    d = Vp[i, j + 2, k, m]
                    d2m = a - 2.0 * b + v0
                    d2c = b - 2.0 * v0 + c
                    d2p = v0 - 2.0 * c + d
                    pym = (v0 - b + 0.5 * _mm(d2m, d2c)) / hy
                    pyp = (c - v0 - 0.5 * _mm(d2p, d2c)) / hy

                    a = Vp[i, j, k - 2, m]
                    b = Vp[i, j, k - 1, m]
                    c = Vp[i, j, k + 1, m]
                    d = Vp[i, j, k + 2, m]
                    d2m = a - 2.0 * b + v0
                    d2c = b - 2.0 * v0 + c
                    d2p = v0 - 2.0 * c + d
                    ptm = (v0 - b + 0.5 * _mm(d2m, d2c)) / hth
                    ptp = (c - v0 - 0.5 * _mm(d2p, d2c)) / hth

                    a = Vp[i, j, k, m - 2]
                    b = Vp[i, j, k, m - 1]
                    c = Vp[i, j, k, m + 1]
                    d = Vp[i, j, k, m + 2]
                    d2m = a - 2.0 * b + v0
                    d2c = b - 2.0 * v0 + c
                    d2p = v0 - 2.0 * c + d
                    pvm = (v0 - b + 0.5 * _mm(d2m, d2c)) / hv
                    pvp = (c - v0 - 0.5 * _mm(d2p, d2c)) / hv

                    fx = ax[k - 2, m - 2]
                    fy = ay[k - 2, m - 2]
                    pxc = 0.5 * (pxm + pxp)
                    pyc = 0.5 * (pym + pyp)
                    ptc = 0.5 * (ptm + ptp)
                    pvc = 0.5 * (pvm + pvp)
                    ham = fx * pxc + fy * pyc
                    ham += (u1hi * ptc) if ptc > 0.0 else (u1lo * ptc)
                    ham += (u2hi * pvc) if pvc > 0.0 else (u2lo * pvc)
                    diss = 0.5 * (abs(fx) * (pxp - pxm) + abs(fy) * (pyp - pym)
                                  + alth * (ptp - ptm) + alv * (pvp - pvm))
                    out[i - 2, j - 2, k - 2, m - 2] = v0 - dt * (ham - diss)


def _active_box(V: np.ndarray, band: float, margin: int) -> tuple:
    """Per-axis index ranges covering {V < band} plus a safety margin.

    Ranges are half-open and clipped to the grid; an axis whose sub-band
    set is empty (or spans everything) keeps its full range.
    """
    mask = V < band
    box = []
    for d in range(4):
        other = tuple(a for a in range(4) if a != d)
        hit = np.nonzero(mask.any(axis=other))[0]
        if hit.size == 0:
            box.append((0, V.shape[d]))
            continue
        lo = max(int(hit[0]) - margin, 0)
        hi = min(int(hit[-1]) + 1 + margin, V.shape[d])
        box.append((lo, hi))
    return tuple(box)


def _gather_padded(V: np.ndarray, box: tuple) -> np.ndarray:
    """Box values plus two ghost layers per side, gathered from V.

    Ghost indices wrap on the periodic theta axis and replicate the edge
    value elsewhere (zero-gradient closure); ghosts of a box interior to
    the grid simply read the neighboring frozen values.
    """
    idx = []
    for d, (lo, hi) in enumerate(box):
        r = np.arange(lo - 2, hi + 2)
        if PERIODIC[d]:
            r = np.mod(r, V.shape[d])
        else:
            r = np.clip(r, 0, V.shape[d] - 1)
        idx.append(r)
    return V[np.ix_(*idx)]


@dataclass
class ValueFunction:
    """Solved tube value function plus everything needed to reuse it."""

    grid: GridSpec
    horizon: float
    v_start: float
    endpoints: ControlBoundsEndpoints
    eps: tuple
    values: np.ndarray  # (nx, ny, ntheta, nv) float32, V at t + horizon
    l_values: np.ndarray  # initial condition l(x)
    snapshot_times: np.ndarray | None = None
    snapshots: list | None = None  # list of arrays matching snapshot_times

    def key(self) -> tuple:
        return (float(self.v_start),) + tuple(
            float(c) for c in self.endpoints.as_tuple()
        )

    def interpolate(self, states, which: np.ndarray | None = None) -> np.ndarray:
        """Multilinear interpolation of V at query states (N, 4) or (4,).

        `which` selects a snapshot array instead of the final values.
        Position and speed queries are clamped to the grid hull; heading
        wraps periodically.
        """
        arr = self.values if which is None else which
        q = np.atleast_2d(np.asarray(states, dtype=float))
        out = np.zeros(q.shape[0], dtype=float)
        idx = []
        frac = []
        for d in range(4):
            nodes = self.grid.nodes(d)
            h = self.grid.spacing(d)
            n = self.grid.shape[d]
            if PERIODIC[d]:
                rel = np.mod(q[:, d] - nodes[0], 2.0 * math.pi) / h
                i0 = np.floor(rel).astype(np.int64)
                f = rel - i0
                i0 = np.mod(i0, n)
                i1 = np.mod(i0 + 1, n)
            else:
                rel = np.clip((q[:, d] - nodes[0]) / h, 0.0, n - 1 - 1e-12)
                i0 = np.floor(rel).astype(np.int64)
                f = rel - i0
                i1 = i0 + 1
            idx.append((i0, i1))
            frac.append(f)
        for corner in range(16):
            w = np.ones(q.shape[0], dtype=float)
            sel = []
            for d in range(4):
                hi_side = (corner >> d) & 1
                sel.append(idx[d][hi_side])
                w = w * (frac[d] if hi_side else 1.0 - frac[d])
            out += w * arr[sel[0], sel[1], sel[2], sel[3]].astype(float)
        return out if np.ndim(states) > 1 else float(out[0])


def _derive_alphas(grid: GridSpec, ep: ControlBoundsEndpoints) -> tuple:
    v_abs = max(abs(grid.lo[3]), abs(grid.hi[3]))
    u1_abs = max(abs(ep.u_min_start[0]), abs(ep.u_max_start[0]),
                 abs(ep.u_min_end[0]), abs(ep.u_max_end[0]))
    u2_abs = max(abs(ep.u_min_start[1]), abs(ep.u_max_start[1]),
                 abs(ep.u_min_end[1]), abs(ep.u_max_end[1]))
    return (v_abs, v_abs, u1_abs, u2_abs)


def cfl_time_step(grid: GridSpec, alphas) -> float:
    """Largest stable dtau for the given dissipation coefficients.

    The explicit scheme is monotone (and hence stable, satisfying a
    discrete max principle) iff the pointwise Courant sum stays below 1.
    The x and y wave speeds are |v cos(theta)| and |v sin(theta)|, which
    never peak together: for any theta,

        |cos|/hx + |sin|/hy <= hypot(1/hx, 1/hy),

    so the two position axes contribute a combined hypot term instead of
    two independent maxima. CFL_NUMBER leaves headroom below the bound.
    """
    denom = math.hypot(alphas[0] / grid.spacing(0), alphas[1] / grid.spacing(1))
    denom += alphas[2] / grid.spacing(2) + alphas[3] / grid.spacing(3)
    if denom <= 0.0:
        return math.inf
    return CFL_NUMBER / denom


def _validate_endpoints(ep: ControlBoundsEndpoints):
    vals = ep.as_tuple()
    if not all(math.isfinite(c) for c in vals):
        raise ValueError(f"non-finite control bounds {vals}")
    for i in range(2):
        if ep.u_min_start[i] > ep.u_max_start[i] + 1e-12:
            raise ValueError("start bounds inverted")
        if ep.u_min_end[i] > ep.u_max_end[i] + 1e-12:
            raise ValueError("end bounds inverted")


def solve_frt(v_start: float, ep: ControlBoundsEndpoints,
              grid: GridSpec = DEFAULT_GRID, horizon: float = DEFAULT_HORIZON,
              *, dtau: float | None = None, eps=DEFAULT_EPS,
              snapshot_dt: float | None = None, alphas=None,
              check_boundary: bool = True,
              narrowband: bool = True) -> ValueFunction:
    """Solve the forward reachable tube over [0, horizon].

    Control bounds at elapsed time tau are interpolated between the
    endpoint pairs. Returns the value function at the end of the horizon,
    with optional intermediate snapshots every `snapshot_dt` seconds.

    With `narrowband` on (the default) each step only updates the bounding
    box of the near-tube region {V < band}; the far field keeps its frozen
    values, which over-approximate the true value function, so the tube
    itself is unaffected while large grids solve many times faster.
    """
    if horizon <= 0.0:
        raise ConfigurationError(f"horizon must be positive, got {horizon}")
    _validate_endpoints(ep)
    l = initial_value(grid, v_start, eps)

    if alphas is None:
        alphas = _derive_alphas(grid, ep)
    alphas = tuple(float(a) for a in alphas)
    derived = _derive_alphas(grid, ep)
    if any(alphas[d] < derived[d] - 1e-12 for d in range(4)):
        raise ConfigurationError(
            f"dissipation alphas {alphas} below the required bounds {derived}"
        )
    if dtau is not None:
        dtau_max = cfl_time_step(grid, alphas)
        if dtau <= 0.0:
            raise ConfigurationError(f"dtau must be positive, got {dtau}")
        if dtau > dtau_max + 1e-12:
            raise CFLViolationError(
                f"dtau={dtau:.6g} exceeds the CFL bound {dtau_max:.6g} "
                f"for alphas {alphas}"
            )
        n_steps = round(horizon / dtau)
        if n_steps < 1 or abs(n_steps * dtau - horizon) > 1e-9:
            raise ConfigurationError(
                f"dtau={dtau} does not divide the horizon {horizon}"
            )

    hx, hy, hth, hv = (np.float32(h) for h in grid.spacings())
    ths = grid.nodes(2)
    vs = grid.nodes(3)
    ax64 = vs[None, :] * np.cos(ths)[:, None]
    ay64 = vs[None, :] * np.sin(ths)[:, None]
    ax = ax64.astype(np.float32)
    ay = ay64.astype(np.float32)
    alth, alv = np.float32(alphas[2]), np.float32(alphas[3])
    # pointwise Courant density of the position axes, used to size
    # adaptive steps from the speeds actually present in the active box
    courant_xy = np.abs(ax64) / grid.spacing(0) + np.abs(ay64) / grid.spacing(1)
    courant_thv = alphas[2] / grid.spacing(2) + alphas[3] / grid.spacing(3)

    snap_times = []
    snaps = []
    next_snap = None
    if snapshot_dt is not None:
        if snapshot_dt <= 0.0:
            raise ConfigurationError("snapshot_dt must be positive")
        snap_times.append(0.0)
        snaps.append(l.copy())
        next_snap = snapshot_dt

    V = l.copy()
    full_box = tuple((0, n) for n in grid.shape)
    band = BAND_SPACINGS * max(grid.spacings())
    box = _active_box(V, band, BOX_MARGIN) if narrowband else full_box
    ft = np.float32
    tau = 0.0
    n = 0
    while tau < horizon - 1e-12:
        if narrowband and n > 0 and n % BOX_REBUILD == 0:
            box = _active_box(V, band, BOX_MARGIN)
        sl = tuple(slice(lo, hi) for lo, hi in box)
        bshape = tuple(hi - lo for lo, hi in box)
        ax_b = ax[sl[2], sl[3]]
        ay_b = ay[sl[2], sl[3]]
        if dtau is not None:
            step = dtau
            tau_next = (n + 1) * dtau
        else:
            denom = float(courant_xy[sl[2], sl[3]].max()) + courant_thv
            if denom <= 0.0:
                step = horizon - tau
            else:
                step = min(CFL_NUMBER / denom, horizon - tau)
            if next_snap is not None:
                step = min(step, next_snap - tau)  # land snapshots exactly
            tau_next = tau + step
        lo0, hi0 = interp_bounds(ep, tau, horizon)
        lo1, hi1 = interp_bounds(ep, min(tau_next, horizon), horizon)
        Vp = _gather_padded(V, box)
        e1 = np.empty(bshape, dtype=np.float32)
        e2 = np.empty(bshape, dtype=np.float32)
        _euler_step(Vp, e1, ax_b, ay_b, hx, hy, hth, hv,
                    ft(lo0[0]), ft(hi0[0]), ft(lo0[1]), ft(hi0[1]),
                    alth, alv, ft(step))
        Vp[2:-2, 2:-2, 2:-2, 2:-2] = e1
        _euler_step(Vp, e2, ax_b, ay_b, hx, hy, hth, hv,
                    ft(lo1[0]), ft(hi1[0]), ft(lo1[1]), ft(hi1[1]),
                    alth, alv, ft(step))
        # Heun average of the two stages, then keep the running min
        # against both l and the previous step so the iterate stays a tube.
        Vb = V[sl]
        np.add(Vb, e2, out=e1)
        e1 *= ft(0.5)
        np.minimum(e1, l[sl], out=e1)
        np.minimum(e1, Vb, out=e1)
        Vb[...] = e1
        if np.isnan(np.min(e1)):
            raise NumericalFailureError(
                f"NaN in value function at step {n + 1} (tau={tau_next:.4f} s)"
            )
        if next_snap is not None and tau_next >= next_snap - 1e-9:
            if tau_next < horizon - 1e-9:  # the final array is stored below
                snap_times.append(tau_next)
                snaps.append(V.copy())
            next_snap += snapshot_dt
        n += 1
        tau = tau_next

    if snapshot_dt is not None:
        snap_times.append(horizon)
        snaps.append(V.copy())

    vf = ValueFunction(
        grid=grid, horizon=float(horizon), v_start=float(v_start),
        endpoints=ep, eps=tuple(float(e) for e in eps), values=V, l_values=l,
        snapshot_times=np.array(snap_times) if snaps else None,
        snapshots=snaps if snaps else None,
    )
    if check_boundary:
        touched = boundary_contact_axes(vf)
        if touched:
            raise DomainTooSmallError(touched)
    return vf


def boundary_contact_axes(vf: ValueFunction, threshold: float = 0.0) -> tuple:
    """Non-periodic axes whose boundary slabs contain sub-threshold values."""
    V = vf.values
    touched = []
    slabs = {
        "x": (V[0], V[-1]),
        "y": (V[:, 0], V[:, -1]),
        "v": (V[..., 0], V[..., -1]),
    }
    for name, (a, b) in slabs.items():
        if (a < threshold).any() or (b < threshold).any():
            touched.append(name)
    return tuple(touched)


def frt_set(vf: ValueFunction, threshold: float = 0.0) -> np.ndarray:
    """Boolean tube membership mask {V < threshold}; threshold >= 0 only."""
    if threshold < 0.0:
        raise ValueError(
            f"threshold must be >= 0 (conservative inflation only), got {threshold}"
        )
    return vf.values < threshold


def project_positions(mask: np.ndarray) -> np.ndarray:
    """Project a 4-D tube mask onto the (x, y) plane by OR over theta, v."""
    if mask.ndim != 4:
        raise ValueError(f"expected a 4-D mask, got {mask.ndim}-D")
    return mask.any(axis=(2, 3))


# ---------------------------------------------------------------------------
# Serialization

def save_value_function(vf: ValueFunction, path, include_snapshots=False):
    """Write magic + JSON header + little-endian float32 payload (x-major)."""
    header = {
        "grid": vf.grid.to_dict(),
        "horizon": vf.horizon,
        "v_start": vf.v_start,
        "endpoints": list(vf.endpoints.as_tuple()),
        "eps": list(vf.eps),
        "shape": list(vf.values.shape),
        "dtype": "<f4",
        "snapshot_times": (
            [float(t) for t in vf.snapshot_times]
            if include_snapshots and vf.snapshot_times is not None
            else None
        ),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(len(blob).to_bytes(4, "little"))
        f.write(blob)
        f.write(np.ascontiguousarray(vf.values, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(vf.l_values, dtype="<f4").tobytes())
        if header["snapshot_times"] is not None:
            for s in vf.snapshots:
                f.write(np.ascontiguousarray(s, dtype="<f4").tobytes())


def load_value_function(path) -> ValueFunction:
    with open(path, "rb") as f:
        magic = f.read(len(_MAGIC))
        if magic != _MAGIC:
            raise ConfigurationError(f"{path}: not a value-function file")
        n = int.from_bytes(f.read(4), "little")
        header = json.loads(f.read(n).decode("utf-8"))
        shape = tuple(header["shape"])
        count = int(np.prod(shape))
        values = np.frombuffer(f.read(4 * count), dtype="<f4").reshape(shape).copy()
        l_values = np.frombuffer(f.read(4 * count), dtype="<f4").reshape(shape).copy()
        snaps = None
        times = None
        if header.get("snapshot_times"):
            times = np.array(header["snapshot_times"], dtype=float)
            snaps = [
                np.frombuffer(f.read(4 * count), dtype="<f4").reshape(shape).copy()
                for _ in times
            ]
    ep_vals = header["endpoints"]
    ep = ControlBoundsEndpoints(
        u_min_start=tuple(ep_vals[0:2]), u_max_start=tuple(ep_vals[2:4]),
        u_min_end=tuple(ep_vals[4:6]), u_max_end=tuple(ep_vals[6:8]),
    )
    return ValueFunction(
        grid=GridSpec.from_dict(header["grid"]), horizon=header["horizon"],
        v_start=header["v_start"], endpoints=ep, eps=tuple(header["eps"]),
        values=values, l_values=l_values, snapshot_times=times, snapshots=snaps,
    )


def export_slice_csv(vf: ValueFunction, path, theta_index: int, v_index: int):
    """CSV of the V[:, :, theta_index, v_index] slice, x down the rows."""
    V = vf.values[:, :, theta_index, v_index]
    with open(path, "w") as f:
        f.write(f"# value slice theta_index={theta_index} v_index={v_index}\n")
        f.write(f"# x {vf.grid.lo[0]} {vf.grid.hi[0]} {vf.grid.shape[0]}\n")
        f.write(f"# y {vf.grid.lo[1]} {vf.grid.hi[1]} {vf.grid.shape[1]}\n")
        for row in V:
            f.write(",".join(f"{float(c):.9g}" for c in row) + "\n")


def load_slice_csv(path) -> np.ndarray:
    rows = []
    with open(path) as f:
        for line in f:
            if line.startswith("#") or not line.strip():
                continue
            rows.append([float(c) for c in line.strip().split(",")])
    return np.array(rows, dtype=np.float32)


def export_mask_csv(mask: np.ndarray, path, grid: GridSpec | None = None):
    """CSV of a 2-D boolean mask as 0/1 ints, x down the rows."""
    if mask.ndim != 2:
        raise ValueError("mask must be 2-D")
    with open(path, "w") as f:
        if grid is not None:
            f.write(f"# x {grid.lo[0]} {grid.hi[0]} {grid.shape[0]}\n")
            f.write(f"# y {grid.lo[1]} {grid.hi[1]} {grid.shape[1]}\n")
        for row in mask.astype(int):
            f.write(",".join(str(int(c)) for c in row) + "\n")


def load_mask_csv(path) -> np.ndarray:
    rows = []
    with open(path) as f:
        for line in f:
            if line.startswith("#") or not line.strip():
                continue
            rows.append([int(c) for c in line.strip().split(",")])
    return np.array(rows, dtype=bool)


# ---------------------------------------------------------------------------
# Parameter-conditioned tube families

KEY_FIELDS = (
    "v_start",
    "u1_min_start", "u2_min_start", "u1_max_start", "u2_max_start",
    "u1_min_end", "u2_min_end", "u1_max_end", "u2_max_end",
)
_MIN_FIELDS = {"u1_min_start", "u2_min_start", "u1_min_end", "u2_min_end"}


def endpoints_from_key(key) -> tuple:
    """Split a 9-tuple key into (v_start, ControlBoundsEndpoints)."""
    v_start = float(key[0])
    b = [float(c) for c in key[1:]]
    ep = ControlBoundsEndpoints(
        u_min_start=(b[0], b[1]), u_max_start=(b[2], b[3]),
        u_min_end=(b[4], b[5]), u_max_end=(b[6], b[7]),
    )
    return v_start, ep


def _round_key(values) -> tuple:
    return tuple(round(float(c), 9) for c in values)


def entry_filename(key) -> str:
    """Deterministic file name for one family entry."""
    digest = hashlib.sha1(repr(_round_key(key)).encode()).hexdigest()[:16]
    return f"frt_{digest}.frt"


def write_family_manifest(directory, grid: GridSpec, horizon: float, eps,
                          alphas, knots, keys) -> str:
    """Write the family manifest mapping each key to its entry file."""
    manifest = {
        "grid": grid.to_dict(),
        "horizon": float(horizon),
        "eps": list(eps),
        "alphas": list(alphas),
        "knots": {k: [float(c) for c in v] for k, v in knots.items()},
        "entries": {json.dumps(_round_key(k)): entry_filename(k) for k in keys},
    }
    mpath = os.path.join(directory, "manifest.json")
    with open(mpath, "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    return mpath


@dataclass
class FRTFamily:
    """Tube solves on a lattice of (v_start, bound-endpoint) keys.

    Off-lattice queries snap conservatively: each lower bound snaps down,
    each upper bound snaps up, and v_start takes the pointwise minimum of
    the two bracketing entries (their initial sets jointly cover the
    queried one when the v knots are no farther apart than 2 * eps2).
    All entries share one dissipation-alpha set so entry tubes are
    comparable cell by cell.
    """

    grid: GridSpec
    horizon: float
    eps: tuple
    knots: dict  # KEY_FIELDS name -> sorted 1-D float array
    alphas: tuple = ()
    entries: dict = field(default_factory=dict)  # rounded key -> float32 array

    def __post_init__(self):
        for name in KEY_FIELDS:
            if name not in self.knots:
                raise ConfigurationError(f"lattice is missing knots for {name}")
            arr = np.asarray(self.knots[name], dtype=float)
            if arr.ndim != 1 or arr.size < 1:
                raise ConfigurationError(f"knots for {name} must be a 1-D list")
            if np.any(np.diff(arr) <= 0):
                raise ConfigurationError(f"knots for {name} must be increasing")
            self.knots[name] = arr
        v_knots = self.knots["v_start"]
        if v_knots.size > 1:
            max_gap = float(np.max(np.diff(v_knots)))
            if max_gap > 2.0 * self.eps[1] + 1e-12:
                raise ConfigurationError(
                    f"v_start knot gap {max_gap} exceeds 2*eps2={2 * self.eps[1]}; "
                    "bracketing entries would not cover intermediate starts"
                )
        if not self.alphas:
            u1 = max(abs(float(self.knots[f][i])) for f in KEY_FIELDS[1:]
                     if "u1" in f for i in range(self.knots[f].size))
            u2 = max(abs(float(self.knots[f][i])) for f in KEY_FIELDS[1:]
                     if "u2" in f for i in range(self.knots[f].size))
            v_abs = max(abs(self.grid.lo[3]), abs(self.grid.hi[3]))
            self.alphas = (v_abs, v_abs, u1, u2)
        # every entry is solved on one shared time schedule so that masks
        # of different keys nest cleanly when compared cell by cell
        bound = cfl_time_step(self.grid, self.alphas)
        self.dtau = self.horizon / max(1, math.ceil(self.horizon / bound - 1e-12))

    def lattice_keys(self):
        axes = [self.knots[name] for name in KEY_FIELDS]
        for combo in itertools.product(*axes):
            v_start, ep = endpoints_from_key(combo)
            lo_s, hi_s = ep.u_min_start, ep.u_max_start
            lo_e, hi_e = ep.u_min_end, ep.u_max_end
            if any(lo_s[i] > hi_s[i] or lo_e[i] > hi_e[i] for i in range(2)):
                continue  # inverted boxes are not valid bound configurations
            yield _round_key(combo)

    def precompute(self, keys=None, progress=None):
        """Solve every lattice key (or the given subset), skipping existing."""
        todo = list(keys) if keys is not None else list(self.lattice_keys())
        for key in todo:
            key = _round_key(key)
            if key in self.entries:
                continue
            v_start, ep = endpoints_from_key(key)
            vf = solve_frt(v_start, ep, self.grid, self.horizon,
                           eps=self.eps, alphas=self.alphas, dtau=self.dtau)
            self.entries[key] = vf.values
            if progress is not None:
                progress(key)
        return self

    def _snap(self, name: str, value: float) -> float:
        """Round a bound to a knot on its conservative side.

        Lower bounds round down, upper bounds round up, so the snapped
        box always contains the queried one. Refuses only when no knot
        sits on the conservative side of the query.
        """
        knots = self.knots[name]
        if name in _MIN_FIELDS:
            i = int(np.searchsorted(knots, value + 1e-9, side="right")) - 1
            if i < 0:
                raise OutOfRangeError(
                    f"{name}={value} below the smallest lattice knot {knots[0]}"
                )
        else:
            i = int(np.searchsorted(knots, value - 1e-9, side="left"))
            if i >= knots.size:
                raise OutOfRangeError(
                    f"{name}={value} above the largest lattice knot {knots[-1]}"
                )
        return float(knots[i])

    def _bracket_v(self, v_start: float) -> tuple:
        knots = self.knots["v_start"]
        if v_start < knots[0] - 1e-9 or v_start > knots[-1] + 1e-9:
            raise OutOfRangeError(
                f"v_start={v_start} outside lattice range [{knots[0]}, {knots[-1]}]"
            )
        hi = int(np.searchsorted(knots, v_start, side="left"))
        hi = min(hi, knots.size - 1)
        lo = hi if abs(knots[hi] - v_start) < 1e-9 else max(hi - 1, 0)
        return float(knots[lo]), float(knots[hi])

    def query(self, v_start: float, ep: ControlBoundsEndpoints) -> ValueFunction:
        """Conservative tube for an off-lattice key; superset by construction."""
        flat = (ep.u_min_start + ep.u_max_start + ep.u_min_end + ep.u_max_end)
        snapped = [self._snap(name, val) for name, val in zip(KEY_FIELDS[1:], flat)]
        v_lo, v_hi = self._bracket_v(v_start)
        vals = None
        v_knots = (v_lo,) if v_lo == v_hi else (v_lo, v_hi)
        for v_knot in v_knots:
            key = _round_key((v_knot, *snapped))
            if key not in self.entries:
                raise OutOfRangeError(f"lattice entry {key} was not precomputed")
            arr = self.entries[key]
            vals = arr.copy() if vals is None else np.minimum(vals, arr)
        _, snapped_ep = endpoints_from_key((v_start, *snapped))
        return ValueFunction(
            grid=self.grid, horizon=self.horizon, v_start=v_start,
            endpoints=snapped_ep, eps=self.eps, values=vals,
            l_values=initial_value(self.grid, v_start, self.eps),
        )

    # -- persistence --------------------------------------------------------

    def save(self, directory):
        """Write one .frt file per entry plus a manifest; resumable."""
        os.makedirs(directory, exist_ok=True)
        for key, values in sorted(self.entries.items()):
            fpath = os.path.join(directory, entry_filename(key))
            if os.path.exists(fpath):
                continue
            v_start, ep = endpoints_from_key(key)
            vf = ValueFunction(
                grid=self.grid, horizon=self.horizon, v_start=v_start,
                endpoints=ep, eps=self.eps, values=values,
                l_values=initial_value(self.grid, v_start, self.eps),
            )
            save_value_function(vf, fpath)
        return write_family_manifest(directory, self.grid, self.horizon,
                                     self.eps, self.alphas, self.knots,
                                     sorted(self.entries))

    @classmethod
    def load(cls, directory) -> "FRTFamily":
        with open(os.path.join(directory, "manifest.json")) as f:
            manifest = json.load(f)
        fam = cls(
            grid=GridSpec.from_dict(manifest["grid"]),
            horizon=manifest["horizon"],
            eps=tuple(manifest["eps"]),
            knots={k: np.array(v, dtype=float) for k, v in manifest["knots"].items()},
            alphas=tuple(manifest["alphas"]),
        )
        for key_json, name in manifest["entries"].items():
            key = _round_key(tuple(json.loads(key_json)))
            vf = load_value_function(os.path.join(directory, name))
            fam.entries[key] = vf.values
        return fam


# ---------------------------------------------------------------------------
# Solve cache for the simulator: quantize conservatively, reuse, spill to disk.

CACHE_DIR_ENV = "REACHGUARD_CACHE_DIR"


def quantize_key(v_start: float, ep: ControlBoundsEndpoints,
                 q_v: float = 0.25, q_u1: float = 0.05, q_u2: float = 0.1):
    """Snap a solve key onto a coarse lattice without losing containment.

    v_start rounds to the nearest q_v (the initial set's eps2 margin must
    exceed q_v / 2); lower bounds floor and upper bounds ceil onto the
    control quantum, so the solved tube can only widen.
    """
    v_q = round(v_start / q_v) * q_v
    qs = (q_u1, q_u2)

    def lo(vals):
        # the 1e-9 nudge keeps exact lattice values put despite float noise
        return tuple(math.floor(v / qs[i] + 1e-9) * qs[i] for i, v in enumerate(vals))

    def hi(vals):
        return tuple(math.ceil(v / qs[i] - 1e-9) * qs[i] for i, v in enumerate(vals))

    ep_q = ControlBoundsEndpoints(
        u_min_start=lo(ep.u_min_start), u_max_start=hi(ep.u_max_start),
        u_min_end=lo(ep.u_min_end), u_max_end=hi(ep.u_max_end),
    )
    return _round_key((v_q,) + ep_q.as_tuple())


class SolveCache:
    """LRU cache of quantized tube solves, optionally mirrored on disk."""

    def __init__(self, grid: GridSpec, horizon: float, eps=DEFAULT_EPS,
                 maxsize: int = 32, q_v: float = 0.25, q_u1: float = 0.05,
                 q_u2: float = 0.1, cache_dir: str | None = None):
        self.grid = grid
        self.horizon = horizon
        self.eps = tuple(eps)
        self.maxsize = maxsize
        self.quanta = (q_v, q_u1, q_u2)
        self._store: OrderedDict = OrderedDict()
        if cache_dir is None:
            cache_dir = os.environ.get(CACHE_DIR_ENV) or None
        self.cache_dir = cache_dir
        self.hits = 0
        self.misses = 0

    def _disk_path(self, key) -> str | None:
        if not self.cache_dir:
            return None
        ident = json.dumps(
            [self.grid.to_dict(), self.horizon, list(self.eps), list(key)],
            sort_keys=True,
        )
        h = hashlib.sha1(ident.encode()).hexdigest()[:24]
        return os.path.join(self.cache_dir, f"solve_{h}.frt")

    def get_or_solve(self, v_start: float, ep: ControlBoundsEndpoints) -> ValueFunction:
        key = quantize_key(v_start, ep, *self.quanta)
        if key in self._store:
            self.hits += 1
            self._store.move_to_end(key)
            return self._store[key]
        path = self._disk_path(key)
        if path and os.path.exists(path):
            vf = load_value_function(path)
            self.hits += 1
        else:
            self.misses += 1
            v_q, ep_q = endpoints_from_key(key)
            vf = solve_frt(v_q, ep_q, self.grid, self.horizon, eps=self.eps)
            if path:
                os.makedirs(self.cache_dir, exist_ok=True)
                save_value_function(vf, path)
        self._store[key] = vf
        if len(self._store) > self.maxsize:
            self._store.popitem(last=False)
        return vf
