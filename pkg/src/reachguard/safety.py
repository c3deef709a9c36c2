"""Collision geometry between the ego vehicle and predicted human tubes.

The tube solver works in the human's body frame; this module rasterizes
its (x, y) projection into a world-aligned occupancy grid, dilates that
grid by the collision radius (two-vehicle footprint as a disk), and offers
point-in-occupancy queries plus a one-dimensional braking planner for an
ego vehicle that follows its lane centerline.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .reachability import GridSpec

R_COL = 4.5  # m, center-to-center collision radius of the two vehicles
EGO_A_MAX = 10.0  # m/s^2, hardest allowed ego deceleration


@dataclass
class OccupancyGrid2D:
    """Axis-aligned square-cell occupancy grid in world coordinates.

    `origin` is the lower-left corner of cell (0, 0); `occupied[i, j]`
    covers [origin_x + i*cell, origin_x + (i+1)*cell) x [...j...).
    """

    origin: tuple  # (x, y) m
    cell: float  # m
    occupied: np.ndarray  # (nx, ny) bool

    def __post_init__(self):
        if self.cell <= 0.0:
            raise ValueError(f"cell size must be positive, got {self.cell}")
        self.occupied = np.asarray(self.occupied, dtype=bool)
        if self.occupied.ndim != 2:
            raise ValueError("occupancy array must be 2-D")

    @property
    def extent(self) -> tuple:
        nx, ny = self.occupied.shape
        ox, oy = self.origin
        return (ox, ox + nx * self.cell, oy, oy + ny * self.cell)

    def cell_of(self, x: float, y: float):
        i = math.floor((x - self.origin[0]) / self.cell)
        j = math.floor((y - self.origin[1]) / self.cell)
        return i, j

    def is_occupied(self, x: float, y: float) -> bool:
        """Occupancy at a world point; anywhere outside the grid is free."""
        i, j = self.cell_of(x, y)
        nx, ny = self.occupied.shape
        if 0 <= i < nx and 0 <= j < ny:
            return bool(self.occupied[i, j])
        return False

    def occupied_centers(self) -> np.ndarray:
        """World coordinates of occupied cell centers, (K, 2)."""
        ii, jj = np.nonzero(self.occupied)
        xs = self.origin[0] + (ii + 0.5) * self.cell
        ys = self.origin[1] + (jj + 0.5) * self.cell
        return np.stack([xs, ys], axis=1)

    def count(self) -> int:
        return int(self.occupied.sum())

    def area(self) -> float:
        return self.count() * self.cell * self.cell


def world_occupancy(mask: np.ndarray, grid: GridSpec, pose,
                    cell: float = 0.5) -> OccupancyGrid2D:
    """Rasterize a body-frame (x, y) tube mask into the world frame.

    `pose` is the human's (x, y, theta). Each occupied body cell maps its
    axis-aligned bounding box through the rotation, and every world cell
    that box overlaps is marked, so the world set never undercovers the
    rotated body set. The grid origin snaps to multiples of the cell size,
    making the result independent of traversal order.
    """
    if mask.ndim != 2:
        raise ValueError("expected the 2-D projected tube mask")
    xh, yh, th = (float(c) for c in pose)
    ii, jj = np.nonzero(mask)
    if ii.size == 0:
        return OccupancyGrid2D(origin=(math.floor(xh / cell) * cell,
                                       math.floor(yh / cell) * cell),
                               cell=cell, occupied=np.zeros((1, 1), dtype=bool))
    xs = grid.nodes(0)[ii]
    ys = grid.nodes(1)[jj]
    hx, hy = grid.spacing(0) / 2.0, grid.spacing(1) / 2.0
    # 4 corners per cell, (K, 4, 2) in the body frame
    offs = np.array([[-hx, -hy], [-hx, hy], [hx, -hy], [hx, hy]])
    corners = np.stack([xs, ys], axis=1)[:, None, :] + offs[None, :, :]
    c, s = math.cos(th), math.sin(th)
    rot = np.array([[c, -s], [s, c]])
    world = corners @ rot.T + np.array([xh, yh])
    lows = world.min(axis=1)
    highs = world.max(axis=1)

    ox = math.floor(lows[:, 0].min() / cell) * cell
    oy = math.floor(lows[:, 1].min() / cell) * cell
    tiny = 1e-9
    nx = int(math.ceil((highs[:, 0].max() - ox) / cell - tiny))
    ny = int(math.ceil((highs[:, 1].max() - oy) / cell - tiny))
    occ = np.zeros((max(nx, 1), max(ny, 1)), dtype=bool)
    i0 = np.floor((lows[:, 0] - ox) / cell + tiny).astype(int)
    j0 = np.floor((lows[:, 1] - oy) / cell + tiny).astype(int)
    i1 = np.ceil((highs[:, 0] - ox) / cell - tiny).astype(int) - 1
    j1 = np.ceil((highs[:, 1] - oy) / cell - tiny).astype(int) - 1
    i1 = np.maximum(i1, i0)
    j1 = np.maximum(j1, j0)
    for a0, a1, b0, b1 in zip(i0, i1, j0, j1):
        occ[a0:a1 + 1, b0:b1 + 1] = True
    return OccupancyGrid2D(origin=(ox, oy), cell=cell, occupied=occ)


def minkowski_dilate(occ: OccupancyGrid2D, radius: float) -> OccupancyGrid2D:
    """Dilate occupancy by a disk: mark every cell whose center lies within
    `radius` of an occupied cell center. The grid grows so nothing clips."""
    if radius < 0.0:
        raise ValueError(f"radius must be >= 0, got {radius}")
    if not occ.occupied.any() or radius == 0.0:
        return OccupancyGrid2D(origin=occ.origin, cell=occ.cell,
                               occupied=occ.occupied.copy())
    pad = int(math.ceil(radius / occ.cell)) + 1
    grown = np.pad(occ.occupied, pad)
    dist = ndimage.distance_transform_edt(~grown, sampling=occ.cell)
    return OccupancyGrid2D(
        origin=(occ.origin[0] - pad * occ.cell, occ.origin[1] - pad * occ.cell),
        cell=occ.cell,
        occupied=dist <= radius + 1e-9,
    )


def collision_check(occ: OccupancyGrid2D, points) -> int | None:
    """Index of the first point inside an occupied cell, else None."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    idx = np.floor((pts - np.asarray(occ.origin)) / occ.cell).astype(int)
    nx, ny = occ.occupied.shape
    inside = ((idx[:, 0] >= 0) & (idx[:, 0] < nx)
              & (idx[:, 1] >= 0) & (idx[:, 1] < ny))
    hits = np.zeros(pts.shape[0], dtype=bool)
    if inside.any():
        hits[inside] = occ.occupied[idx[inside, 0], idx[inside, 1]]
    if hits.any():
        return int(np.argmax(hits))
    return None


def path_samples(x_from: float, x_to: float, y: float = 0.0,
                 step: float = 0.25) -> np.ndarray:
    """Points along a lane centerline, inclusive of both ends, (N, 2)."""
    if x_to < x_from:
        x_from, x_to = x_to, x_from
    n = max(1, int(math.ceil((x_to - x_from) / step - 1e-9)))
    xs = np.linspace(x_from, x_to, n + 1)
    return np.stack([xs, np.full_like(xs, y)], axis=1)


@dataclass(frozen=True)
class PlanDecision:
    """Longitudinal command for one control period."""

    braking: bool
    accel: float  # m/s^2, 0 when cruising, negative when braking
    reason: str  # "clear", "brake-to-line", or "max-brake"


def plan_brake(v: float, dist_to_line: float, conflict: bool,
               a_max: float = EGO_A_MAX) -> PlanDecision:
    """Brake to stop before the conflict line when a conflict is flagged.

    With distance in hand the planner uses the gentlest constant
    deceleration that stops at the line, capped at a_max; with none left
    (or already past the line) it brakes as hard as allowed.
    """
    if a_max <= 0.0:
        raise ValueError(f"a_max must be positive, got {a_max}")
    if not conflict or v <= 0.0:
        return PlanDecision(braking=False, accel=0.0, reason="clear")
    if dist_to_line <= 0.0:
        return PlanDecision(braking=True, accel=-a_max, reason="max-brake")
    needed = v * v / (2.0 * dist_to_line)
    if needed <= a_max:
        return PlanDecision(braking=True, accel=-needed, reason="brake-to-line")
    return PlanDecision(braking=True, accel=-a_max, reason="max-brake")


def ego_advance(x: float, v: float, accel: float, dt: float) -> tuple:
    """Advance the lane-following ego one period; stops stay stopped.

    Closed form for constant acceleration, with the stop handled exactly:
    if the commanded deceleration would reverse the vehicle inside the
    period, it travels v^2 / (2|a|) and parks.
    """
    if v < 0.0:
        raise ValueError(f"ego speed must be >= 0, got {v}")
    if v == 0.0 and accel <= 0.0:
        return x, 0.0
    if accel < 0.0 and v + accel * dt < 0.0:
        return x + v * v / (2.0 * -accel), 0.0
    return x + v * dt + 0.5 * accel * dt * dt, max(0.0, v + accel * dt)
