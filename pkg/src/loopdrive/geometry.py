"""Geometric and kinematic primitives.

Frames
------
World frame: x/y in meters, heading ``psi`` counter-clockwise from +x.

Ego frame for *actions*: ``dy`` is the forward displacement and ``dx`` the
lateral displacement with **positive to the right**. Lower lateral anchor
indices therefore mean "more to the left", which is what the probability
partitions in :mod:`loopdrive.rl` rely on.

For *features* we use the usual (forward, left) frame from
:func:`world_to_ego`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np

from . import kernels
from .errors import DegenerateAction, EmptyPolyline, InvalidGrid

TWO_PI = 2.0 * math.pi


def wrap_angle(a: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    r = math.remainder(a, TWO_PI)
    if r == -math.pi:
        return math.pi
    return r


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    psi: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y) and math.isfinite(self.psi)):
            raise ValueError(f"non-finite pose {self}")
        object.__setattr__(self, "psi", wrap_angle(float(self.psi)))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.psi])


@dataclass(frozen=True)
class Control:
    v: float
    delta: float


@dataclass(frozen=True)
class KinematicConfig:
    wheelbase: float = 2.8
    dt: float = 0.1
    horizon: float = 0.5
    # wide enough that every grid chord is reachable without clamping
    delta_max: float = 1.5

    def __post_init__(self):
        if self.dt <= 0 or self.wheelbase <= 0 or self.delta_max <= 0:
            raise ValueError("dt, wheelbase and delta_max must be positive")
        n = self.horizon / self.dt
        if abs(n - round(n)) > 1e-9 or round(n) < 2:
            raise ValueError("horizon must be an integer multiple (>= 2) of dt")

    @property
    def n_ticks(self) -> int:
        return int(round(self.horizon / self.dt))


@dataclass(frozen=True)
class AnchorGrid:
    lateral: np.ndarray
    longitudinal: np.ndarray

    @property
    def n_x(self) -> int:
        return len(self.lateral)

    @property
    def n_y(self) -> int:
        return len(self.longitudinal)

    @property
    def dx_min(self) -> float:
        return float(self.lateral[0])

    @property
    def dx_max(self) -> float:
        return float(self.lateral[-1])

    @property
    def dy_max(self) -> float:
        return float(self.longitudinal[-1])

    def anchor(self, i: int, j: int) -> tuple[float, float]:
        return float(self.lateral[i]), float(self.longitudinal[j])


@dataclass(frozen=True)
class OrientedBox:
    center: Pose
    length: float
    width: float

    def __post_init__(self):
        if self.length <= 0 or self.width <= 0:
            raise ValueError("box dimensions must be positive")

    def as_array(self) -> np.ndarray:
        return np.array([self.center.x, self.center.y, self.center.psi, self.length, self.width])

    def corners(self) -> np.ndarray:
        c, s = math.cos(self.center.psi), math.sin(self.center.psi)
        hl, hw = 0.5 * self.length, 0.5 * self.width
        local = np.array([[hl, hw], [hl, -hw], [-hl, -hw], [-hl, hw]])
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.array([self.center.x, self.center.y])


# ---------------------------------------------------------------------------
# kinematics
# ---------------------------------------------------------------------------


def bicycle_step(pose: Pose, ctrl: Control, cfg: KinematicConfig, dt: Optional[float] = None) -> Pose:
    """One explicit Euler step of the kinematic bicycle model."""
    dt = cfg.dt if dt is None else dt
    x = pose.x + ctrl.v * math.cos(pose.psi) * dt
    y = pose.y + ctrl.v * math.sin(pose.psi) * dt
    psi = pose.psi + (ctrl.v / cfg.wheelbase) * math.tan(ctrl.delta) * dt
    return Pose(x, y, psi)


def rollout(pose: Pose, ctrl: Control, cfg: KinematicConfig, n: Optional[int] = None) -> Pose:
    n = cfg.n_ticks if n is None else n
    for _ in range(n):
        pose = bicycle_step(pose, ctrl, cfg)
    return pose


def action_to_control(dx: float, dy: float, cfg: KinematicConfig) -> Control:
    """Invert a chord (``dx`` right, ``dy`` forward) over the horizon into (v, delta).

    Constant (v, delta) under the Euler update turns the heading by the same
    ``w`` every tick, so the n-step path is a polygon inscribed in a circle.
    Its endpoint sits at angle ``(n-1)*w/2`` and distance
    ``v*dt*sin(n*w/2)/sin(w/2)``; both relations are inverted exactly here,
    so iterating :func:`bicycle_step` lands on the chord (up to the steering
    clamp).
    """
    if dx == 0.0 and dy == 0.0:
        return Control(0.0, 0.0)
    if dy <= 0.0:
        raise DegenerateAction(f"chord ({dx}, {dy}) has no forward component")
    n = cfg.n_ticks
    dt = cfg.dt
    theta = math.atan2(-dx, dy)  # counter-clockwise chord angle
    w = 2.0 * theta / (n - 1)
    chord = math.hypot(dx, dy)
    if abs(w) < 1e-12:
        v = chord / (n * dt)
    else:
        v = chord * math.sin(0.5 * w) / (dt * math.sin(0.5 * n * w))
    delta = math.atan(w * cfg.wheelbase / (v * dt))
    delta = max(-cfg.delta_max, min(cfg.delta_max, delta))
    return Control(v, delta)


def control_to_action(ctrl: Control, cfg: KinematicConfig) -> tuple[float, float]:
    """Chord (dx right, dy forward) reached by holding ``ctrl`` over the horizon."""
    end = rollout(Pose(0.0, 0.0, 0.0), ctrl, cfg)
    return -end.y, end.x


def chord_arc_formula(dx: float, dy: float, cfg: KinematicConfig) -> Control:
    """Exact-arc inversion (continuous time); kept for comparison only.

    Holding the result over the horizon under *continuous* integration lands
    on the chord; the Euler update used by the environment does not.
    """
    if dx == 0.0 and dy == 0.0:
        return Control(0.0, 0.0)
    dpsi = 2.0 * math.atan2(-dx, dy)
    chord = math.hypot(dx, dy)
    arc = chord if dpsi == 0.0 else chord * (0.5 * dpsi) / math.sin(0.5 * dpsi)
    v = arc / cfg.horizon
    return Control(v, math.atan(dpsi * cfg.wheelbase / arc))


# ---------------------------------------------------------------------------
# anchor grid
# ---------------------------------------------------------------------------


def build_anchor_grid(
    n_x: int = 61,
    n_y: int = 61,
    dx_min: float = -0.75,
    dx_max: float = 0.75,
    dy_max: float = 15.0,
) -> AnchorGrid:
    if n_x < 3 or n_x % 2 == 0:
        raise InvalidGrid(f"n_x must be odd and >= 3, got {n_x}")
    if n_y < 2:
        raise InvalidGrid(f"n_y must be >= 2, got {n_y}")
    if not dx_min < 0.0 < dx_max:
        raise InvalidGrid("need dx_min < 0 < dx_max")
    if abs(dx_min + dx_max) > 1e-12:
        raise InvalidGrid("lateral range must be symmetric about 0")
    if dy_max <= 0:
        raise InvalidGrid("dy_max must be positive")
    lateral = np.linspace(dx_min, dx_max, n_x)
    lateral[n_x // 2] = 0.0
    longitudinal = np.linspace(0.0, dy_max, n_y)
    lateral.flags.writeable = False
    longitudinal.flags.writeable = False
    return AnchorGrid(lateral, longitudinal)


# ---------------------------------------------------------------------------
# collision and projection
# ---------------------------------------------------------------------------


def obb_overlap(a: OrientedBox, b: OrientedBox) -> bool:
    """Separating-axis test; touching edges count as overlap."""
    return kernels.obb_overlap(a.as_array(), b.as_array())


def polygon_overlaps_box(poly: np.ndarray, box: OrientedBox) -> bool:
    return kernels.polygon_box_overlap(poly, box.as_array())


class Projection(NamedTuple):
    distance: float
    matched_heading: float
    side: Optional[str]  # "left" / "right" / None when exactly on the line
    arc_pos: float
    segment: int
    t: float


def _polyline_arrays(polyline) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(polyline, np.ndarray):
        arr = np.asarray(polyline, dtype=np.float64)
    else:
        arr = np.array([[p.x, p.y, p.psi] if isinstance(p, Pose) else p for p in polyline], dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 2:
        raise EmptyPolyline("polyline needs at least two vertices")
    return arr[:, :2], arr[:, 2]


def project_to_polyline(p: Sequence[float], polyline) -> Projection:
    """Closest point on a polyline of poses ``(x, y, psi)``.

    The heading is linearly interpolated along the matched segment. The side
    is the sign of ``segment_direction x (p - foot)``: positive is left.
    """
    pts, heads = _polyline_arrays(polyline)
    dist, heading, cross, arc, seg, t = kernels.project_polyline(p[0], p[1], pts, heads)
    side = None
    if cross > 0.0:
        side = "left"
    elif cross < 0.0:
        side = "right"
    return Projection(float(dist), float(heading), side, float(arc), int(seg), float(t))


def heading_error(psi: float, psi_ref: float) -> tuple[float, Optional[str]]:
    """Magnitude in [0, pi] and rotation sense of ``psi`` relative to ``psi_ref``."""
    d = wrap_angle(psi - psi_ref)
    if d < 0.0:
        return -d, "clockwise"
    if d > 0.0:
        return d, "counterclockwise"
    return 0.0, None


def world_to_ego(pose: Pose, pts: np.ndarray) -> np.ndarray:
    """Rotate/translate world points into the (forward, left) ego frame."""
    pts = np.asarray(pts, dtype=np.float64)
    c, s = math.cos(pose.psi), math.sin(pose.psi)
    d = pts[..., :2] - np.array([pose.x, pose.y])
    fwd = d[..., 0] * c + d[..., 1] * s
    left = -d[..., 0] * s + d[..., 1] * c
    return np.stack([fwd, left], axis=-1)
