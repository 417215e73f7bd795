"""Driving clips: data model, JSON I/O and a synthetic clip generator.

A clip is 8 s at 10 Hz (81 frames). The expert ego trajectory is produced
with the same Euler bicycle update the environment uses, so feeding the
expert's per-frame controls back through the environment reproduces it to
floating-point precision.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ParseError, SchemaError
from .geometry import Control, KinematicConfig, control_to_action, wrap_angle
from . import kernels

TEMPLATES = (
    "lead_vehicle_braking",
    "crossing_pedestrian",
    "static_detour",
    "dense_traffic_crawl",
    "unobstructed_cruise",
)

EGO_LENGTH = 4.6
EGO_WIDTH = 1.85


@dataclass(frozen=True, eq=False)
class AgentTrack:
    id: str
    length: float
    width: float
    states: dict  # frame index -> (x, y, psi, v)

    def state_at(self, frame: int):
        return self.states.get(frame)


@dataclass(frozen=True, eq=False)
class Scenario:
    id: str
    frame_rate: float
    duration: float
    expert_traj: np.ndarray  # (N, 5): t, x, y, psi, v
    agents: list = field(default_factory=list)
    static_obstacles: list = field(default_factory=list)  # list of (k, 2) arrays
    route: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))

    @property
    def n_frames(self) -> int:
        return int(round(self.duration * self.frame_rate)) + 1

    @property
    def last_frame(self) -> int:
        return self.n_frames - 1

    @property
    def dt(self) -> float:
        return 1.0 / self.frame_rate

    @cached_property
    def expert_polyline(self) -> np.ndarray:
        """(N, 3) array of expert x, y, psi."""
        return np.ascontiguousarray(self.expert_traj[:, 1:4])

    @cached_property
    def route_polyline(self) -> np.ndarray:
        """Route as (M, 3) with segment headings attached to vertices."""
        r = np.asarray(self.route, dtype=np.float64)
        d = np.diff(r, axis=0)
        h = np.arctan2(d[:, 1], d[:, 0])
        h = np.append(h, h[-1])
        return np.ascontiguousarray(np.column_stack([r, h]))

    @cached_property
    def route_cum(self) -> np.ndarray:
        """Cumulative arc length at each route waypoint."""
        seg = np.hypot(*np.diff(self.route, axis=0).T)
        return np.concatenate([[0.0], np.cumsum(seg)])

    @property
    def route_length(self) -> float:
        return float(self.route_cum[-1])

    @cached_property
    def obstacle_centroids(self) -> np.ndarray:
        if not self.static_obstacles:
            return np.zeros((0, 2))
        return np.array([np.mean(p, axis=0) for p in self.static_obstacles])

    @cached_property
    def _frames(self):
        out = []
        for f in range(self.n_frames):
            boxes, speeds, idx = [], [], []
            for k, a in enumerate(self.agents):
                s = a.states.get(f)
                if s is not None:
                    boxes.append((s[0], s[1], s[2], a.length, a.width))
                    speeds.append(s[3])
                    idx.append(k)
            boxes_arr = np.array(boxes, dtype=np.float64).reshape(-1, 5)
            out.append((boxes_arr, np.array(speeds, dtype=np.float64), idx))
        return out

    def agents_at(self, frame: int):
        """``(boxes (n, 5), speeds (n,), agent indices)`` present at ``frame``."""
        return self._frames[frame]

    def expert_control(self, frame: int, kin: KinematicConfig) -> Control:
        """Control that carries the expert from ``frame`` to ``frame + 1``."""
        v = float(self.expert_traj[frame, 4])
        if v == 0.0:
            return Control(0.0, 0.0)
        dpsi = wrap_angle(self.expert_traj[frame + 1, 3] - self.expert_traj[frame, 3])
        return Control(v, math.atan(dpsi * kin.wheelbase / (v * self.dt)))

    def expert_action(self, frame: int, kin: KinematicConfig) -> tuple[float, float]:
        """Per-frame expert displacement expressed as a (dx, dy) action."""
        return control_to_action(self.expert_control(frame, kin), kin)

    # -- serialisation ----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "frame_rate": self.frame_rate,
            "duration": self.duration,
            "expert_traj": [[float(v) for v in row] for row in self.expert_traj],
            "agents": [
                {
                    "id": a.id,
                    "length": a.length,
                    "width": a.width,
                    "states": {str(k): [float(v) for v in a.states[k]] for k in sorted(a.states)},
                }
                for a in self.agents
            ],
            "static_obstacles": [[[float(v) for v in p] for p in poly] for poly in self.static_obstacles],
            "route": [[float(v) for v in p] for p in self.route],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        for key in ("id", "frame_rate", "duration", "expert_traj", "agents", "static_obstacles", "route"):
            if key not in d:
                raise SchemaError(key, "missing")
        try:
            expert = np.array(d["expert_traj"], dtype=np.float64)
            agents = []
            for i, a in enumerate(d["agents"]):
                states = {int(k): tuple(float(v) for v in s) for k, s in a["states"].items()}
                agents.append(AgentTrack(str(a["id"]), float(a["length"]), float(a["width"]), states))
            obstacles = [np.array(p, dtype=np.float64) for p in d["static_obstacles"]]
            route = np.array(d["route"], dtype=np.float64)
            scn = cls(
                id=str(d["id"]),
                frame_rate=float(d["frame_rate"]),
                duration=float(d["duration"]),
                expert_traj=expert,
                agents=agents,
                static_obstacles=obstacles,
                route=route,
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, SchemaError):
                raise
            raise SchemaError("scenario", f"malformed field ({exc})") from exc
        scn.validate()
        return scn

    def validate(self) -> None:
        if self.frame_rate <= 0 or self.duration <= 0:
            raise SchemaError("frame_rate", "frame_rate and duration must be positive")
        e = self.expert_traj
        if e.ndim != 2 or e.shape[1] != 5:
            raise SchemaError("expert_traj", "rows must be [t, x, y, psi, v]")
        if e.shape[0] != self.n_frames:
            raise SchemaError("expert_traj", f"expected {self.n_frames} frames, got {e.shape[0]}")
        if not np.all(np.isfinite(e)):
            raise SchemaError("expert_traj", "non-finite values")
        if not np.allclose(np.diff(e[:, 0]), self.dt, atol=1e-9):
            raise SchemaError("expert_traj", "timestamps not uniform at 1/frame_rate")
        if np.any(e[:, 4] < 0):
            raise SchemaError("expert_traj", "negative speed")
        for a in self.agents:
            if a.length <= 0 or a.width <= 0:
                raise SchemaError("agents", f"agent {a.id} has non-positive footprint")
            for k, s in a.states.items():
                if not 0 <= k < self.n_frames or len(s) != 4:
                    raise SchemaError("agents", f"agent {a.id} has bad state at frame {k}")
        for i, poly in enumerate(self.static_obstacles):
            if poly.ndim != 2 or poly.shape[0] < 3 or poly.shape[1] != 2:
                raise SchemaError("static_obstacles", f"polygon {i} needs >= 3 vertices")
            if not _is_convex(poly):
                raise SchemaError("static_obstacles", f"polygon {i} is not convex")
        if self.route.ndim != 2 or self.route.shape[0] < 2 or self.route.shape[1] != 2:
            raise SchemaError("route", "need at least two [x, y] waypoints")


def _is_convex(poly: np.ndarray) -> bool:
    e = np.roll(poly, -1, axis=0) - poly
    cross = e[:, 0] * np.roll(e[:, 1], -1) - e[:, 1] * np.roll(e[:, 0], -1)
    return bool(np.all(cross >= -1e-12) or np.all(cross <= 1e-12))


def dumps_scenario(scn: Scenario) -> str:
    return json.dumps(scn.to_dict(), separators=(",", ":"))


def save_scenario(path, scn: Scenario) -> None:
    Path(path).write_text(dumps_scenario(scn), encoding="utf-8")


def load_scenario(path) -> Scenario:
    try:
        raw = Path(path).read_text(encoding="utf-8")
        d = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    if not isinstance(d, dict):
        raise ParseError(f"{path}: top level must be an object")
    return Scenario.from_dict(d)


# ---------------------------------------------------------------------------
# synthetic clips
# ---------------------------------------------------------------------------

FRAME_RATE = 10.0
DURATION = 8.0
N_STEPS = 80
# generated experts stay well inside a conventional steering range
EXPERT_STEER_LIMIT = 0.54


class _Road:
    """Constant-curvature centerline starting at ``origin`` with heading ``psi0``."""

    def __init__(self, x0: float, y0: float, psi0: float, kappa: float):
        self.x0, self.y0, self.psi0, self.kappa = x0, y0, psi0, kappa

    def heading(self, s):
        return self.psi0 + self.kappa * np.asarray(s)

    def point(self, s, lateral=0.0):
        s = np.asarray(s, dtype=np.float64)
        k = self.kappa
        if abs(k) < 1e-12:
            fx, fy = s, np.zeros_like(s)
        else:
            fx = np.sin(k * s) / k
            fy = (1.0 - np.cos(k * s)) / k
        c, si = math.cos(self.psi0), math.sin(self.psi0)
        h = self.heading(s)
        x = self.x0 + c * fx - si * fy - np.sin(h) * lateral
        y = self.y0 + si * fx + c * fy + np.cos(h) * lateral
        return x, y


def _drive_expert(road: _Road, speeds: np.ndarray, offset_fn, kin: KinematicConfig) -> np.ndarray:
    """Integrate the expert with the Euler bicycle update.

    ``offset_fn(s)`` is the heading offset from the road heading as a
    function of distance travelled, so a stopped expert never turns.
    """
    dt = 1.0 / FRAME_RATE
    out = np.zeros((N_STEPS + 1, 5))
    x, y = road.x0, road.y0
    psi = float(road.heading(0.0) + offset_fn(0.0))
    s = 0.0
    for k in range(N_STEPS + 1):
        v = float(speeds[min(k, N_STEPS - 1)])
        out[k] = (k * dt, x, y, wrap_angle(psi), v)
        if k == N_STEPS:
            break
        s_next = s + v * dt
        target = float(road.heading(s_next) + offset_fn(s_next))
        if v > 0:
            delta = math.atan((target - psi) * kin.wheelbase / (v * dt))
        else:
            delta = 0.0
        if abs(delta) > EXPERT_STEER_LIMIT:
            raise _Reject("expert steering too large")
        x = x + v * math.cos(psi) * dt
        y = y + v * math.sin(psi) * dt
        psi = psi + (v / kin.wheelbase) * math.tan(delta) * dt
        s = s_next
    return out


class _Reject(Exception):
    pass


def _speed_series(v0: float, accel_fn, vmax: float = 30.0) -> np.ndarray:
    dt = 1.0 / FRAME_RATE
    v = np.zeros(N_STEPS)
    cur = v0
    s = 0.0
    for k in range(N_STEPS):
        v[k] = cur
        a = accel_fn(k * dt, s, cur)
        s += cur * dt
        cur = min(vmax, max(0.0, cur + a * dt))
    return v


def _positions_along(speeds: np.ndarray, s0: float = 0.0) -> np.ndarray:
    dt = 1.0 / FRAME_RATE
    s = np.empty(N_STEPS + 1)
    s[0] = s0
    s[1:] = s0 + np.cumsum(speeds * dt)
    return s


def _road_agent(road: _Road, aid: str, length: float, width: float, s: np.ndarray, speeds, lateral=0.0, reverse=False):
    xs, ys = road.point(s, lateral)
    hs = road.heading(s) + (math.pi if reverse else 0.0)
    sp = np.append(speeds, speeds[-1])
    states = {k: (float(xs[k]), float(ys[k]), float(wrap_angle(hs[k])), float(sp[k])) for k in range(N_STEPS + 1)}
    return AgentTrack(aid, length, width, states)


def _rect(road: _Road, s_center: float, lateral: float, length: float, width: float) -> np.ndarray:
    x, y = road.point(s_center, lateral)
    h = float(road.heading(s_center))
    c, si = math.cos(h), math.sin(h)
    local = np.array([[0.5 * length, 0.5 * width], [-0.5 * length, 0.5 * width], [-0.5 * length, -0.5 * width], [0.5 * length, -0.5 * width]])
    return local @ np.array([[c, si], [-si, c]]) + np.array([float(x), float(y)])


def _clear_of_hazards(expert: np.ndarray, agents, obstacles, margin: float) -> bool:
    for k in range(expert.shape[0]):
        ego = np.array([expert[k, 1], expert[k, 2], expert[k, 3], EGO_LENGTH + 2 * margin, EGO_WIDTH + 2 * margin])
        for a in agents:
            s = a.states.get(k)
            if s is None:
                continue
            if kernels.obb_overlap(ego, np.array([s[0], s[1], s[2], a.length, a.width])):
                return False
        for poly in obstacles:
            if kernels.polygon_box_overlap(poly, ego):
                return False
    return True


def _route(road: _Road, length: float) -> np.ndarray:
    s = np.arange(0.0, length + 1e-9, 2.0)
    x, y = road.point(s)
    return np.column_stack([x, y])


def _zero_offset(s):
    return 0.0


def _tpl_unobstructed_cruise(rng, road, kin):
    v0 = rng.uniform(7.0, 14.0)
    dv = rng.uniform(-3.0, 3.0)
    t0 = rng.uniform(1.0, 5.0)
    acc = math.copysign(rng.uniform(0.5, 1.5), dv)
    target = max(2.0, v0 + dv)

    def accel(t, s, v):
        if t < t0 or abs(v - target) < 1e-9:
            return 0.0
        step = (target - v) * FRAME_RATE
        return acc if abs(step) > abs(acc) else step

    speeds = _speed_series(v0, accel)
    return speeds, _zero_offset, [], []


def _tpl_lead_vehicle_braking(rng, road, kin):
    v0 = rng.uniform(8.0, 13.0)
    gap0 = rng.uniform(10.0, 18.0)
    t_brake = rng.uniform(1.0, 3.5)
    a_lead = rng.uniform(3.0, 6.0)
    v_end = rng.uniform(0.0, 0.4) * v0
    reaction = rng.uniform(0.3, 0.6)
    gap_final = rng.uniform(2.0, 4.0)
    lead_len, lead_w = rng.uniform(4.2, 5.0), rng.uniform(1.8, 2.0)

    def lead_accel(t, s, v):
        if t < t_brake or v <= v_end:
            return 0.0
        return -min(a_lead, (v - v_end) * FRAME_RATE)

    lead_speeds = _speed_series(v0, lead_accel)
    s_lead0 = gap0 + 0.5 * (EGO_LENGTH + lead_len)
    s_lead = _positions_along(lead_speeds, s_lead0)

    def ego_speeds(a_e):
        def accel(t, s, v):
            if t < t_brake + reaction or v <= v_end:
                return 0.0
            return -min(a_e, (v - v_end) * FRAME_RATE)

        return _speed_series(v0, accel)

    def min_gap(a_e):
        s_ego = _positions_along(ego_speeds(a_e))
        return float(np.min(s_lead - s_ego)) - 0.5 * (EGO_LENGTH + lead_len)

    lo, hi = 0.3, 8.0
    if min_gap(hi) < gap_final:
        raise _Reject("lead brakes too hard")
    if min_gap(lo) >= gap_final:
        a_e = lo
    else:
        for _ in range(40):
            mid = 0.5 * (lo + hi)
            if min_gap(mid) >= gap_final:
                hi = mid
            else:
                lo = mid
        a_e = hi
    speeds = ego_speeds(a_e)
    lead = _road_agent(road, "lead", lead_len, lead_w, s_lead, lead_speeds)
    agents = [lead]
    if rng.uniform() < 0.5:
        # oncoming traffic in the adjacent lane
        u = rng.uniform(6.0, 12.0)
        s_on = _positions_along(np.full(N_STEPS, -u), rng.uniform(60.0, 110.0))
        agents.append(_road_agent(road, "oncoming", 4.6, 1.9, s_on, np.full(N_STEPS, u), lateral=3.5, reverse=True))
    return speeds, _zero_offset, agents, []


def _tpl_crossing_pedestrian(rng, road, kin):
    v0 = rng.uniform(7.0, 11.0)
    s_c = rng.uniform(25.0, 40.0)
    u = rng.uniform(1.0, 1.6)
    side = 1.0 if rng.uniform() < 0.5 else -1.0
    ped = 0.6
    band = 0.5 * EGO_WIDTH + 0.5 * ped + 0.3
    t_arrive = (s_c - 0.5 * ped - 0.5 * EGO_LENGTH) / v0
    t_in = max(0.5, t_arrive - rng.uniform(0.5, 2.0))
    start_off = band + u * t_in
    t_out = (start_off + band) / u
    margin = rng.uniform(1.5, 3.0)
    s_stop = s_c - 0.5 * ped - 0.5 * EGO_LENGTH - margin
    a_comf = rng.uniform(2.0, 4.0)
    a_resume = rng.uniform(1.5, 2.5)
    state = {"braking": False}

    def accel(t, s, v):
        if t >= t_out:
            return min(a_resume, (v0 - v) * FRAME_RATE)
        remaining = s_stop - s
        if remaining <= 0.05:
            return -v * FRAME_RATE
        a_req = v * v / (2.0 * remaining)
        if state["braking"] or a_req >= a_comf:
            state["braking"] = True
            return -min(8.0, a_req)
        return 0.0

    speeds = _speed_series(v0, accel)
    t = np.arange(N_STEPS + 1) / FRAME_RATE
    lat = side * (start_off - u * t)
    xs, ys = road.point(np.full_like(t, s_c), lat)
    h = float(road.heading(s_c)) - side * 0.5 * math.pi
    states = {k: (float(xs[k]), float(ys[k]), float(wrap_angle(h)), float(u)) for k in range(N_STEPS + 1)}
    agents = [AgentTrack("pedestrian", ped, ped, states)]
    return speeds, _zero_offset, agents, []


def _tpl_static_detour(rng, road, kin):
    v0 = rng.uniform(6.0, 10.0)
    s_o = rng.uniform(32.0, 45.0)
    side = 1.0 if rng.uniform() < 0.5 else -1.0  # obstacle side, +1 = left
    c_in = rng.uniform(-0.6, 0.2)  # inner edge offset from the lane center
    o_len, o_w = 4.5, 2.0
    clearance = rng.uniform(0.5, 0.9)
    shift = -side * (c_in + 0.5 * EGO_WIDTH + clearance)
    ramp_out = rng.uniform(14.0, 20.0)
    ramp_back = rng.uniform(14.0, 20.0)
    s1 = s_o - 0.5 * o_len - 0.5 * EGO_LENGTH - 1.5 - ramp_out
    s2 = s_o + 0.5 * o_len + 0.5 * EGO_LENGTH + 1.5
    if s1 < 2.0:
        raise _Reject("no room to swerve")

    def bump(x, length):
        return (shift / length) * (1.0 - math.cos(2.0 * math.pi * x / length))

    def offset(s):
        if s1 <= s < s1 + ramp_out:
            return math.atan(bump(s - s1, ramp_out))
        if s2 <= s < s2 + ramp_back:
            return -math.atan(bump(s - s2, ramp_back))
        return 0.0

    speeds = _speed_series(v0, lambda t, s, v: 0.0)
    obstacle = _rect(road, s_o, side * (c_in + 0.5 * o_w), o_len, o_w)
    return speeds, offset, [], [obstacle]


def _idm(v, gap, dv, v_des, T=1.2, s0=2.5, a_max=1.5, b=2.0):
    s_star = s0 + max(0.0, v * T + v * dv / (2.0 * math.sqrt(a_max * b)))
    return a_max * (1.0 - (v / v_des) ** 4 - (s_star / max(gap, 0.1)) ** 2)


def _tpl_dense_traffic_crawl(rng, road, kin):
    dt = 1.0 / FRAME_RATE
    u_mean = rng.uniform(2.0, 4.0)
    amp = rng.uniform(1.0, 2.5)
    period = rng.uniform(4.0, 7.0)
    phase = rng.uniform(0.0, 2.0 * math.pi)
    lead_len = rng.uniform(4.2, 5.0)
    t = np.arange(N_STEPS) * dt
    lead_speeds = np.maximum(0.0, u_mean + amp * np.sin(2.0 * math.pi * t / period + phase))
    gap0 = rng.uniform(6.0, 10.0)
    s_lead = _positions_along(lead_speeds, gap0 + 0.5 * (EGO_LENGTH + lead_len))
    v_des = u_mean + 4.0

    speeds = np.zeros(N_STEPS)
    v = float(lead_speeds[0])
    s = 0.0
    for k in range(N_STEPS):
        speeds[k] = v
        gap = s_lead[k] - s - 0.5 * (EGO_LENGTH + lead_len)
        a = max(-6.0, _idm(v, gap, v - lead_speeds[k], v_des))
        s += v * dt
        v = max(0.0, v + a * dt)
    s_ego = _positions_along(speeds)

    # follower replays an IDM trace that tracked the expert
    f_len = rng.uniform(4.2, 5.0)
    fs = np.zeros(N_STEPS)
    fv = float(speeds[0])
    fpos = -rng.uniform(8.0, 12.0) - 0.5 * (EGO_LENGTH + f_len)
    f_start = fpos
    for k in range(N_STEPS):
        fs[k] = fv
        gap = s_ego[k] - fpos - 0.5 * (EGO_LENGTH + f_len)
        a = max(-6.0, _idm(fv, gap, fv - speeds[k], v_des))
        fpos += fv * dt
        fv = max(0.0, fv + a * dt)
    agents = [
        _road_agent(road, "lead", lead_len, 1.9, s_lead, lead_speeds),
        _road_agent(road, "follower", f_len, 1.9, _positions_along(fs, f_start), fs),
    ]
    for n in range(int(rng.integers(1, 4))):
        lane = 3.5 if rng.uniform() < 0.5 else -3.5
        w = rng.uniform(1.0, 6.0)
        s0 = rng.uniform(-20.0, 40.0)
        agents.append(_road_agent(road, f"adjacent{n}", 4.6, 1.9, _positions_along(np.full(N_STEPS, w), s0), np.full(N_STEPS, w), lateral=lane))
    return speeds, _zero_offset, agents, []


_TEMPLATE_FNS = {
    "lead_vehicle_braking": _tpl_lead_vehicle_braking,
    "crossing_pedestrian": _tpl_crossing_pedestrian,
    "static_detour": _tpl_static_detour,
    "dense_traffic_crawl": _tpl_dense_traffic_crawl,
    "unobstructed_cruise": _tpl_unobstructed_cruise,
}


def synth_scenario(seed: int, template: str, params: Optional[dict] = None) -> Scenario:
    """Deterministic synthetic clip for ``(seed, template)``.

    The expert is collision-free against the generated agents and obstacles
    with at least ``params["margin"]`` (default 0.2 m) of slack.
    """
    if template not in _TEMPLATE_FNS:
        raise ValueError(f"unknown template {template!r}; choose from {TEMPLATES}")
    params = dict(params or {})
    margin = float(params.get("margin", 0.2))
    kin = params.get("kinematics") or KinematicConfig()
    ss = np.random.SeedSequence([int(seed), TEMPLATES.index(template)])
    rng = np.random.default_rng(ss)
    for _ in range(200):
        kappa = 0.0 if rng.uniform() < 0.4 else rng.uniform(-0.008, 0.008)
        road = _Road(rng.uniform(-50, 50), rng.uniform(-50, 50), rng.uniform(-math.pi, math.pi), kappa)
        try:
            speeds, offset, agents, obstacles = _TEMPLATE_FNS[template](rng, road, kin)
            expert = _drive_expert(road, speeds, offset, kin)
        except _Reject:
            continue
        if not _clear_of_hazards(expert, agents, obstacles, margin):
            continue
        s_end = float(np.sum(speeds) / FRAME_RATE)
        scn = Scenario(
            id=f"{template}-{seed}",
            frame_rate=FRAME_RATE,
            duration=DURATION,
            expert_traj=expert,
            agents=agents,
            static_obstacles=obstacles,
            route=_route(road, s_end + 60.0),
        )
        scn.validate()
        return scn
    raise RuntimeError(f"could not generate a valid {template} clip for seed {seed}")
