"""Privileged ground-truth state features (stand-in for a perception stack)."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .env import EnvState
from .geometry import project_to_polyline, world_to_ego, wrap_angle
from .scenario import Scenario

POS_SCALE = 20.0
SPEED_SCALE = 10.0
SIZE_SCALE = 5.0
AGENT_SLOT = 8  # fwd, left, cos(psi), sin(psi), v, length, width, valid


@dataclass(frozen=True)
class FeatureConfig:
    k_agents: int = 6
    lookaheads: tuple = (5.0, 15.0, 30.0)
    dx_scale: float = 0.75
    dy_scale: float = 15.0

    @property
    def dim(self) -> int:
        return 1 + 2 + len(self.lookaheads) + self.k_agents * AGENT_SLOT + 4 + 1 + 2


def _route_heading_at(scn: Scenario, arc: float) -> float:
    route = scn.route_polyline
    cum = scn.route_cum
    arc = min(max(arc, 0.0), cum[-1])
    i = int(np.searchsorted(cum, arc, side="right")) - 1
    i = min(max(i, 0), len(route) - 2)
    return float(route[i, 2])


def _polygon_distance(p: np.ndarray, poly: np.ndarray) -> float:
    e = np.roll(poly, -1, axis=0) - poly
    rel = p - poly
    cross = e[:, 0] * rel[:, 1] - e[:, 1] * rel[:, 0]
    if np.all(cross >= 0) or np.all(cross <= 0):
        return 0.0
    l2 = np.einsum("ij,ij->i", e, e)
    t = np.clip(np.einsum("ij,ij->i", rel, e) / np.where(l2 > 0, l2, 1.0), 0.0, 1.0)
    d = rel - t[:, None] * e
    return float(np.sqrt(np.min(np.einsum("ij,ij->i", d, d))))


def extract_features(state: EnvState, scn: Scenario, cfg: FeatureConfig = FeatureConfig()) -> np.ndarray:
    ego = state.ego
    out = np.zeros(cfg.dim)
    out[0] = state.ego_speed / SPEED_SCALE

    proj = project_to_polyline((ego.x, ego.y), scn.route_polyline)
    signed = proj.distance if proj.side == "left" else -proj.distance
    out[1] = signed
    out[2] = wrap_angle(ego.psi - proj.matched_heading)
    h_here = _route_heading_at(scn, proj.arc_pos)
    for n, la in enumerate(cfg.lookaheads):
        out[3 + n] = 10.0 * wrap_angle(_route_heading_at(scn, proj.arc_pos + la) - h_here) / la
    base = 3 + len(cfg.lookaheads)

    boxes, speeds, _ = scn.agents_at(state.frame)
    if boxes.shape[0]:
        rel = world_to_ego(ego, boxes[:, :2])
        dist = np.hypot(rel[:, 0], rel[:, 1])
        order = np.argsort(dist, kind="stable")[: cfg.k_agents]
        for slot, k in enumerate(order):
            dpsi = boxes[k, 2] - ego.psi
            o = base + slot * AGENT_SLOT
            out[o : o + AGENT_SLOT] = (
                rel[k, 0] / POS_SCALE,
                rel[k, 1] / POS_SCALE,
                math.cos(dpsi),
                math.sin(dpsi),
                speeds[k] / SPEED_SCALE,
                boxes[k, 3] / SIZE_SCALE,
                boxes[k, 4] / SIZE_SCALE,
                1.0,
            )
    base += cfg.k_agents * AGENT_SLOT

    if scn.static_obstacles:
        p = np.array([ego.x, ego.y])
        d = [_polygon_distance(p, poly) for poly in scn.static_obstacles]
        k = int(np.argmin(d))
        c = world_to_ego(ego, scn.obstacle_centroids[k])
        out[base : base + 4] = (c[0] / POS_SCALE, c[1] / POS_SCALE, d[k] / POS_SCALE, 1.0)
    base += 4

    out[base] = proj.arc_pos / max(scn.route_length, 1e-9)
    out[base + 1] = state.prev_action[0] / cfg.dx_scale
    out[base + 2] = state.prev_action[1] / cfg.dy_scale
    return out
