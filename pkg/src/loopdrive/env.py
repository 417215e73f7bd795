"""Closed-loop driving environment with log-replayed traffic."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import kernels
from .errors import DegenerateAction, SteppedDoneEpisode
from .geometry import (
    Control,
    KinematicConfig,
    OrientedBox,
    Pose,
    action_to_control,
    bicycle_step,
    heading_error,
    project_to_polyline,
    world_to_ego,
)
from .scenario import EGO_LENGTH, EGO_WIDTH, Scenario

TERMINATIONS = (
    "none",
    "dynamic_collision",
    "static_collision",
    "position_deviation",
    "heading_deviation",
    "clip_end",
)
FAILURES = TERMINATIONS[1:5]


@dataclass(frozen=True)
class EnvConfig:
    d_max: float = 2.0
    psi_max: float = math.radians(40.0)
    r_dc: float = -5.0
    r_sc: float = -5.0
    r_pd: float = -2.0
    r_hd: float = -2.0
    ego_length: float = EGO_LENGTH
    ego_width: float = EGO_WIDTH
    kinematics: KinematicConfig = field(default_factory=KinematicConfig)

    def __post_init__(self):
        if self.d_max <= 0:
            raise ValueError("d_max must be positive")
        if not 0.0 < self.psi_max < math.pi:
            raise ValueError("psi_max must lie in (0, pi)")
        if any(r > 0 for r in (self.r_dc, self.r_sc, self.r_pd, self.r_hd)):
            raise ValueError("reward magnitudes are penalties and must be <= 0")


@dataclass(frozen=True)
class EnvState:
    frame: int
    ego: Pose
    ego_speed: float
    done: bool = False
    termination: str = "none"
    prev_action: tuple = (0.0, 0.0)


@dataclass(frozen=True)
class RewardBreakdown:
    r_dc: float = 0.0
    r_sc: float = 0.0
    r_pd: float = 0.0
    r_hd: float = 0.0
    collision_direction: Optional[str] = None  # ahead / behind
    obstacle_side: Optional[str] = None  # left / right
    deviation_side: Optional[str] = None  # left / right
    rotation_dir: Optional[str] = None  # clockwise / counterclockwise

    @property
    def total(self) -> float:
        return self.r_dc + self.r_sc + self.r_pd + self.r_hd

    def as_array(self) -> np.ndarray:
        """Component order used by the trainer: sc, pd, hd, dc."""
        return np.array([self.r_sc, self.r_pd, self.r_hd, self.r_dc])

    def to_json(self) -> dict:
        d = asdict(self)
        return {k: ("none" if v is None else v) for k, v in d.items()}


def ego_box(pose: Pose, cfg: EnvConfig) -> OrientedBox:
    return OrientedBox(pose, cfg.ego_length, cfg.ego_width)


def detect_dynamic_collision(box: OrientedBox, agent_boxes: np.ndarray) -> Optional[str]:
    """``"ahead"``/``"behind"`` for the nearest overlapping agent, else None."""
    agent_boxes = np.asarray(agent_boxes, dtype=np.float64).reshape(-1, 5)
    if agent_boxes.shape[0] == 0:
        return None
    hits = kernels.obb_overlap_many(box.as_array(), agent_boxes)
    if not np.any(hits):
        return None
    rel = world_to_ego(box.center, agent_boxes[hits, :2])
    k = int(np.argmin(np.hypot(rel[:, 0], rel[:, 1])))
    return "ahead" if rel[k, 0] >= 0.0 else "behind"


def detect_static_collision(box: OrientedBox, obstacles) -> Optional[str]:
    """``"left"``/``"right"`` by the overlapping obstacle's centroid; ties go left."""
    arr = box.as_array()
    best = None
    for poly in obstacles:
        if kernels.polygon_box_overlap(poly, arr):
            rel = world_to_ego(box.center, np.mean(poly, axis=0))
            d = math.hypot(rel[0], rel[1])
            if best is None or d < best[0]:
                best = (d, rel[1])
    if best is None:
        return None
    return "left" if best[1] >= 0.0 else "right"


def compute_deviation(ego: Pose, expert_polyline) -> tuple[float, Optional[str], float, Optional[str]]:
    """Positional and heading deviation from the expert path.

    Returns ``(pos_dev, side, head_dev, rotation)`` where ``side`` is the side
    of the path the ego is on and ``rotation`` the sense in which the ego
    heading is rotated relative to the matched path heading.
    """
    proj = project_to_polyline((ego.x, ego.y), expert_polyline)
    head_dev, rotation = heading_error(ego.psi, proj.matched_heading)
    return proj.distance, proj.side, head_dev, rotation


class DrivingEnv:
    """One clip, one ego. States are immutable; ``step`` returns a new one."""

    def __init__(self, scenario: Scenario, cfg: Optional[EnvConfig] = None):
        self.scenario = scenario
        self.cfg = cfg or EnvConfig()
        self._kin = self.cfg.kinematics

    def reset(self) -> EnvState:
        e = self.scenario.expert_traj[0]
        speed = float(e[4])
        return EnvState(0, Pose(e[1], e[2], e[3]), speed, prev_action=(0.0, speed * self._kin.horizon))

    def control_for(self, dx: float, dy: float) -> Control:
        try:
            return action_to_control(dx, dy, self._kin)
        except DegenerateAction:
            return Control(0.0, 0.0)

    def step(self, state: EnvState, dx: float, dy: float) -> tuple[EnvState, RewardBreakdown]:
        if state.done:
            raise SteppedDoneEpisode(f"episode on {self.scenario.id} already ended ({state.termination})")
        scn = self.scenario
        cfg = self.cfg
        ctrl = self.control_for(dx, dy)
        pose = bicycle_step(state.ego, ctrl, self._kin, dt=scn.dt)
        frame = state.frame + 1
        box = ego_box(pose, cfg)

        boxes, _, _ = scn.agents_at(frame)
        coll = detect_dynamic_collision(box, boxes)
        side_static = detect_static_collision(box, scn.static_obstacles)
        pos_dev, dev_side, head_dev, rot = compute_deviation(pose, scn.expert_polyline)
        pd = pos_dev > cfg.d_max
        hd = head_dev > cfg.psi_max

        rewards = RewardBreakdown(
            r_dc=cfg.r_dc if coll else 0.0,
            r_sc=cfg.r_sc if side_static else 0.0,
            r_pd=cfg.r_pd if pd else 0.0,
            r_hd=cfg.r_hd if hd else 0.0,
            collision_direction=coll,
            obstacle_side=side_static,
            deviation_side=dev_side if pd else None,
            rotation_dir=rot if hd else None,
        )
        if coll:
            term = "dynamic_collision"
        elif side_static:
            term = "static_collision"
        elif pd:
            term = "position_deviation"
        elif hd:
            term = "heading_deviation"
        elif frame >= scn.last_frame:
            term = "clip_end"
        else:
            term = "none"
        new = EnvState(frame, pose, ctrl.v, term != "none", term, (float(dx), float(dy)))
        return new, rewards


def reset(scenario: Scenario, cfg: Optional[EnvConfig] = None) -> EnvState:
    return DrivingEnv(scenario, cfg).reset()


def step(state: EnvState, action: tuple, scenario: Scenario, cfg: Optional[EnvConfig] = None):
    return DrivingEnv(scenario, cfg).step(state, action[0], action[1])


def trace_record(state: EnvState, action_idx, rewards: Optional[RewardBreakdown]) -> dict:
    return {
        "frame": state.frame,
        "ego": [state.ego.x, state.ego.y, state.ego.psi],
        "speed": state.ego_speed,
        "action": None if action_idx is None else [int(action_idx[0]), int(action_idx[1])],
        "rewards": None if rewards is None else rewards.to_json(),
        "termination": state.termination,
    }


def write_trace(path, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r) + "\n")


def play_expert(scenario: Scenario, cfg: Optional[EnvConfig] = None):
    """Drive the clip with the expert's own per-frame actions."""
    env = DrivingEnv(scenario, cfg)
    state = env.reset()
    out = []
    while not state.done:
        dx, dy = scenario.expert_action(state.frame, env.cfg.kinematics)
        nxt, r = env.step(state, dx, dy)
        out.append((state, (dx, dy), r, nxt))
        state = nxt
    return out
