"""Closed-loop benchmark metrics."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .env import FAILURES, EnvConfig, EnvState, play_expert, trace_record
from .errors import NoSafeFrames, ParseError, TooFewFrames
from .features import FeatureConfig
from .geometry import AnchorGrid, build_anchor_grid, project_to_polyline, wrap_angle
from .rollout import RolloutSpec, run_episode
from .scenario import Scenario

EXPERT = "expert"


@dataclass
class EpisodeLog:
    clip_id: str
    termination: str
    records: list  # trace_record dicts, one per frame
    d_min: np.ndarray  # (n_frames,)
    v_long: np.ndarray
    v_lat: np.ndarray
    dt: float = 0.1
    header: dict = field(default_factory=dict)

    @property
    def n_safe(self) -> int:
        """Frames before the triggering frame; all frames if none triggered."""
        n = len(self.d_min)
        return n - 1 if self.termination in FAILURES else n

    def to_jsonl(self) -> str:
        head = {
            "clip_id": self.clip_id,
            "termination": self.termination,
            "dt": self.dt,
            **self.header,
        }
        lines = [json.dumps({"header": head})]
        for r, d, vl, vt in zip(self.records, self.d_min, self.v_long, self.v_lat):
            lines.append(json.dumps({**r, "d_min": float(d), "v_long": float(vl), "v_lat": float(vt)}))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text: str) -> "EpisodeLog":
        try:
            rows = [json.loads(line) for line in text.splitlines() if line.strip()]
            head = rows[0]["header"]
            recs = rows[1:]
            extra = {k: v for k, v in head.items() if k not in ("clip_id", "termination", "dt")}
            return cls(
                head["clip_id"],
                head["termination"],
                [{k: r[k] for k in r if k not in ("d_min", "v_long", "v_lat")} for r in recs],
                np.array([r["d_min"] for r in recs], dtype=np.float64),
                np.array([r["v_long"] for r in recs], dtype=np.float64),
                np.array([r["v_lat"] for r in recs], dtype=np.float64),
                float(head.get("dt", 0.1)),
                extra,
            )
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise ParseError(f"malformed episode log: {exc}") from exc


def _ratio(n: int, total: int) -> float:
    return n / total if total else 0.0


@dataclass
class MetricsReport:
    N_total: int
    N_dc: int
    N_sc: int
    N_pd: int
    N_hd: int
    ADD: Optional[float]
    long_jerk: Optional[float]
    lat_jerk: Optional[float]

    @property
    def DCR(self) -> float:
        return _ratio(self.N_dc, self.N_total)

    @property
    def SCR(self) -> float:
        return _ratio(self.N_sc, self.N_total)

    @property
    def CR(self) -> float:
        return _ratio(self.N_dc + self.N_sc, self.N_total)

    @property
    def PDR(self) -> float:
        return _ratio(self.N_pd, self.N_total)

    @property
    def HDR(self) -> float:
        return _ratio(self.N_hd, self.N_total)

    @property
    def DR(self) -> float:
        return _ratio(self.N_pd + self.N_hd, self.N_total)

    METRICS = ("CR", "DCR", "SCR", "DR", "PDR", "HDR", "ADD", "long_jerk", "lat_jerk")

    def as_dict(self) -> dict:
        d = {m: getattr(self, m) for m in self.METRICS}
        d.update(asdict(self))
        return d

    def table(self) -> str:
        out = []
        for m in self.METRICS:
            v = getattr(self, m)
            out.append(f"{m:>10}  {'null' if v is None else f'{v:.4f}'}")
        out.append(f"{'clips':>10}  {self.N_total}")
        return "\n".join(out)


def compute_add(logs: Sequence[EpisodeLog]) -> float:
    """Mean closest distance to the expert path, pooled over pre-event frames."""
    vals = [lg.d_min[: lg.n_safe] for lg in logs]
    n = sum(len(v) for v in vals)
    if n == 0:
        raise NoSafeFrames("no frames before the first event")
    return float(np.sum(np.concatenate(vals)) / n)


def episode_jerk(v: np.ndarray, dt: float) -> float:
    if len(v) < 3:
        raise TooFewFrames(f"need 3 frames for a second difference, got {len(v)}")
    return float(np.mean(np.abs(v[2:] - 2.0 * v[1:-1] + v[:-2])) / (dt * dt))


def compute_jerk(logs: Sequence[EpisodeLog], axis: str = "longitudinal") -> float:
    """Mean absolute second difference of the axis velocity, per episode then across episodes."""
    if axis not in ("longitudinal", "lateral"):
        raise ValueError(f"unknown axis {axis!r}")
    per = []
    for lg in logs:
        v = (lg.v_long if axis == "longitudinal" else lg.v_lat)[: lg.n_safe]
        if len(v) >= 3:
            per.append(episode_jerk(v, lg.dt))
    if not per:
        raise TooFewFrames("no episode has three safe frames")
    return float(np.mean(per))


def build_report(logs: Sequence[EpisodeLog]) -> MetricsReport:
    n = {t: 0 for t in FAILURES}
    for lg in logs:
        if lg.termination in n:
            n[lg.termination] += 1

    def safe(fn, *a):
        try:
            return fn(*a)
        except (NoSafeFrames, TooFewFrames):
            return None

    return MetricsReport(
        N_total=len(logs),
        N_dc=n["dynamic_collision"],
        N_sc=n["static_collision"],
        N_pd=n["position_deviation"],
        N_hd=n["heading_deviation"],
        ADD=safe(compute_add, logs),
        long_jerk=safe(compute_jerk, logs, "longitudinal"),
        lat_jerk=safe(compute_jerk, logs, "lateral"),
    )


def _frame_kinematics(scn: Scenario, state: EnvState) -> tuple[float, float, float]:
    proj = project_to_polyline((state.ego.x, state.ego.y), scn.expert_polyline)
    rel = wrap_angle(state.ego.psi - proj.matched_heading)
    return proj.distance, state.ego_speed * math.cos(rel), state.ego_speed * math.sin(rel)


def episode_log(scn: Scenario, states: Sequence[EnvState], actions, rewards) -> EpisodeLog:
    """``states`` has one more entry than ``actions``/``rewards``."""
    recs, d, vl, vt = [], [], [], []
    for k, st in enumerate(states):
        a = actions[k] if k < len(actions) else None
        r = rewards[k - 1] if k > 0 else None
        recs.append(trace_record(st, a, r))
        dm, lo, la = _frame_kinematics(scn, st)
        d.append(dm)
        vl.append(lo)
        vt.append(la)
    final = states[-1]
    boxes, _, _ = scn.agents_at(final.frame)
    header = {
        "expert_path": scn.expert_traj[:, 1:3].tolist(),
        "event_frame": final.frame if final.termination in FAILURES else None,
        "event_agents": boxes.tolist(),
        "obstacles": [np.asarray(p).tolist() for p in scn.static_obstacles],
    }
    return EpisodeLog(scn.id, final.termination, recs, np.array(d), np.array(vl), np.array(vt), scn.dt, header)


@dataclass(frozen=True)
class BenchConfig:
    env: EnvConfig = EnvConfig()
    features: FeatureConfig = FeatureConfig()
    grid: Optional[AnchorGrid] = None
    activation: str = "tanh"

    def rollout_spec(self) -> RolloutSpec:
        return RolloutSpec(self.env, self.features, self.grid or build_anchor_grid(), self.activation)


def run_episode_log(policy: Union[dict, str], scn: Scenario, cfg: BenchConfig) -> EpisodeLog:
    if isinstance(policy, str):
        if policy != EXPERT:
            raise ValueError(f"unknown policy {policy!r}")
        steps = play_expert(scn, cfg.env)
        states = [steps[0][0]] + [s[3] for s in steps]
        return episode_log(scn, states, [None] * len(steps), [s[2] for s in steps])
    steps, final, _ = run_episode(policy, scn, cfg.rollout_spec(), None, "greedy")
    states = [s.state for s in steps] + [final]
    return episode_log(scn, states, [s.action for s in steps], [s.rewards for s in steps])


def run_benchmark(policy: Union[dict, str], suite: Sequence[Scenario], cfg: BenchConfig = BenchConfig(), executor=None):
    """Greedy closed-loop run over ``suite``. ``policy`` is a parameter dict or ``"expert"``."""
    if not suite:
        raise ValueError("benchmark suite is empty")
    if executor is None:
        logs = [run_episode_log(policy, s, cfg) for s in suite]
    else:
        logs = list(executor.map(run_episode_log, [policy] * len(suite), suite, [cfg] * len(suite)))
    return build_report(logs), logs


def write_report(report: MetricsReport, json_path=None, csv_path=None) -> None:
    if json_path is not None:
        with open(json_path, "w", encoding="utf-8") as fh:
            json.dump(report.as_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
    if csv_path is not None:
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["metric", "value"])
            for k, v in report.as_dict().items():
                w.writerow([k, "null" if v is None else repr(v)])


def report_from_json(path) -> MetricsReport:
    with open(path, encoding="utf-8") as fh:
        d = json.load(fh)
    return MetricsReport(**{k: d[k] for k in ("N_total", "N_dc", "N_sc", "N_pd", "N_hd", "ADD", "long_jerk", "lat_jerk")})


# ---------------------------------------------------------------------------
# SVG traces
# ---------------------------------------------------------------------------


def _box_corners(b) -> list:
    cx, cy, psi, ln, wd = b
    c, s = math.cos(psi), math.sin(psi)
    out = []
    for u, v in ((ln / 2, wd / 2), (ln / 2, -wd / 2), (-ln / 2, -wd / 2), (-ln / 2, wd / 2)):
        out.append((cx + u * c - v * s, cy + u * s + v * c))
    return out


def trace_svg(log: EpisodeLog, size: int = 640) -> str:
    """Top-down plot of the ego path against the expert path."""
    ego = [tuple(r["ego"][:2]) for r in log.records]
    expert = [tuple(p) for p in log.header.get("expert_path", [])]
    agents = [_box_corners(b) for b in log.header.get("event_agents", [])] if log.header.get("event_frame") is not None else []
    obstacles = [[tuple(p) for p in poly] for poly in log.header.get("obstacles", [])]
    pts = ego + expert + [p for a in agents for p in a] + [p for o in obstacles for p in o]
    xs = [p[0] for p in pts] or [0.0]
    ys = [p[1] for p in pts] or [0.0]
    x0, x1, y0, y1 = min(xs) - 5, max(xs) + 5, min(ys) - 5, max(ys) + 5
    scale = size / max(x1 - x0, y1 - y0, 1e-6)

    def tx(p):
        return f"{(p[0] - x0) * scale:.2f},{(y1 - p[1]) * scale:.2f}"

    def path(ps):
        return " ".join(tx(p) for p in ps)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
        f"<title>{_esc(log.clip_id)}: {_esc(log.termination)}</title>",
        f'<rect width="{size}" height="{size}" fill="white"/>',
    ]
    for o in obstacles:
        parts.append(f'<polygon class="obstacle" points="{path(o)}" fill="#999" stroke="black"/>')
    if expert:
        parts.append(f'<polyline class="expert" points="{path(expert)}" fill="none" stroke="#2a7" stroke-width="2"/>')
    if ego:
        parts.append(f'<polyline class="ego" points="{path(ego)}" fill="none" stroke="#c33" stroke-width="2"/>')
    for a in agents:
        parts.append(f'<polygon class="agent" points="{path(a)}" fill="none" stroke="#36c"/>')
    ev = log.header.get("event_frame")
    if ev is not None and ego:
        k = min(int(ev), len(ego) - 1)
        x, y = tx(ego[k]).split(",")
        parts.append(f'<circle class="event" cx="{x}" cy="{y}" r="6" fill="none" stroke="red" stroke-width="2"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _esc(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
