"""Imitation learning: anchor matching and the dual focal loss."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .env import DrivingEnv, EnvConfig, EnvState
from .errors import EmptyBatch
from .features import FeatureConfig, extract_features
from .geometry import AnchorGrid, Pose, world_to_ego
from .policy import AdamWHyper, LossGraph, OptState, adamw_step, backward, cosine_lr, forward_cache
from .scenario import Scenario


@dataclass(frozen=True)
class FocalConfig:
    gamma: float = 2.0
    alpha: float = 1.0

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.alpha <= 0:
            raise ValueError("alpha must be > 0")


@dataclass
class Demonstrations:
    """Column-stored demonstration samples."""

    features: np.ndarray  # (M, F)
    p_gt: np.ndarray  # (M, 2) as (dx, dy) in the action frame
    clip_ids: list

    def __len__(self) -> int:
        return self.features.shape[0]

    def subset(self, idx) -> "Demonstrations":
        idx = np.asarray(idx)
        return Demonstrations(self.features[idx], self.p_gt[idx], [self.clip_ids[k] for k in idx])

    @classmethod
    def concat(cls, parts: Sequence["Demonstrations"]) -> "Demonstrations":
        parts = [p for p in parts if len(p)]
        if not parts:
            return cls(np.zeros((0, 0)), np.zeros((0, 2)), [])
        return cls(
            np.concatenate([p.features for p in parts]),
            np.concatenate([p.p_gt for p in parts]),
            [c for p in parts for c in p.clip_ids],
        )


def match_anchor(p_gt, grid: AnchorGrid) -> tuple[int, int]:
    """Nearest anchor per axis after normalising both axes to [0, 1]."""
    px, py = float(p_gt[0]), float(p_gt[1])
    span_x = grid.dx_max - grid.dx_min
    nx = (np.asarray(grid.lateral) - grid.dx_min) / span_x
    ny = np.asarray(grid.longitudinal) / grid.dy_max
    tx = (px - grid.dx_min) / span_x
    ty = py / grid.dy_max
    return int(np.argmin(np.abs(nx - tx))), int(np.argmin(np.abs(ny - ty)))


def match_anchors(p_gt: np.ndarray, grid: AnchorGrid) -> np.ndarray:
    p_gt = np.asarray(p_gt, dtype=np.float64).reshape(-1, 2)
    return np.array([match_anchor(p, grid) for p in p_gt], dtype=np.int64).reshape(-1, 2)


def focal_loss(dist, target: int, cfg: FocalConfig = FocalConfig()) -> float:
    p = float(dist[target])
    return float(-cfg.alpha * (1.0 - p) ** cfg.gamma * np.log(p))


def _focal_head(logp: np.ndarray, targets: np.ndarray, cfg: FocalConfig):
    """Per-row focal loss and its gradient w.r.t. the head logits."""
    rows = np.arange(logp.shape[0])
    lp = logp[rows, targets]
    p = np.exp(lp)
    q = 1.0 - p
    loss = -cfg.alpha * q**cfg.gamma * lp
    if cfg.gamma > 0:
        with np.errstate(divide="ignore", invalid="ignore"):
            pow_term = np.where(q > 0, cfg.gamma * q ** (cfg.gamma - 1.0), 0.0)
    else:
        pow_term = np.zeros_like(p)
    # dL/d(log p): alpha * (gamma q^(g-1) p log p - q^g)
    d_lp = cfg.alpha * (pow_term * p * lp - q**cfg.gamma)
    probs = np.exp(logp)
    d_logits = -d_lp[:, None] * probs
    d_logits[rows, targets] += d_lp
    return loss, d_logits


def il_loss(
    params: dict,
    features: np.ndarray,
    targets: np.ndarray,
    cfg: FocalConfig = FocalConfig(),
    activation: str = "tanh",
    cache=None,
) -> LossGraph:
    """Mean over the batch of lateral plus longitudinal focal loss.

    ``targets`` holds matched anchor indices ``(i_hat, j_hat)`` per row.
    """
    targets = np.asarray(targets, dtype=np.int64).reshape(-1, 2)
    if targets.shape[0] == 0:
        raise EmptyBatch("imitation batch is empty")
    c = cache if cache is not None else forward_cache(params, features, activation)
    b = targets.shape[0]
    lx, gx = _focal_head(c.logp_x, targets[:, 0], cfg)
    ly, gy = _focal_head(c.logp_y, targets[:, 1], cfg)
    value = np.float64((lx.sum() + ly.sum()) / b)
    g = LossGraph(value, c, gx / b, gy / b, np.zeros_like(c.values))
    g.parts["il"] = float(value)
    return g


# ---------------------------------------------------------------------------
# demonstrations
# ---------------------------------------------------------------------------


def expert_displacement(scn: Scenario, frame: int, horizon_frames: int) -> tuple[float, float]:
    """Expert displacement over the next window, in the action frame (+dx right)."""
    e0 = scn.expert_traj[frame]
    e1 = scn.expert_traj[frame + horizon_frames]
    fwd, left = world_to_ego(Pose(e0[1], e0[2], e0[3]), np.array([e1[1], e1[2]]))
    return -float(left), float(fwd)


def build_demonstrations(scn: Scenario, env_cfg: EnvConfig = EnvConfig(), feat_cfg: FeatureConfig = FeatureConfig()) -> Demonstrations:
    """One sample per frame whose full look-ahead window lies inside the clip."""
    kin = env_cfg.kinematics
    h = kin.n_ticks
    start = DrivingEnv(scn, env_cfg).reset()
    rows, gts = [], []
    for t in range(scn.n_frames - h):
        e = scn.expert_traj[t]
        prev = start.prev_action if t == 0 else scn.expert_action(t - 1, kin)
        state = EnvState(t, Pose(e[1], e[2], e[3]), float(e[4]), prev_action=tuple(prev))
        rows.append(extract_features(state, scn, feat_cfg))
        gts.append(expert_displacement(scn, t, h))
    feats = np.array(rows).reshape(-1, feat_cfg.dim)
    return Demonstrations(feats, np.array(gts).reshape(-1, 2), [scn.id] * len(rows))


def build_dataset(scenarios: Sequence[Scenario], env_cfg: EnvConfig = EnvConfig(), feat_cfg: FeatureConfig = FeatureConfig()) -> Demonstrations:
    ds = Demonstrations.concat([build_demonstrations(s, env_cfg, feat_cfg) for s in scenarios])
    if len(ds) == 0:
        return Demonstrations(np.zeros((0, feat_cfg.dim)), np.zeros((0, 2)), [])
    return ds


def save_demonstrations(path, ds: Demonstrations) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for f, g, c in zip(ds.features, ds.p_gt, ds.clip_ids):
            fh.write(json.dumps({"clip": c, "features": f.tolist(), "p_gt": g.tolist()}) + "\n")


def load_demonstrations(path) -> Demonstrations:
    feats, gts, ids = [], [], []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                r = json.loads(line)
                feats.append(r["features"])
                gts.append(r["p_gt"])
                ids.append(r["clip"])
    return Demonstrations(np.array(feats, dtype=np.float64), np.array(gts, dtype=np.float64).reshape(-1, 2), ids)


# ---------------------------------------------------------------------------
# pre-training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 2000
    batch_size: int = 64
    lr: float = 1e-3
    min_lr: float = 0.0
    weight_decay: float = 1e-4
    seed: int = 0
    focal: FocalConfig = FocalConfig()


def il_update(
    params: dict,
    opt: OptState,
    features: np.ndarray,
    targets: np.ndarray,
    focal: FocalConfig,
    hyper: AdamWHyper,
    lr: Optional[float] = None,
    activation: str = "tanh",
):
    g = il_loss(params, features, targets, focal, activation)
    params, opt = adamw_step(params, backward(params, g), opt, hyper, lr)
    return params, opt, float(g.value)


def batch_order(rng: np.random.Generator, n: int, batch: int, steps: int):
    """Yield index batches by walking successive random permutations."""
    perm = rng.permutation(n)
    pos = 0
    for _ in range(steps):
        if n <= batch:
            yield np.arange(n)
            continue
        if pos + batch > n:
            perm = rng.permutation(n)
            pos = 0
        yield perm[pos : pos + batch]
        pos += batch


def pretrain(
    dataset: Demonstrations,
    params: dict,
    grid: AnchorGrid,
    schedule: PretrainConfig = PretrainConfig(),
    opt: Optional[OptState] = None,
    activation: str = "tanh",
    log: Optional[list] = None,
):
    """Stage-2 imitation pre-training. Returns ``(params, opt_state)``."""
    if len(dataset) == 0:
        raise EmptyBatch("pre-training dataset is empty")
    targets = match_anchors(dataset.p_gt, grid)
    opt = opt or OptState.zeros_like(params)
    hyper = AdamWHyper(lr=schedule.lr, weight_decay=schedule.weight_decay)
    rng = np.random.default_rng(schedule.seed)
    for step, idx in enumerate(batch_order(rng, len(dataset), schedule.batch_size, schedule.steps)):
        lr = cosine_lr(schedule.lr, step, schedule.steps, schedule.min_lr)
        params, opt, loss = il_update(params, opt, dataset.features[idx], targets[idx], schedule.focal, hyper, lr, activation)
        if log is not None:
            log.append((step, loss))
    return params, opt


def write_loss_csv(path, log) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        for step, loss in log:
            w.writerow([step, repr(float(loss))])
