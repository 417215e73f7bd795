"""Reinforced post-training losses: per-component GAE, dual-clipped PPO,
directional auxiliary objectives and value regression.

Component order everywhere is ``(sc, pd, hd, dc)``; the lateral group is the
first three, the longitudinal group is ``dc``.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np

from . import kernels
from .env import RewardBreakdown
from .errors import IndexOutOfRange, LengthMismatch, MissingOldProbabilities
from .policy import Cache, LossGraph, forward_cache, softmax_backward

SC, PD, HD, DC = range(4)
LATERAL = (SC, PD, HD)


@dataclass(frozen=True)
class RlConfig:
    gamma: float = 0.9
    lam: float = 0.95
    eps_x: float = 0.1
    eps_y: float = 0.2
    aux_dc: float = 1.0
    aux_sc: float = 1.0
    aux_pd: float = 1.0
    aux_hd: float = 1.0
    value_coef: float = 0.5
    normalize_advantages: bool = False
    workers: int = 4
    rl_rounds_per_cycle: int = 4
    clips_per_round: int = 1
    buffer_clips: int = 4
    ppo_epochs: int = 4
    minibatch: int = 32
    lr: float = 5e-6
    il_lr: Optional[float] = None
    il_batch: int = 128
    il_samples_per_round: int = 320
    weight_decay: float = 1e-4

    def __post_init__(self):
        for name in ("gamma", "lam"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ValueError(f"{name} must lie in (0, 1], got {v}")
        if self.eps_x <= 0 or self.eps_y <= 0:
            raise ValueError("clip thresholds must be positive")
        if self.workers < 1:
            raise ValueError("need at least one worker")
        if self.rl_rounds_per_cycle < 0 or self.buffer_clips < 1:
            raise ValueError("invalid schedule")


# ---------------------------------------------------------------------------
# trajectories and buffer
# ---------------------------------------------------------------------------


def direction_factors(r: RewardBreakdown) -> np.ndarray:
    """Signed factors ``(f_sc, f_pd, f_hd, f_dc)``; 0 where no event fired.

    Positive lateral factors select rightward mass as the corrective
    direction; positive ``f_dc`` selects deceleration.
    """
    f = np.zeros(4)
    if r.obstacle_side is not None:
        f[SC] = 1.0 if r.obstacle_side == "left" else -1.0
    if r.deviation_side is not None:
        f[PD] = 1.0 if r.deviation_side == "left" else -1.0
    if r.rotation_dir is not None:
        # counterclockwise drift is undone by clockwise (rightward) steering
        f[HD] = 1.0 if r.rotation_dir == "counterclockwise" else -1.0
    if r.collision_direction is not None:
        f[DC] = 1.0 if r.collision_direction == "ahead" else -1.0
    return f


class Transition(NamedTuple):
    features: np.ndarray
    action: tuple
    p_x_old: np.ndarray
    p_y_old: np.ndarray
    values_old: np.ndarray
    rewards: np.ndarray
    factors: np.ndarray
    done: bool
    frame: int
    clip_id: str


@dataclass
class ClipTrajectory:
    """All transitions of one rolled-out episode, stored column-wise."""

    clip_id: str
    counter: int
    features: np.ndarray  # (T, F)
    actions: np.ndarray  # (T, 2) int
    p_x_old: np.ndarray  # (T, n_x)
    p_y_old: np.ndarray  # (T, n_y)
    values_old: np.ndarray  # (T, 4)
    rewards: np.ndarray  # (T, 4)
    factors: np.ndarray  # (T, 4)
    frames: np.ndarray  # (T,)
    bootstrap: np.ndarray  # (4,) value after the last step, 0 on failure
    termination: str

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dones(self) -> np.ndarray:
        d = np.zeros(len(self), dtype=bool)
        if len(self):
            d[-1] = True
        return d

    def transition(self, t: int) -> Transition:
        return Transition(
            self.features[t],
            (int(self.actions[t, 0]), int(self.actions[t, 1])),
            self.p_x_old[t],
            self.p_y_old[t],
            self.values_old[t],
            self.rewards[t],
            self.factors[t],
            bool(self.dones[t]),
            int(self.frames[t]),
            self.clip_id,
        )

    def next_values(self) -> np.ndarray:
        nv = np.empty_like(self.values_old)
        if len(self):
            nv[:-1] = self.values_old[1:]
            nv[-1] = self.bootstrap
        return nv

    _ARRAYS = ("features", "actions", "p_x_old", "p_y_old", "values_old", "rewards", "factors", "frames", "bootstrap")

    def to_arrays(self, prefix: str) -> dict:
        return {f"{prefix}/{k}": getattr(self, k) for k in self._ARRAYS}

    @classmethod
    def from_arrays(cls, prefix: str, arrays: dict, clip_id: str, counter: int, termination: str):
        kw = {k: arrays[f"{prefix}/{k}"] for k in cls._ARRAYS}
        return cls(clip_id=clip_id, counter=counter, termination=termination, **kw)


@dataclass
class Batch:
    """Concatenated transitions with their advantages and returns."""

    features: np.ndarray
    actions: np.ndarray
    p_x_old: Optional[np.ndarray]
    p_y_old: Optional[np.ndarray]
    values_old: np.ndarray
    factors: np.ndarray
    advantages: np.ndarray  # (B, 4)
    returns: np.ndarray  # (B, 4)

    def __len__(self) -> int:
        return self.features.shape[0]

    def take(self, idx) -> "Batch":
        return Batch(
            self.features[idx],
            self.actions[idx],
            None if self.p_x_old is None else self.p_x_old[idx],
            None if self.p_y_old is None else self.p_y_old[idx],
            self.values_old[idx],
            self.factors[idx],
            self.advantages[idx],
            self.returns[idx],
        )


class RolloutBuffer:
    """FIFO window over the most recent clips."""

    def __init__(self, capacity: int = 4):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._clips: deque = deque()

    def add(self, clip: ClipTrajectory) -> Optional[ClipTrajectory]:
        evicted = None
        if len(self._clips) == self.capacity:
            evicted = self._clips.popleft()
        self._clips.append(clip)
        return evicted

    @property
    def clips(self) -> list:
        return list(self._clips)

    def __len__(self) -> int:
        return len(self._clips)

    @property
    def n_transitions(self) -> int:
        return sum(len(c) for c in self._clips)

    def batch(self, gamma: float, lam: float) -> Batch:
        clips = [c for c in self._clips if len(c)]
        if not clips:
            raise LengthMismatch("buffer holds no transitions")
        advs = [compute_gae(c.rewards, c.values_old, c.next_values(), c.dones, gamma, lam) for c in clips]
        return Batch(
            np.concatenate([c.features for c in clips]),
            np.concatenate([c.actions for c in clips]),
            np.concatenate([c.p_x_old for c in clips]),
            np.concatenate([c.p_y_old for c in clips]),
            np.concatenate([c.values_old for c in clips]),
            np.concatenate([c.factors for c in clips]),
            np.concatenate([a.components for a in advs]),
            np.concatenate([a.returns for a in advs]),
        )


# ---------------------------------------------------------------------------
# advantages
# ---------------------------------------------------------------------------


@dataclass
class AdvantageSet:
    components: np.ndarray  # (T, 4)
    returns: np.ndarray  # (T, 4)

    @property
    def a_sc(self):
        return self.components[:, SC]

    @property
    def a_pd(self):
        return self.components[:, PD]

    @property
    def a_hd(self):
        return self.components[:, HD]

    @property
    def a_dc(self):
        return self.components[:, DC]

    @property
    def a_x(self):
        return self.a_sc + self.a_pd + self.a_hd

    @property
    def a_y(self):
        return self.a_dc


def compute_gae(rewards, values, next_values, episode_end, gamma: float, lam: float) -> AdvantageSet:
    """Per-component GAE by backward recursion.

    ``next_values[t]`` is the value of the state reached by step ``t``; it
    must already be 0 where that state is a failure terminal.
    ``episode_end[t]`` stops the recursion from leaking across episodes.
    """
    r = np.atleast_2d(np.asarray(rewards, dtype=np.float64))
    v = np.atleast_2d(np.asarray(values, dtype=np.float64))
    nv = np.atleast_2d(np.asarray(next_values, dtype=np.float64))
    ends = np.asarray(episode_end, dtype=bool).reshape(-1)
    if not (r.shape == v.shape == nv.shape) or ends.shape[0] != r.shape[0]:
        raise LengthMismatch(f"shapes differ: rewards {r.shape}, values {v.shape}, next {nv.shape}, ends {ends.shape}")
    adv = kernels.gae_backward(r, v, nv, ends, gamma, lam)
    return AdvantageSet(adv, adv + v)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def prob_partitions(dist, old_index: int) -> tuple[float, float]:
    """Probability mass strictly below and strictly above ``old_index``."""
    dist = np.asarray(dist)
    if not 0 <= old_index < dist.shape[-1]:
        raise IndexOutOfRange(f"index {old_index} outside [0, {dist.shape[-1]})")
    return float(dist[:old_index].sum()), float(dist[old_index + 1 :].sum())


def _partition_sign(n: int, idx: np.ndarray) -> np.ndarray:
    """+1 above the old index, -1 below, 0 at it: the gradient of (above - below) w.r.t. p."""
    k = np.arange(n)[None, :]
    return np.sign(k - idx[:, None]).astype(np.float64)


def _cache(params, batch: Batch, activation: str, cache: Optional[Cache]) -> Cache:
    return cache if cache is not None else forward_cache(params, batch.features, activation)


def ppo_loss(params, batch: Batch, eps_x: float, eps_y: float, activation: str = "tanh", cache=None):
    """Negated mean clipped surrogate, summed over both axes.

    Returns ``(LossGraph, diagnostics)``.
    """
    if batch.p_x_old is None or batch.p_y_old is None:
        raise MissingOldProbabilities("transitions carry no rollout-time probabilities")
    c = _cache(params, batch, activation, cache)
    b = len(batch)
    rows = np.arange(b)
    adv_x = batch.advantages[:, SC] + batch.advantages[:, PD] + batch.advantages[:, HD]
    adv_y = batch.advantages[:, DC]
    value = np.float64(0.0)
    grads = []
    diag = {}
    for axis, logp, old, a_idx, adv, eps in (
        ("x", c.logp_x, batch.p_x_old, batch.actions[:, 0], adv_x, eps_x),
        ("y", c.logp_y, batch.p_y_old, batch.actions[:, 1], adv_y, eps_y),
    ):
        p_old = old[rows, a_idx]
        if np.any(~(p_old > 0)):
            raise MissingOldProbabilities("old probability must be positive")
        ratio = np.exp(logp[rows, a_idx] - np.log(p_old))
        unclipped = ratio * adv
        clipped = np.clip(ratio, 1.0 - eps, 1.0 + eps) * adv
        surr = np.minimum(unclipped, clipped)
        active = unclipped <= clipped
        value = value - surr.mean()
        # d(-mean surr)/d logp_a = -ratio * adv / b where the ratio branch is active
        d_lp = np.where(active, -ratio * adv, 0.0) / b
        probs = np.exp(logp)
        d_logits = -d_lp[:, None] * probs
        d_logits[rows, a_idx] += d_lp
        grads.append(d_logits)
        diag[f"clip_frac_{axis}"] = float(np.mean(~active)) if b else 0.0
        diag[f"mean_ratio_{axis}"] = float(ratio.mean()) if b else 1.0
        diag[f"surrogate_{axis}"] = float(surr.mean())
    g = LossGraph(value, c, grads[0], grads[1], np.zeros_like(c.values))
    g.parts["ppo"] = float(value)
    return g, diag


def aux_losses(params, batch: Batch, activation: str = "tanh", cache=None) -> dict:
    """The four directional losses as separate graphs on one forward pass.

    Keys: ``dc``, ``sc``, ``pd``, ``hd``.
    """
    c = _cache(params, batch, activation, cache)
    b = len(batch)
    px, py = c.p_x, c.p_y
    sx = _partition_sign(px.shape[1], batch.actions[:, 0])
    sy = _partition_sign(py.shape[1], batch.actions[:, 1])
    right_minus_left = np.sum(px * sx, axis=1)
    dec_minus_acc = -np.sum(py * sy, axis=1)
    out = {}
    zeros_v = np.zeros_like(c.values)
    w = batch.advantages[:, DC] * batch.factors[:, DC] / b
    g = LossGraph(np.float64(np.sum(w * dec_minus_acc)), c, np.zeros_like(px), softmax_backward(py, -w[:, None] * sy), zeros_v)
    g.parts["aux_dc"] = float(g.value)
    out["dc"] = g
    for name, comp in (("sc", SC), ("pd", PD), ("hd", HD)):
        w = batch.advantages[:, comp] * batch.factors[:, comp] / b
        g = LossGraph(
            np.float64(np.sum(w * right_minus_left)), c, softmax_backward(px, w[:, None] * sx), np.zeros_like(py), zeros_v
        )
        g.parts[f"aux_{name}"] = float(g.value)
        out[name] = g
    return out


def value_loss(params, batch: Batch, activation: str = "tanh", cache=None) -> LossGraph:
    """Sum over components of the mean squared error to the component returns."""
    c = _cache(params, batch, activation, cache)
    if batch.returns.shape != c.values.shape:
        raise LengthMismatch(f"returns {batch.returns.shape} vs values {c.values.shape}")
    b = len(batch)
    err = c.values - batch.returns
    g = LossGraph(np.float64(np.sum(err * err) / b), c, np.zeros_like(c.logits_x), np.zeros_like(c.logits_y), 2.0 * err / b)
    g.parts["value"] = float(g.value)
    return g


def composite_loss(params, batch: Batch, cfg: RlConfig, activation: str = "tanh", cache=None):
    """PPO + weighted auxiliary terms + weighted value regression, to be minimised."""
    c = _cache(params, batch, activation, cache)
    total, diag = ppo_loss(params, batch, cfg.eps_x, cfg.eps_y, activation, c)
    aux = aux_losses(params, batch, activation, c)
    for name, w in (("dc", cfg.aux_dc), ("sc", cfg.aux_sc), ("pd", cfg.aux_pd), ("hd", cfg.aux_hd)):
        if w != 0.0:
            total = total + aux[name].scale(w)
        else:
            total.parts[f"aux_{name}"] = aux[name].parts[f"aux_{name}"]
    vl = value_loss(params, batch, activation, c)
    if cfg.value_coef != 0.0:
        total = total + vl.scale(cfg.value_coef)
    else:
        total.parts["value"] = vl.parts["value"]
    return total, diag


def normalize(adv: np.ndarray) -> np.ndarray:
    s = adv.std()
    return (adv - adv.mean()) / (s + 1e-8) if s > 0 else adv - adv.mean()


def prepare_batch(batch: Batch, cfg: RlConfig) -> Batch:
    if not cfg.normalize_advantages:
        return batch
    adv = np.stack([normalize(batch.advantages[:, k]) for k in range(4)], axis=1)
    return Batch(batch.features, batch.actions, batch.p_x_old, batch.p_y_old, batch.values_old, batch.factors, adv, batch.returns)


def batch_from_transitions(transitions: Sequence[Transition], advantages: AdvantageSet) -> Batch:
    if len(transitions) != advantages.components.shape[0]:
        raise LengthMismatch("one advantage row per transition required")
    has_old = all(t.p_x_old is not None and t.p_y_old is not None for t in transitions)
    return Batch(
        np.array([t.features for t in transitions]),
        np.array([t.action for t in transitions], dtype=np.int64),
        np.array([t.p_x_old for t in transitions]) if has_old else None,
        np.array([t.p_y_old for t in transitions]) if has_old else None,
        np.array([t.values_old for t in transitions]),
        np.array([t.factors for t in transitions]),
        advantages.components,
        advantages.returns,
    )
