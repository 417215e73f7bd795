"""Post-training schedule: RL rounds over a sliding clip window, then an IL round."""

from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .env import TERMINATIONS
from .il import Demonstrations, FocalConfig, il_update, match_anchors
from .policy import (
    AdamWHyper,
    Checkpoint,
    OptState,
    PolicyConfig,
    adamw_step,
    backward,
    cosine_lr,
    forward_cache,
    load_checkpoint,
    save_checkpoint,
    snapshot,
)
from .rl import ClipTrajectory, RlConfig, RolloutBuffer, composite_loss, prepare_batch
from .rollout import WorkerPool, collect_rollouts

LOG_FIELDS = (
    "cycle",
    "round",
    "kind",
    "updates",
    "lr",
    "ppo",
    "aux_dc",
    "aux_sc",
    "aux_pd",
    "aux_hd",
    "value",
    "il",
    "clip_frac_x",
    "clip_frac_y",
    "mean_ratio_x",
    "mean_ratio_y",
    "episodes",
    "buffer_clips",
    "terminations",
)

# tags keep the RL shuffle and IL sampling streams apart
_TAG_RL = 1
_TAG_IL = 2


def _rng(seed: int, cycle: int, rnd: int, tag: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(cycle), int(rnd), int(tag)]))


@dataclass
class TrainerState:
    params: dict
    opt: OptState
    buffer: RolloutBuffer
    cycle: int = 0
    clip_counter: int = 0
    log: list = field(default_factory=list)


@dataclass(frozen=True)
class PostTrainConfig:
    rl: RlConfig = RlConfig()
    focal: FocalConfig = FocalConfig()
    cycles: int = 50
    seed: int = 0
    min_lr_frac: float = 0.0


class Trainer:
    """Owns parameters, optimiser state and the buffer; workers only see snapshots."""

    def __init__(
        self,
        policy_cfg: PolicyConfig,
        cfg: PostTrainConfig,
        worker_pool: WorkerPool,
        demos: Demonstrations,
        state: TrainerState,
    ):
        self.policy_cfg = policy_cfg
        self.cfg = cfg
        self.pool = worker_pool
        self.demos = demos
        self.demo_targets = match_anchors(demos.p_gt, worker_pool.spec.grid) if len(demos) else np.zeros((0, 2), int)
        self.state = state

    @classmethod
    def from_params(cls, policy_cfg, cfg, worker_pool, demos, params: dict) -> "Trainer":
        params = {k: np.array(v, copy=True) for k, v in params.items()}
        st = TrainerState(params, OptState.zeros_like(params), RolloutBuffer(cfg.rl.buffer_clips))
        return cls(policy_cfg, cfg, worker_pool, demos, st)

    @property
    def activation(self) -> str:
        return self.policy_cfg.activation

    def lr(self, base: float) -> float:
        return cosine_lr(base, self.state.cycle, self.cfg.cycles, base * self.cfg.min_lr_frac)

    # -- rounds -----------------------------------------------------------

    def rl_round(self, rnd: int) -> dict:
        st = self.state
        rl = self.cfg.rl
        snap = snapshot(st.params)
        clips = collect_rollouts(self.pool, snap, st.buffer, rl.clips_per_round, self.cfg.seed, st.clip_counter)
        st.clip_counter += len(clips)
        batch = prepare_batch(st.buffer.batch(rl.gamma, rl.lam), rl)
        hyper = AdamWHyper(lr=rl.lr, weight_decay=rl.weight_decay)
        lr = self.lr(rl.lr)
        rng = _rng(self.cfg.seed, st.cycle, rnd, _TAG_RL)
        sums: Counter = Counter()
        n = 0
        for _ in range(rl.ppo_epochs):
            perm = rng.permutation(len(batch))
            for s in range(0, len(batch), rl.minibatch):
                mb = batch.take(perm[s : s + rl.minibatch])
                cache = forward_cache(st.params, mb.features, self.activation)
                loss, diag = composite_loss(st.params, mb, rl, self.activation, cache)
                st.params, st.opt = adamw_step(st.params, backward(st.params, loss), st.opt, hyper, lr)
                sums.update({**loss.parts, **diag})
                n += 1
        row = {k: sums[k] / n for k in sums} if n else {}
        row.update(
            cycle=st.cycle,
            round=rnd,
            kind="rl",
            updates=n,
            lr=lr,
            episodes=len(clips),
            buffer_clips=len(st.buffer),
            terminations=termination_histogram(clips),
        )
        return row

    def il_round(self, rnd: int) -> dict:
        st = self.state
        rl = self.cfg.rl
        base = rl.il_lr if rl.il_lr is not None else rl.lr
        lr = self.lr(base)
        hyper = AdamWHyper(lr=base, weight_decay=rl.weight_decay)
        steps = math.ceil(rl.il_samples_per_round / rl.il_batch) if len(self.demos) else 0
        rng = _rng(self.cfg.seed, st.cycle, rnd, _TAG_IL)
        losses = []
        for _ in range(steps):
            idx = rng.choice(len(self.demos), size=min(rl.il_batch, len(self.demos)), replace=False)
            st.params, st.opt, loss = il_update(
                st.params, st.opt, self.demos.features[idx], self.demo_targets[idx], self.cfg.focal, hyper, lr, self.activation
            )
            losses.append(loss)
        return dict(
            cycle=st.cycle,
            round=rnd,
            kind="il",
            updates=steps,
            lr=lr,
            il=float(np.mean(losses)) if losses else float("nan"),
            episodes=0,
            buffer_clips=len(st.buffer),
            terminations="",
        )

    def training_cycle(self) -> list:
        """``rl_rounds_per_cycle`` RL rounds followed by one IL round."""
        rows = []
        rl = self.cfg.rl
        for rnd in range(rl.rl_rounds_per_cycle):
            rows.append(self.rl_round(rnd))
        rows.append(self.il_round(rl.rl_rounds_per_cycle))
        self.state.cycle += 1
        self.state.log.extend(rows)
        return rows

    def train(self, cycles: Optional[int] = None, on_cycle=None) -> None:
        target = self.cfg.cycles if cycles is None else cycles
        while self.state.cycle < target:
            rows = self.training_cycle()
            if on_cycle is not None:
                on_cycle(self, rows)

    # -- persistence ------------------------------------------------------

    def checkpoint(self) -> Checkpoint:
        st = self.state
        arrays = {}
        meta = []
        for k, c in enumerate(st.buffer.clips):
            arrays.update(c.to_arrays(f"buffer/{k}"))
            meta.append({"clip_id": c.clip_id, "counter": c.counter, "termination": c.termination})
        extra = {
            "stage": "post",
            "cycle": st.cycle,
            "clip_counter": st.clip_counter,
            "seed": self.cfg.seed,
            "buffer": meta,
            "buffer_capacity": st.buffer.capacity,
        }
        rng_state = {"seed": self.cfg.seed, "cycle": st.cycle, "clip_counter": st.clip_counter}
        return Checkpoint(self.policy_cfg, st.params, st.opt, rng_state, extra, arrays)

    def save(self, path) -> None:
        save_checkpoint(path, self.checkpoint())

    @classmethod
    def resume(cls, path, policy_cfg, cfg, worker_pool, demos) -> "Trainer":
        ck = load_checkpoint(path, policy_cfg)
        ex = ck.extra
        if ex.get("stage") != "post":
            raise ValueError(f"{path} is not a post-training checkpoint")
        buf = RolloutBuffer(int(ex.get("buffer_capacity", cfg.rl.buffer_clips)))
        for k, m in enumerate(ex["buffer"]):
            buf.add(ClipTrajectory.from_arrays(f"buffer/{k}", ck.arrays, m["clip_id"], m["counter"], m["termination"]))
        st = TrainerState(ck.params, ck.opt, buf, int(ex["cycle"]), int(ex["clip_counter"]))
        return cls(policy_cfg, cfg, worker_pool, demos, st)


def termination_histogram(clips: Sequence[ClipTrajectory]) -> str:
    c = Counter(x.termination for x in clips)
    return ";".join(f"{t}:{c[t]}" for t in TERMINATIONS[1:] if c[t])


def write_log(path, rows, append: bool = False) -> None:
    new = not append
    with open(path, "a" if append else "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS, extrasaction="ignore")
        if new:
            w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k, "") for k in LOG_FIELDS})


def read_log(path) -> list:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))
