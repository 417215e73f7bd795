"""Episode rollouts and the worker pool that collects them."""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor, ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .env import DrivingEnv, EnvConfig, EnvState, RewardBreakdown
from .errors import EmptyScenarioPool
from .features import FeatureConfig, extract_features
from .geometry import AnchorGrid
from .policy import ActionDistributions, forward_cache, sample_action
from .rl import ClipTrajectory, RolloutBuffer, direction_factors
from .scenario import Scenario


@dataclass(frozen=True)
class RolloutSpec:
    """Everything a worker needs besides the policy snapshot."""

    env: EnvConfig
    features: FeatureConfig
    grid: AnchorGrid
    activation: str = "tanh"


@dataclass
class StepRecord:
    state: EnvState
    action: tuple  # (i, j)
    displacement: tuple  # (dx, dy)
    rewards: RewardBreakdown
    next_state: EnvState
    p_x: np.ndarray
    p_y: np.ndarray
    values: np.ndarray
    features: np.ndarray


def run_episode(
    params: dict,
    scenario: Scenario,
    spec: RolloutSpec,
    rng: Optional[np.random.Generator] = None,
    mode: str = "stochastic",
) -> tuple[list, EnvState, np.ndarray]:
    """Drive one clip to termination.

    Returns ``(steps, final_state, final_values)`` where ``final_values`` are
    the value heads evaluated at the final state.
    """
    env = DrivingEnv(scenario, spec.env)
    state = env.reset()
    steps = []
    lateral, longitudinal = spec.grid.lateral, spec.grid.longitudinal
    while not state.done:
        feats = extract_features(state, scenario, spec.features)
        c = forward_cache(params, feats, spec.activation)
        px, py = c.p_x[0], c.p_y[0]
        i, j, _, _ = sample_action(ActionDistributions(px, py), rng, mode)
        dx, dy = float(lateral[i]), float(longitudinal[j])
        nxt, rew = env.step(state, dx, dy)
        steps.append(StepRecord(state, (i, j), (dx, dy), rew, nxt, px, py, c.values[0].copy(), feats))
        state = nxt
    final_feats = extract_features(state, scenario, spec.features)
    final_values = forward_cache(params, final_feats, spec.activation).values[0].copy()
    return steps, state, final_values


def episode_to_trajectory(scenario: Scenario, counter: int, steps, final: EnvState, final_values) -> ClipTrajectory:
    t = len(steps)
    boot = final_values.copy() if final.termination == "clip_end" else np.zeros(4)
    return ClipTrajectory(
        clip_id=scenario.id,
        counter=counter,
        features=np.array([s.features for s in steps]).reshape(t, -1),
        actions=np.array([s.action for s in steps], dtype=np.int64).reshape(t, 2),
        p_x_old=np.array([s.p_x for s in steps]).reshape(t, -1),
        p_y_old=np.array([s.p_y for s in steps]).reshape(t, -1),
        values_old=np.array([s.values for s in steps]).reshape(t, 4),
        rewards=np.array([s.rewards.as_array() for s in steps]).reshape(t, 4),
        factors=np.array([direction_factors(s.rewards) for s in steps]).reshape(t, 4),
        frames=np.array([s.state.frame for s in steps], dtype=np.int64),
        bootstrap=boot,
        termination=final.termination,
    )


def job_rng(seed: int, counter: int) -> np.random.Generator:
    """Per-clip generator; depends only on the run seed and the clip counter."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(counter)]))


def rollout_job(params: dict, pool: Sequence[Scenario], spec: RolloutSpec, seed: int, counter: int) -> ClipTrajectory:
    rng = job_rng(seed, counter)
    scn = pool[int(rng.integers(len(pool)))]
    steps, final, fv = run_episode(params, scn, spec, rng, "stochastic")
    return episode_to_trajectory(scn, counter, steps, final, fv)


# process workers receive the pool/spec once through the initializer
_WORKER_CTX: dict = {}


def _init_worker(pool, spec):
    os.environ.setdefault("OMP_NUM_THREADS", "1")
    _WORKER_CTX["pool"] = pool
    _WORKER_CTX["spec"] = spec


def _process_job(params, seed, counter):
    return rollout_job(params, _WORKER_CTX["pool"], _WORKER_CTX["spec"], seed, counter)


class WorkerPool:
    """Runs rollout jobs inline, on threads, or on processes.

    Results are always returned ordered by clip counter, so the collected
    data does not depend on which worker finished first.
    """

    def __init__(self, pool: Sequence[Scenario], spec: RolloutSpec, workers: int = 1, backend: str = "auto"):
        if not pool:
            raise EmptyScenarioPool("scenario pool is empty")
        if workers < 1:
            raise ValueError("need at least one worker")
        if backend == "auto":
            backend = "inline" if workers == 1 else "process"
        if backend not in ("inline", "thread", "process"):
            raise ValueError(f"unknown backend {backend!r}")
        self.pool = list(pool)
        self.spec = spec
        self.workers = workers
        self.backend = backend
        self._exec = None

    def _executor(self):
        if self._exec is None:
            if self.backend == "thread":
                self._exec = ThreadPoolExecutor(self.workers)
            elif self.backend == "process":
                self._exec = ProcessPoolExecutor(self.workers, initializer=_init_worker, initargs=(self.pool, self.spec))
        return self._exec

    def run(self, params: dict, seed: int, counters: Sequence[int]) -> list:
        counters = list(counters)
        if self.backend == "inline" or len(counters) <= 1 and self.backend != "process":
            return [rollout_job(params, self.pool, self.spec, seed, k) for k in counters]
        ex = self._executor()
        if self.backend == "thread":
            futs = [ex.submit(rollout_job, params, self.pool, self.spec, seed, k) for k in counters]
        else:
            futs = [ex.submit(_process_job, params, seed, k) for k in counters]
        out = [f.result() for f in futs]
        return sorted(out, key=lambda c: c.counter)

    def close(self):
        if self._exec is not None:
            self._exec.shutdown()
            self._exec = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def collect_rollouts(
    worker_pool: WorkerPool,
    policy_snapshot: dict,
    buffer: RolloutBuffer,
    count_clips: int,
    seed: int,
    first_counter: int,
    on_clip: Optional[Callable[[ClipTrajectory, Optional[ClipTrajectory]], None]] = None,
) -> list:
    """Collect ``count_clips`` episodes and push them into the FIFO buffer.

    Returns the new clips in counter order.
    """
    if not worker_pool.pool:
        raise EmptyScenarioPool("scenario pool is empty")
    clips = worker_pool.run(policy_snapshot, seed, range(first_counter, first_counter + count_clips))
    for c in clips:
        evicted = buffer.add(c)
        if on_clip is not None:
            on_clip(c, evicted)
    return clips
