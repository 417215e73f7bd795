"""Desk-scale directional check: does post-training beat its own Stage-2 start?"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .config import RunConfig
from .il import build_dataset, pretrain
from .metrics import MetricsReport, run_benchmark
from .policy import init_params
from .rollout import WorkerPool
from .scenario import Scenario, synth_scenario
from .train import Trainer

SUITE_TEMPLATES = ("crossing_pedestrian", "lead_vehicle_braking", "static_detour")
CR_FACTOR = 0.7
ADD_FACTOR = 2.0


def suites(seed: int, n_train: int = 64, n_test: int = 16, templates: Sequence[str] = SUITE_TEMPLATES):
    """Disjoint train/held-out suites; held-out clips use a separate seed range."""
    train = [synth_scenario(seed * 1000 + k, templates[k % len(templates)]) for k in range(n_train)]
    test = [synth_scenario(seed * 1000 + 500 + k, templates[k % len(templates)]) for k in range(n_test)]
    return train, test


@dataclass
class ReproResult:
    seed: int
    stage2: MetricsReport
    post: MetricsReport
    cycles: int
    seconds: float

    @property
    def cr_ok(self) -> bool:
        return self.post.CR <= CR_FACTOR * self.stage2.CR

    @property
    def add_ok(self) -> bool:
        if self.post.ADD is None or self.stage2.ADD is None:
            return False
        return self.post.ADD <= ADD_FACTOR * self.stage2.ADD

    @property
    def passed(self) -> bool:
        return self.cr_ok and self.add_ok

    def line(self) -> str:
        s, p = self.stage2, self.post
        return (
            f"seed {self.seed}: CR {s.CR:.4f} -> {p.CR:.4f} (limit {CR_FACTOR * s.CR:.4f}), "
            f"ADD {s.ADD:.3f} -> {p.ADD:.3f} (limit {ADD_FACTOR * s.ADD:.3f}), "
            f"DR {s.DR:.4f} -> {p.DR:.4f}, {self.seconds:.0f}s {'PASS' if self.passed else 'FAIL'}"
        )


def run_seed(
    cfg: RunConfig,
    seed: int,
    cycles: Optional[int] = None,
    backend: str = "inline",
    train_suite: Optional[list] = None,
    test_suite: Optional[list] = None,
) -> ReproResult:
    """Pretrain, evaluate, post-train and evaluate again, all from ``seed``."""
    t0 = time.perf_counter()
    cfg = cfg.with_overrides(seed=seed)
    if cycles is not None:
        cfg = cfg.with_overrides(train={"cycles": cycles})
    if train_suite is None or test_suite is None:
        train_suite, test_suite = suites(seed)
    pcfg = cfg.policy
    demos = build_dataset(train_suite, cfg.env, cfg.features)
    params = init_params(pcfg, np.random.default_rng(seed))
    params, _ = pretrain(demos, params, cfg.grid, cfg.pretrain, None, pcfg.activation)
    stage2, _ = run_benchmark(params, test_suite, cfg.bench)
    workers = 1 if backend == "inline" else cfg.rl.workers
    with WorkerPool(train_suite, cfg.rollout_spec, workers, backend) as pool:
        trainer = Trainer.from_params(pcfg, cfg.post, pool, demos, params)
        trainer.train()
    post, _ = run_benchmark(trainer.state.params, test_suite, cfg.bench)
    return ReproResult(seed, stage2, post, cfg.post.cycles, time.perf_counter() - t0)


def majority(results: Sequence[ReproResult]) -> bool:
    return sum(r.passed for r in results) * 2 > len(results)


def suite_clips(seed: int) -> list[Scenario]:
    train, test = suites(seed)
    return train + test
