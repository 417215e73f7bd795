"""Experiment configuration: one TOML (or JSON) file drives a full run."""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .env import EnvConfig
from .errors import SchemaError
from .features import FeatureConfig
from .geometry import AnchorGrid, KinematicConfig, build_anchor_grid
from .il import FocalConfig, PretrainConfig
from .metrics import BenchConfig
from .policy import PolicyConfig
from .rl import RlConfig
from .rollout import RolloutSpec
from .train import PostTrainConfig

DEFAULTS: dict = {
    "seed": 0,
    "suite": {"train_manifest": "", "eval_manifest": ""},
    "grid": {"n_x": 61, "n_y": 61, "dx_min": -0.75, "dx_max": 0.75, "dy_max": 15.0},
    "kinematics": {"wheelbase": 2.8, "dt": 0.1, "horizon": 0.5, "delta_max": 1.5},
    "env": {"d_max": 2.0, "psi_max_deg": 40.0, "r_dc": -5.0, "r_sc": -5.0, "r_pd": -2.0, "r_hd": -2.0},
    "features": {"k_agents": 6, "lookaheads": [5.0, 15.0, 30.0]},
    "policy": {"hidden": [256, 256], "activation": "tanh", "head_init_scale": 0.01, "init_seed": 0},
    "focal": {"gamma": 2.0, "alpha": 1.0},
    "pretrain": {"steps": 30000, "batch_size": 512, "lr": 1e-4, "min_lr": 0.0, "weight_decay": 1e-4},
    "rl": {
        "gamma": 0.9,
        "lam": 0.95,
        "eps_x": 0.1,
        "eps_y": 0.2,
        "aux_dc": 1.0,
        "aux_sc": 1.0,
        "aux_pd": 1.0,
        "aux_hd": 1.0,
        "value_coef": 0.5,
        "normalize_advantages": False,
        "workers": 32,
        "rl_rounds_per_cycle": 4,
        "clips_per_round": 1,
        "buffer_clips": 4,
        "ppo_epochs": 4,
        "minibatch": 32,
        "lr": 5e-6,
        "il_lr": None,
        "il_batch": 128,
        "il_samples_per_round": 320,
        "weight_decay": 1e-4,
    },
    "train": {"cycles": 50, "min_lr_frac": 0.0, "checkpoint_every": 1, "backend": "auto"},
}


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        where = f"{path}.{k}" if path else k
        if k not in base:
            raise SchemaError(where, "unknown key")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise SchemaError(where, "expected a table")
            out[k] = _merge(base[k], v, where)
        else:
            out[k] = v
    return out


def parse_text(text: str, suffix: str) -> dict:
    if suffix == ".json":
        return json.loads(text)
    return tomllib.loads(text)


def load_raw(path) -> dict:
    """Read a config file, following an optional top-level ``base`` include."""
    path = Path(path)
    raw = parse_text(path.read_text(encoding="utf-8"), path.suffix.lower())
    base = raw.pop("base", None)
    if base is not None:
        parent = load_raw((path.parent / base).resolve())
        raw = _deep_update(parent, raw)
    return raw


def _deep_update(a: dict, b: dict) -> dict:
    out = copy.deepcopy(a)
    for k, v in b.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_update(out[k], v)
        else:
            out[k] = v
    return out


@dataclass
class RunConfig:
    raw: dict
    source: Optional[Path] = None

    @classmethod
    def from_dict(cls, d: dict, source=None) -> "RunConfig":
        merged = _merge(DEFAULTS, d)
        rc = cls(merged, Path(source) if source else None)
        rc.validate()
        return rc

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(load_raw(path), path)

    def with_overrides(self, **sections) -> "RunConfig":
        return RunConfig.from_dict(_deep_update(self.raw, sections), self.source)

    def resolve(self, p: str) -> Path:
        q = Path(p)
        if not q.is_absolute() and self.source is not None:
            q = self.source.parent / q
        return q

    def validate(self) -> None:
        for name, build in (
            ("grid", lambda: self.grid),
            ("kinematics", lambda: self.kinematics),
            ("env", lambda: self.env),
            ("policy", lambda: self.policy),
            ("rl", lambda: self.rl),
            ("focal", lambda: self.focal),
        ):
            try:
                build()
            except SchemaError:
                raise
            except (TypeError, ValueError) as exc:
                raise SchemaError(name, str(exc)) from exc

    # -- typed views ------------------------------------------------------

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def grid(self) -> AnchorGrid:
        return build_anchor_grid(**self.raw["grid"])

    @property
    def kinematics(self) -> KinematicConfig:
        return KinematicConfig(**self.raw["kinematics"])

    @property
    def env(self) -> EnvConfig:
        e = dict(self.raw["env"])
        e["psi_max"] = math.radians(e.pop("psi_max_deg"))
        return EnvConfig(kinematics=self.kinematics, **e)

    @property
    def features(self) -> FeatureConfig:
        f = self.raw["features"]
        g = self.raw["grid"]
        return FeatureConfig(int(f["k_agents"]), tuple(float(x) for x in f["lookaheads"]), float(g["dx_max"]), float(g["dy_max"]))

    @property
    def policy(self) -> PolicyConfig:
        p = self.raw["policy"]
        g = self.raw["grid"]
        return PolicyConfig(
            feature_dim=self.features.dim,
            n_x=int(g["n_x"]),
            n_y=int(g["n_y"]),
            hidden=tuple(p["hidden"]),
            activation=p["activation"],
            head_init_scale=float(p["head_init_scale"]),
        )

    @property
    def focal(self) -> FocalConfig:
        return FocalConfig(**self.raw["focal"])

    @property
    def pretrain(self) -> PretrainConfig:
        return PretrainConfig(seed=self.seed, focal=self.focal, **self.raw["pretrain"])

    @property
    def rl(self) -> RlConfig:
        return RlConfig(**self.raw["rl"])

    @property
    def post(self) -> PostTrainConfig:
        t = self.raw["train"]
        return PostTrainConfig(self.rl, self.focal, int(t["cycles"]), self.seed, float(t["min_lr_frac"]))

    @property
    def rollout_spec(self) -> RolloutSpec:
        return RolloutSpec(self.env, self.features, self.grid, self.policy.activation)

    @property
    def bench(self) -> BenchConfig:
        return BenchConfig(self.env, self.features, self.grid, self.policy.activation)

    def dumps(self) -> str:
        return json.dumps(self.raw, indent=2, sort_keys=True) + "\n"
