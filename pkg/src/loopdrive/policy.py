"""Policy network: shared MLP trunk, two categorical action heads, four value heads.

Parameters are plain ``dict[str, np.ndarray]``. Losses build a
:class:`LossGraph` (scalar value plus gradients w.r.t. the network outputs)
and :func:`backward` pushes it through the trunk.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np

from .errors import NonScalarLoss, ShapeMismatch, VersionMismatch

VALUE_COMPONENTS = ("sc", "pd", "hd", "dc")
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class PolicyConfig:
    feature_dim: int
    n_x: int = 61
    n_y: int = 61
    hidden: tuple = (256, 256)
    activation: str = "tanh"
    head_init_scale: float = 0.01

    def __post_init__(self):
        if self.activation not in ("tanh", "relu"):
            raise ValueError(f"unknown activation {self.activation!r}")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    def fingerprint(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def param_shapes(cfg: PolicyConfig) -> dict:
    shapes = {}
    prev = cfg.feature_dim
    for i, h in enumerate(cfg.hidden):
        shapes[f"W{i}"] = (prev, h)
        shapes[f"b{i}"] = (h,)
        prev = h
    shapes["Wx"] = (prev, cfg.n_x)
    shapes["bx"] = (cfg.n_x,)
    shapes["Wy"] = (prev, cfg.n_y)
    shapes["by"] = (cfg.n_y,)
    shapes["Wv"] = (prev, len(VALUE_COMPONENTS))
    shapes["bv"] = (len(VALUE_COMPONENTS),)
    return shapes


def init_params(cfg: PolicyConfig, rng: np.random.Generator) -> dict:
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.startswith("b"):
            params[name] = np.zeros(shape)
        elif name == "Wv":
            params[name] = np.zeros(shape)
        else:
            scale = math.sqrt(1.0 / shape[0])
            if name in ("Wx", "Wy"):
                scale *= cfg.head_init_scale
            params[name] = rng.normal(0.0, scale, size=shape)
    return params


def zero_params(cfg: PolicyConfig) -> dict:
    return {k: np.zeros(s) for k, s in param_shapes(cfg).items()}


def n_parameters(cfg: PolicyConfig) -> int:
    return int(sum(np.prod(s) for s in param_shapes(cfg).values()))


def snapshot(params: dict) -> dict:
    """Read-only copy handed to rollout workers."""
    out = {}
    for k, v in params.items():
        a = np.array(v, copy=True)
        a.flags.writeable = False
        out[k] = a
    return out


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------


class ActionDistributions(NamedTuple):
    p_x: np.ndarray
    p_y: np.ndarray


class ValueEstimates(NamedTuple):
    v_sc: np.ndarray
    v_pd: np.ndarray
    v_hd: np.ndarray
    v_dc: np.ndarray

    @property
    def v_x(self):
        return self.v_sc + self.v_pd + self.v_hd

    @property
    def v_y(self):
        return self.v_dc

    def as_array(self) -> np.ndarray:
        return np.stack([self.v_sc, self.v_pd, self.v_hd, self.v_dc], axis=-1)


@dataclass
class Cache:
    x: np.ndarray
    acts: list  # post-activation outputs of each hidden layer
    logits_x: np.ndarray
    logits_y: np.ndarray
    values: np.ndarray  # (B, 4) in VALUE_COMPONENTS order
    logp_x: np.ndarray
    logp_y: np.ndarray
    activation: str

    @property
    def p_x(self):
        return np.exp(self.logp_x)

    @property
    def p_y(self):
        return np.exp(self.logp_y)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def _n_hidden(params: dict) -> int:
    n = 0
    while f"W{n}" in params:
        n += 1
    return n


def forward_cache(params: dict, features: np.ndarray, activation: str = "tanh") -> Cache:
    x = np.atleast_2d(np.asarray(features, dtype=np.float64))
    first = params["W0" if "W0" in params else "Wx"]
    if x.shape[1] != first.shape[0]:
        raise ShapeMismatch(f"features have dim {x.shape[1]}, network expects {first.shape[0]}")
    acts = []
    h = x
    for i in range(_n_hidden(params)):
        z = h @ params[f"W{i}"] + params[f"b{i}"]
        h = np.tanh(z) if activation == "tanh" else np.maximum(z, 0.0)
        acts.append(h)
    lx = h @ params["Wx"] + params["bx"]
    ly = h @ params["Wy"] + params["by"]
    vals = h @ params["Wv"] + params["bv"]
    return Cache(x, acts, lx, ly, vals, _log_softmax(lx), _log_softmax(ly), activation)


def forward(params: dict, features: np.ndarray, activation: str = "tanh"):
    """Action distributions and value estimates for one or more feature rows."""
    c = forward_cache(params, features, activation)
    single = np.ndim(features) == 1
    px, py, v = c.p_x, c.p_y, c.values
    if single:
        px, py, v = px[0], py[0], v[0]
    return ActionDistributions(px, py), ValueEstimates(*np.moveaxis(v, -1, 0))


@dataclass
class LossGraph:
    """A scalar loss with its gradient w.r.t. the network outputs of ``cache``."""

    value: np.ndarray
    cache: Cache
    d_logits_x: np.ndarray
    d_logits_y: np.ndarray
    d_values: np.ndarray
    parts: dict = field(default_factory=dict)

    @classmethod
    def zero(cls, cache: Cache) -> "LossGraph":
        return cls(
            np.float64(0.0),
            cache,
            np.zeros_like(cache.logits_x),
            np.zeros_like(cache.logits_y),
            np.zeros_like(cache.values),
        )

    def __add__(self, other: "LossGraph") -> "LossGraph":
        if other.cache is not self.cache:
            raise ValueError("cannot add losses built on different forward passes")
        parts = {**self.parts, **other.parts}
        return LossGraph(
            self.value + other.value,
            self.cache,
            self.d_logits_x + other.d_logits_x,
            self.d_logits_y + other.d_logits_y,
            self.d_values + other.d_values,
            parts,
        )

    def scale(self, w: float) -> "LossGraph":
        return LossGraph(
            w * self.value, self.cache, w * self.d_logits_x, w * self.d_logits_y, w * self.d_values, dict(self.parts)
        )


def backward(params: dict, graph: LossGraph) -> dict:
    """Reverse-mode gradients of ``graph.value`` w.r.t. every parameter."""
    if np.ndim(graph.value) != 0:
        raise NonScalarLoss(f"loss has shape {np.shape(graph.value)}")
    c = graph.cache
    n = _n_hidden(params)
    h = c.acts[-1] if n else c.x
    grads = {
        "Wx": h.T @ graph.d_logits_x,
        "bx": graph.d_logits_x.sum(axis=0),
        "Wy": h.T @ graph.d_logits_y,
        "by": graph.d_logits_y.sum(axis=0),
        "Wv": h.T @ graph.d_values,
        "bv": graph.d_values.sum(axis=0),
    }
    dh = graph.d_logits_x @ params["Wx"].T + graph.d_logits_y @ params["Wy"].T + graph.d_values @ params["Wv"].T
    for i in range(n - 1, -1, -1):
        a = c.acts[i]
        if c.activation == "tanh":
            dz = dh * (1.0 - a * a)
        else:
            dz = dh * (a > 0.0)
        prev = c.acts[i - 1] if i > 0 else c.x
        grads[f"W{i}"] = prev.T @ dz
        grads[f"b{i}"] = dz.sum(axis=0)
        if i > 0:
            dh = dz @ params[f"W{i}"].T
    return grads


def softmax_backward(p: np.ndarray, d_p: np.ndarray) -> np.ndarray:
    """Map a gradient w.r.t. probabilities to one w.r.t. logits (row-wise)."""
    return p * (d_p - np.sum(d_p * p, axis=-1, keepdims=True))


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


def _draw(p: np.ndarray, rng: np.random.Generator) -> int:
    cdf = np.cumsum(p)
    u = rng.random() * cdf[-1]
    return int(min(np.searchsorted(cdf, u, side="right"), len(p) - 1))


def sample_action(dists: ActionDistributions, rng: Optional[np.random.Generator], mode: str = "stochastic"):
    """Returns ``(i, j, logp_x, logp_y)``; greedy ties resolve to the lowest index."""
    if mode == "greedy":
        i = int(np.argmax(dists.p_x))
        j = int(np.argmax(dists.p_y))
    elif mode == "stochastic":
        i = _draw(dists.p_x, rng)
        j = _draw(dists.p_y, rng)
    else:
        raise ValueError(f"unknown sampling mode {mode!r}")
    return i, j, float(np.log(dists.p_x[i])), float(np.log(dists.p_y[j]))


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AdamWHyper:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4


@dataclass
class OptState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros_like(cls, params: dict) -> "OptState":
        return cls({k: np.zeros_like(a) for k, a in params.items()}, {k: np.zeros_like(a) for k, a in params.items()}, 0)


def adamw_step(params: dict, grads: dict, opt: OptState, hyper: AdamWHyper, lr: Optional[float] = None):
    """Decoupled-weight-decay Adam. Returns new ``(params, opt_state)``."""
    lr = hyper.lr if lr is None else lr
    t = opt.step + 1
    b1, b2 = hyper.beta1, hyper.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ShapeMismatch(f"gradient for {k} has shape {g.shape}, parameter {p.shape}")
        m = b1 * opt.m[k] + (1.0 - b1) * g
        v = b2 * opt.v[k] + (1.0 - b2) * g * g
        upd = (m / c1) / (np.sqrt(v / c2) + hyper.eps)
        new_p[k] = p - lr * (upd + hyper.weight_decay * p)
        new_m[k] = m
        new_v[k] = v
    return new_p, OptState(new_m, new_v, t)


def cosine_lr(base: float, step: int, total: int, floor: float = 0.0) -> float:
    if total <= 0:
        return base
    frac = min(max(step / total, 0.0), 1.0)
    return floor + (base - floor) * 0.5 * (1.0 + math.cos(math.pi * frac))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    config: PolicyConfig
    params: dict
    opt: OptState
    rng_state: Optional[dict] = None
    extra: dict = field(default_factory=dict)  # JSON-able trainer metadata
    arrays: dict = field(default_factory=dict)  # extra named arrays (e.g. rollout buffer)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    meta = {
        "version": CHECKPOINT_VERSION,
        "fingerprint": ckpt.config.fingerprint(),
        "config": asdict(ckpt.config),
        "opt_step": ckpt.opt.step,
        "rng_state": ckpt.rng_state,
        "extra": ckpt.extra,
        "tensors": {k: list(v.shape) for k, v in ckpt.params.items()},
    }
    blobs = {"meta": np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)}
    # canonical entry order: loaded dicts come back sorted
    for k in sorted(ckpt.params):
        v = ckpt.params[k]
        blobs[f"param/{k}"] = np.ascontiguousarray(v)
        blobs[f"m/{k}"] = np.ascontiguousarray(ckpt.opt.m[k])
        blobs[f"v/{k}"] = np.ascontiguousarray(ckpt.opt.v[k])
    for k in sorted(ckpt.arrays):
        v = ckpt.arrays[k]
        blobs[f"extra/{k}"] = np.ascontiguousarray(v)
    buf = io.BytesIO()
    # fixed timestamps so identical checkpoints are byte-identical files
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, arr in blobs.items():
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            with zf.open(info, "w", force_zip64=True) as fh:
                np.lib.format.write_array(fh, np.asanyarray(arr), allow_pickle=False)
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)


def load_checkpoint(path, expected: Optional[PolicyConfig] = None) -> Checkpoint:
    with np.load(Path(path), allow_pickle=False) as z:
        meta = json.loads(bytes(z["meta"]).decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise VersionMismatch(f"checkpoint version {meta.get('version')} != {CHECKPOINT_VERSION}")
        cfg_d = dict(meta["config"])
        cfg_d["hidden"] = tuple(cfg_d["hidden"])
        cfg = PolicyConfig(**cfg_d)
        if cfg.fingerprint() != meta["fingerprint"]:
            raise VersionMismatch("checkpoint fingerprint does not match its stored config")
        if expected is not None and expected.fingerprint() != cfg.fingerprint():
            raise VersionMismatch(f"checkpoint config {cfg} differs from expected {expected}")
        names = list(meta["tensors"])
        params = {k: np.array(z[f"param/{k}"]) for k in names}
        m = {k: np.array(z[f"m/{k}"]) for k in names}
        v = {k: np.array(z[f"v/{k}"]) for k in names}
        arrays = {k[len("extra/"):]: np.array(z[k]) for k in z.files if k.startswith("extra/")}
    return Checkpoint(cfg, params, OptState(m, v, meta["opt_step"]), meta.get("rng_state"), meta.get("extra", {}), arrays)
