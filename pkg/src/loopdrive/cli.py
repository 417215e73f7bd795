"""Command-line entry point: ``loopdrive {gen,pretrain,train,eval,replay,repro}``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .config import RunConfig
from .errors import LoopDriveError, ParseError, SchemaError, VersionMismatch
from .il import build_dataset, pretrain, write_loss_csv
from .metrics import EXPERT, EpisodeLog, run_benchmark, trace_svg, write_report
from .policy import Checkpoint, init_params, load_checkpoint, save_checkpoint
from .repro import majority, run_seed
from .rollout import WorkerPool
from .scenario import TEMPLATES, load_scenario, save_scenario, synth_scenario
from .train import Trainer, read_log, write_log

log = logging.getLogger("loopdrive")

RUNS_ENV = "LOOPDRIVE_RUNS"
EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3


class UsageError(Exception):
    """Bad arguments, config or missing inputs (exit code 2)."""


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def clip_seed(seed: int, k: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(k)]).generate_state(1)[0])


def load_manifest(path) -> list:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"manifest not found: {path}")
    try:
        man = json.loads(path.read_text(encoding="utf-8"))
        entries = man["clips"]
    except (ValueError, KeyError) as exc:
        raise UsageError(f"malformed manifest {path}: {exc}") from exc
    return [load_scenario(path.parent / e["file"]) for e in entries]


def _load_config(path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config not found: {p}")
    try:
        return RunConfig.load(p)
    except SchemaError as exc:
        raise UsageError(f"{p}: {exc}") from exc
    except ValueError as exc:  # TOML/JSON decode errors subclass ValueError
        raise UsageError(f"{p}: cannot parse config: {exc}") from exc


def _manifest_from(cfg: RunConfig, key: str, override: Optional[str]) -> list:
    ref = override or cfg.raw["suite"][key]
    if not ref:
        raise UsageError(f"no {key} given (set suite.{key} in the config or pass it on the command line)")
    return load_manifest(cfg.resolve(ref) if override is None else Path(override))


def run_dir(args, cfg: Optional[RunConfig], kind: str) -> Path:
    if getattr(args, "run_dir", None):
        d = Path(args.run_dir)
    else:
        root = Path(os.environ.get(RUNS_ENV, "runs"))
        stem = cfg.source.stem if cfg is not None and cfg.source else "run"
        seed = cfg.seed if cfg is not None else 0
        d = root / f"{kind}-{stem}-seed{seed}"
    (d / "checkpoints").mkdir(parents=True, exist_ok=True)
    return d


def _write_immutable(path: Path, ckpt: Checkpoint) -> None:
    if path.exists():
        raise UsageError(f"refusing to overwrite checkpoint {path}")
    save_checkpoint(path, ckpt)


def _snapshot_config(d: Path, cfg: RunConfig) -> None:
    (d / "config.json").write_text(cfg.dumps(), encoding="utf-8")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen(args) -> int:
    templates = args.template.split(",") if args.template != "mix" else list(TEMPLATES)
    for t in templates:
        if t not in TEMPLATES:
            raise UsageError(f"unknown template {t!r}; choose from {', '.join(TEMPLATES)} or 'mix'")
    if args.count < 0:
        raise UsageError("count must be >= 0")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for k in range(args.count):
        t = templates[k % len(templates)]
        scn = synth_scenario(clip_seed(args.seed, k), t)
        fname = f"{k:04d}_{scn.id}.json"
        save_scenario(out / fname, scn)
        entries.append({"id": scn.id, "template": t, "file": fname})
    manifest = {"seed": args.seed, "templates": templates, "clips": entries}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    print(f"wrote {len(entries)} scenarios to {out}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = _load_config(args.config)
    if args.steps is not None:
        cfg = cfg.with_overrides(pretrain={"steps": args.steps})
    suite = _manifest_from(cfg, "train_manifest", args.manifest)
    d = run_dir(args, cfg, "pretrain")
    _snapshot_config(d, cfg)
    pcfg = cfg.policy
    params = init_params(pcfg, np.random.default_rng(int(cfg.raw["policy"]["init_seed"])))
    ds = build_dataset(suite, cfg.env, cfg.features)
    losses: list = []
    params, opt = pretrain(ds, params, cfg.grid, cfg.pretrain, None, pcfg.activation, losses)
    write_loss_csv(d / "pretrain_log.csv", losses)
    extra = {"stage": "pretrain", "steps": cfg.pretrain.steps, "samples": len(ds)}
    out = d / "checkpoints" / "stage2.npz"
    _write_immutable(out, Checkpoint(pcfg, params, opt, {"seed": cfg.seed}, extra))
    tail = f", final loss {losses[-1][1]:.4f}" if losses else ""
    print(f"stage-2 checkpoint: {out} ({len(ds)} samples, {len(losses)} steps{tail})")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    over = {}
    if args.cycles is not None:
        over["train"] = {"cycles": args.cycles}
    if args.workers is not None:
        over["rl"] = {"workers": args.workers}
    if over:
        cfg = cfg.with_overrides(**over)
    if not args.resume and not args.from_ckpt:
        raise UsageError("train needs --from STAGE2_CKPT or --resume CKPT")
    suite = _manifest_from(cfg, "train_manifest", args.manifest)
    d = run_dir(args, cfg, "train")
    pcfg = cfg.policy
    post = cfg.post
    demos = build_dataset(suite, cfg.env, cfg.features)
    backend = args.backend or cfg.raw["train"]["backend"]
    pool = WorkerPool(suite, cfg.rollout_spec, cfg.rl.workers, backend)
    log_path = d / "train_log.csv"
    try:
        if args.resume:
            trainer = Trainer.resume(args.resume, pcfg, post, pool, demos)
            rows = [r for r in read_log(log_path) if int(r["cycle"]) < trainer.state.cycle] if log_path.exists() else []
            write_log(log_path, rows)
        else:
            ck = load_checkpoint(args.from_ckpt, pcfg)
            _snapshot_config(d, cfg)
            trainer = Trainer.from_params(pcfg, post, pool, demos, ck.params)
            write_log(log_path, [])
        every = max(int(cfg.raw["train"]["checkpoint_every"]), 1)

        def on_cycle(tr, rows):
            write_log(log_path, rows, append=True)
            c = tr.state.cycle
            if c % every == 0 or c == post.cycles:
                _write_immutable(d / "checkpoints" / f"cycle_{c:04d}.npz", tr.checkpoint())
            print(f"cycle {c}/{post.cycles} " + " ".join(_round_summary(r) for r in rows), flush=True)

        trainer.train(on_cycle=on_cycle)
    finally:
        pool.close()
    final = d / "checkpoints" / f"cycle_{trainer.state.cycle:04d}.npz"
    print(f"final checkpoint: {final}")
    return EXIT_OK


def _round_summary(r: dict) -> str:
    if r["kind"] == "rl":
        return f"[rl{r['round']} ppo={r.get('ppo', float('nan')):.4f} {r['terminations']}]"
    return f"[il il={r.get('il', float('nan')):.4f}]"


def cmd_eval(args) -> int:
    cfg = _load_config(args.config) if args.config else RunConfig.from_dict({})
    suite = _manifest_from(cfg, "eval_manifest", args.suite)
    if args.expert:
        policy = EXPERT
    elif args.ckpt:
        policy = load_checkpoint(args.ckpt, cfg.policy).params
    else:
        raise UsageError("eval needs --ckpt CKPT or --expert")
    report, logs = run_benchmark(policy, suite, cfg.bench)
    out = Path(args.out)
    (out / "logs").mkdir(parents=True, exist_ok=True)
    write_report(report, out / "report.json", out / "report.csv")
    for k, lg in enumerate(logs):
        (out / "logs" / f"{k:04d}_{lg.clip_id}.jsonl").write_text(lg.to_jsonl(), encoding="utf-8")
    print(report.table())
    return EXIT_OK


def cmd_replay(args) -> int:
    p = Path(args.log)
    if not p.is_file():
        raise UsageError(f"episode log not found: {p}")
    lg = EpisodeLog.from_jsonl(p.read_text(encoding="utf-8"))
    Path(args.out).write_text(trace_svg(lg), encoding="utf-8")
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_repro(args) -> int:
    cfg = _load_config(args.config)
    results = []
    for seed in args.seeds:
        r = run_seed(cfg, seed, args.cycles, args.backend)
        print(r.line(), flush=True)
        results.append(r)
    ok = majority(results)
    print(f"majority: {'PASS' if ok else 'FAIL'} ({sum(r.passed for r in results)}/{len(results)})")
    return EXIT_OK if ok else 1


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="loopdrive", description="Closed-loop RL+IL driving policy toolkit.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic scenario suite")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--template", default="mix", help="template name, comma list, or 'mix'")
    g.add_argument("--count", type=int, default=10)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    p = sub.add_parser("pretrain", help="imitation pre-training (stage 2)")
    p.add_argument("config")
    p.add_argument("--steps", type=int)
    p.add_argument("--manifest", help="override suite.train_manifest")
    p.add_argument("--run-dir")
    p.set_defaults(func=cmd_pretrain)

    t = sub.add_parser("train", help="reinforced post-training")
    t.add_argument("config")
    t.add_argument("--from", dest="from_ckpt")
    t.add_argument("--resume")
    t.add_argument("--cycles", type=int)
    t.add_argument("--workers", type=int)
    t.add_argument("--backend", choices=("auto", "inline", "thread", "process"))
    t.add_argument("--manifest", help="override suite.train_manifest")
    t.add_argument("--run-dir")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="closed-loop benchmark")
    e.add_argument("--config")
    e.add_argument("--ckpt")
    e.add_argument("--expert", action="store_true", help="replay the expert instead of a policy")
    e.add_argument("--suite", help="scenario manifest (defaults to suite.eval_manifest)")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("replay", help="render an episode log as SVG")
    r.add_argument("log")
    r.add_argument("out")
    r.set_defaults(func=cmd_replay)

    d = sub.add_parser("repro", help="stage-2 vs post-trained CR/ADD on generated suites")
    d.add_argument("config")
    d.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    d.add_argument("--cycles", type=int)
    d.add_argument("--backend", default="inline", choices=("inline", "thread", "process"))
    d.set_defaults(func=cmd_repro)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except (UsageError, VersionMismatch, ParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (LoopDriveError, OSError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
