"""Numba vs pure-numpy timings for the hot kernels.

Run with ``python benchmarks/bench_kernels.py``. The per-kernel section calls
both variants in one process; the end-to-end section replays expert clips in
two subprocesses, one per value of ``LOOPDRIVE_DISABLE_NUMBA``.
"""

from __future__ import annotations

import argparse
import os
import subprocess
import sys
import time

import numpy as np

from loopdrive import kernels
from loopdrive.scenario import synth_scenario


def timeit(fn, iterations: int) -> float:
    fn()  # warm-up, includes compilation
    start = time.perf_counter()
    for _ in range(iterations):
        fn()
    return (time.perf_counter() - start) / iterations


def cases(rng):
    box = np.array([0.0, 0.0, 0.3, 4.6, 1.9])
    boxes = np.column_stack([rng.uniform(-20, 20, (32, 2)), rng.uniform(-3, 3, 32), np.full(32, 4.5), np.full(32, 1.8)])
    poly = np.array([[1.0, -1.0], [3.0, -1.0], [3.5, 1.0], [1.0, 1.5]])
    scn = synth_scenario(0, "static_detour")
    pts = np.ascontiguousarray(scn.expert_traj[:, 1:3])
    heads = np.ascontiguousarray(scn.expert_traj[:, 3])
    T = 200
    r, v, nv = rng.normal(size=(T, 4)), rng.normal(size=(T, 4)), rng.normal(size=(T, 4))
    ends = np.zeros(T, dtype=bool)
    ends[49::50] = True
    return {
        "obb_overlap": (
            lambda: kernels.obb_overlap_numpy(box, boxes[0]),
            lambda: kernels.obb_overlap_numba(box, boxes[0]),
        ),
        "obb_overlap_many (32 boxes)": (
            lambda: kernels.obb_overlap_many_numpy(box, boxes),
            lambda: kernels.obb_overlap_many_numba(box, boxes),
        ),
        "polygon_box_overlap": (
            lambda: kernels.polygon_box_overlap_numpy(poly, box),
            lambda: kernels.polygon_box_overlap_numba(poly, box),
        ),
        f"project_polyline ({len(pts)} pts)": (
            lambda: kernels.project_polyline_numpy(5.0, 0.7, pts, heads),
            lambda: kernels.project_polyline_numba(5.0, 0.7, pts, heads),
        ),
        f"gae_backward ({T}x4)": (
            lambda: kernels.gae_backward_numpy(r, v, nv, ends, 0.9, 0.95),
            lambda: kernels.gae_backward_numba(r, v, nv, ends, 0.9, 0.95),
        ),
    }


_EPISODES = """
import time
from loopdrive.env import play_expert
from loopdrive.kernels import BACKEND
from loopdrive.scenario import TEMPLATES, synth_scenario
clips = [synth_scenario(s, TEMPLATES[s % len(TEMPLATES)]) for s in range({n})]
play_expert(clips[0])
t0 = time.perf_counter()
steps = sum(len(play_expert(c)) for c in clips)
print(BACKEND, steps, time.perf_counter() - t0)
"""


def end_to_end(n: int) -> None:
    print(f"\nexpert replay of {n} clips")
    for flag in ("1", "0"):
        env = {**os.environ, "LOOPDRIVE_DISABLE_NUMBA": flag}
        out = subprocess.run([sys.executable, "-c", _EPISODES.format(n=n)], env=env, capture_output=True, text=True, check=True)
        backend, steps, secs = out.stdout.split()
        secs = float(secs)
        print(f"  {backend:6s} {secs:7.3f} s  {1e6 * secs / int(steps):8.1f} us/step")


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--iterations", type=int, default=2000)
    ap.add_argument("--clips", type=int, default=20)
    args = ap.parse_args(argv)

    print(f"{'kernel':32s} {'numpy us':>10s} {'numba us':>10s} {'speedup':>8s}")
    for name, (np_fn, nb_fn) in cases(np.random.default_rng(0)).items():
        a, b = timeit(np_fn, args.iterations), timeit(nb_fn, args.iterations)
        print(f"{name:32s} {1e6 * a:10.2f} {1e6 * b:10.2f} {a / b:7.1f}x")
    if args.clips:
        end_to_end(args.clips)


if __name__ == "__main__":
    main()
