"""Both kernel backends must agree; the env flag must select the fallback."""

import os
import subprocess
import sys

import numpy as np
import pytest

from loopdrive import kernels


def random_boxes(rng, n):
    return np.column_stack(
        [
            rng.uniform(-4, 4, n),
            rng.uniform(-4, 4, n),
            rng.uniform(-np.pi, np.pi, n),
            rng.uniform(0.3, 5.0, n),
            rng.uniform(0.3, 2.5, n),
        ]
    )


def test_obb_backends_agree():
    rng = np.random.default_rng(0)
    a = random_boxes(rng, 400)
    b = random_boxes(rng, 400)
    for x, y in zip(a, b):
        assert kernels.obb_overlap_numba(x, y) == kernels.obb_overlap_numpy(x, y)
    many_nb = kernels.obb_overlap_many_numba(a[0], b)
    many_np = kernels.obb_overlap_many_numpy(a[0], b)
    assert np.array_equal(many_nb, many_np)


def test_polygon_backends_agree():
    rng = np.random.default_rng(1)
    for _ in range(300):
        c = rng.uniform(-4, 4, 2)
        ang = np.sort(rng.uniform(0, 2 * np.pi, 5))
        poly = c + np.column_stack([np.cos(ang), np.sin(ang)]) * rng.uniform(0.3, 2.0)
        box = random_boxes(rng, 1)[0]
        assert kernels.polygon_box_overlap_numba(np.ascontiguousarray(poly), box) == kernels.polygon_box_overlap_numpy(poly, box)


def test_projection_backends_agree():
    rng = np.random.default_rng(2)
    pts = np.cumsum(rng.uniform(-1, 2, size=(30, 2)), axis=0)
    heads = rng.uniform(-np.pi, np.pi, 30)
    for _ in range(200):
        px, py = rng.uniform(-5, 40, 2)
        a = kernels.project_polyline_numba(px, py, pts, heads)
        b = kernels.project_polyline_numpy(px, py, pts, heads)
        assert np.allclose(a, b, rtol=0, atol=1e-12)


def test_gae_backends_agree():
    rng = np.random.default_rng(3)
    T = 200
    r = rng.normal(size=(T, 4))
    v = rng.normal(size=(T, 4))
    nv = rng.normal(size=(T, 4))
    ends = rng.uniform(size=T) < 0.1
    a = kernels.gae_backward_numba(r, v, nv, ends, 0.9, 0.95)
    b = kernels.gae_backward_numpy(r, v, nv, ends, 0.9, 0.95)
    assert np.allclose(a, b, rtol=0, atol=1e-12)


@pytest.mark.parametrize("flag,expected", [("1", "numpy"), ("0", "numba")])
def test_env_flag_selects_backend(flag, expected):
    env = dict(os.environ, LOOPDRIVE_DISABLE_NUMBA=flag)
    out = subprocess.run(
        [sys.executable, "-c", "from loopdrive import kernels; print(kernels.BACKEND, kernels.gae_backward.__name__)"],
        env=env,
        capture_output=True,
        text=True,
        check=True,
    ).stdout.split()
    assert out[0] == expected
    if expected == "numpy":
        assert out[1] == "gae_backward_numpy"


def test_fallback_backend_runs_an_episode():
    code = (
        "from loopdrive.scenario import synth_scenario\n"
        "from loopdrive.env import play_expert\n"
        "s = synth_scenario(3, 'lead_vehicle_braking')\n"
        "print(play_expert(s)[-1][3].termination)\n"
    )
    env = dict(os.environ, LOOPDRIVE_DISABLE_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True).stdout
    assert out.strip() == "clip_end"
