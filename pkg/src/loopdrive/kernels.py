"""Hot numeric kernels.

Every kernel exists twice: a scalar-loop version compiled with numba and a
vectorised pure-numpy version. The module-level names (``obb_overlap``,
``project_polyline`` ...) point at whichever backend :mod:`loopdrive._jit`
selected; both variants stay importable under ``*_numba`` / ``*_numpy`` so
tests and ``benchmarks/bench_kernels.py`` can compare them.

Box layout used throughout: ``[cx, cy, psi, length, width]``.
"""

from __future__ import annotations

import math

import numpy as np

from ._jit import BACKEND, USE_NUMBA, njit

__all__ = [
    "BACKEND",
    "obb_overlap",
    "obb_overlap_many",
    "polygon_box_overlap",
    "project_polyline",
    "gae_backward",
]

TWO_PI = 2.0 * math.pi


# --------------------------------------------------------------------------
# oriented box vs oriented box (separating axes)
# --------------------------------------------------------------------------


def _obb_overlap_loop(a, b):
    ca = math.cos(a[2])
    sa = math.sin(a[2])
    cb = math.cos(b[2])
    sb = math.sin(b[2])
    dx = b[0] - a[0]
    dy = b[1] - a[1]
    hla = 0.5 * a[3]
    hwa = 0.5 * a[4]
    hlb = 0.5 * b[3]
    hwb = 0.5 * b[4]
    for k in range(4):
        if k == 0:
            ux, uy = ca, sa
        elif k == 1:
            ux, uy = -sa, ca
        elif k == 2:
            ux, uy = cb, sb
        else:
            ux, uy = -sb, cb
        ra = hla * abs(ux * ca + uy * sa) + hwa * abs(-ux * sa + uy * ca)
        rb = hlb * abs(ux * cb + uy * sb) + hwb * abs(-ux * sb + uy * cb)
        # strict: touching boxes count as overlapping
        if abs(ux * dx + uy * dy) > ra + rb:
            return False
    return True


def _obb_overlap_many_loop(a, boxes):
    n = boxes.shape[0]
    out = np.zeros(n, dtype=np.bool_)
    for i in range(n):
        out[i] = _obb_overlap_jit(a, boxes[i])
    return out


def _box_axes(psi):
    c = np.cos(psi)
    s = np.sin(psi)
    return np.stack([np.stack([c, s], -1), np.stack([-s, c], -1)], -2)


def obb_overlap_numpy(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return bool(obb_overlap_many_numpy(a, b[None, :])[0])


def obb_overlap_many_numpy(a, boxes):
    a = np.asarray(a, dtype=np.float64)
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 5)
    if boxes.shape[0] == 0:
        return np.zeros(0, dtype=bool)
    ea = _box_axes(a[2])  # (2, 2)
    eb = _box_axes(boxes[:, 2])  # (n, 2, 2)
    n = boxes.shape[0]
    axes = np.concatenate([np.broadcast_to(ea, (n, 2, 2)), eb], axis=1)  # (n, 4, 2)
    half_a = 0.5 * a[3:5]
    half_b = 0.5 * boxes[:, 3:5]
    ra = np.abs(np.einsum("nkd,jd->nkj", axes, ea)) @ half_a
    rb = np.einsum("nkj,nj->nk", np.abs(np.einsum("nkd,njd->nkj", axes, eb)), half_b)
    dist = np.abs(np.einsum("nkd,nd->nk", axes, boxes[:, :2] - a[:2]))
    return np.all(dist <= ra + rb, axis=1)


# --------------------------------------------------------------------------
# convex polygon vs oriented box
# --------------------------------------------------------------------------


def _polygon_box_overlap_loop(poly, box):
    c = math.cos(box[2])
    s = math.sin(box[2])
    hl = 0.5 * box[3]
    hw = 0.5 * box[4]
    m = poly.shape[0]
    for k in range(m + 2):
        if k == 0:
            ux, uy = c, s
        elif k == 1:
            ux, uy = -s, c
        else:
            i = k - 2
            j = (i + 1) % m
            ex = poly[j, 0] - poly[i, 0]
            ey = poly[j, 1] - poly[i, 1]
            norm = math.sqrt(ex * ex + ey * ey)
            if norm == 0.0:
                continue
            ux, uy = -ey / norm, ex / norm
        pmin = math.inf
        pmax = -math.inf
        for i in range(m):
            p = ux * poly[i, 0] + uy * poly[i, 1]
            if p < pmin:
                pmin = p
            if p > pmax:
                pmax = p
        center = ux * box[0] + uy * box[1]
        r = hl * abs(ux * c + uy * s) + hw * abs(-ux * s + uy * c)
        if center - r > pmax or center + r < pmin:
            return False
    return True


def polygon_box_overlap_numpy(poly, box):
    poly = np.asarray(poly, dtype=np.float64)
    box = np.asarray(box, dtype=np.float64)
    eb = _box_axes(box[2])
    edges = np.roll(poly, -1, axis=0) - poly
    norms = np.hypot(edges[:, 0], edges[:, 1])
    keep = norms > 0
    normals = np.stack([-edges[keep, 1], edges[keep, 0]], -1) / norms[keep, None]
    axes = np.concatenate([eb, normals], axis=0)
    proj = poly @ axes.T  # (m, k)
    center = axes @ box[:2]
    r = np.abs(axes @ eb.T) @ (0.5 * box[3:5])
    separated = (center - r > proj.max(axis=0)) | (center + r < proj.min(axis=0))
    return not bool(np.any(separated))


# --------------------------------------------------------------------------
# point to polyline projection
# --------------------------------------------------------------------------


def _wrap(a):
    r = a - TWO_PI * math.floor((a + math.pi) / TWO_PI)
    if r <= -math.pi:
        return r + TWO_PI
    return r


_wrap_py = _wrap


def _project_polyline_loop(px, py, pts, heads):
    """Returns (dist, heading, cross, arc_pos, segment, t)."""
    n = pts.shape[0]
    best = math.inf
    best_i = 0
    best_t = 0.0
    best_arc = 0.0
    cum = 0.0
    for i in range(n - 1):
        x0 = pts[i, 0]
        y0 = pts[i, 1]
        ex = pts[i + 1, 0] - x0
        ey = pts[i + 1, 1] - y0
        l2 = ex * ex + ey * ey
        seg = math.sqrt(l2)
        t = 0.0
        if l2 > 0.0:
            t = ((px - x0) * ex + (py - y0) * ey) / l2
            if t < 0.0:
                t = 0.0
            elif t > 1.0:
                t = 1.0
        fx = x0 + t * ex
        fy = y0 + t * ey
        d2 = (px - fx) * (px - fx) + (py - fy) * (py - fy)
        if d2 < best:
            best = d2
            best_i = i
            best_t = t
            best_arc = cum + t * seg
        cum += seg
    i = best_i
    t = best_t
    h0 = heads[i]
    heading = _wrap(h0 + t * _wrap(heads[i + 1] - h0))
    ex = pts[i + 1, 0] - pts[i, 0]
    ey = pts[i + 1, 1] - pts[i, 1]
    if ex * ex + ey * ey == 0.0:
        ex = math.cos(heading)
        ey = math.sin(heading)
    fx = pts[i, 0] + t * (pts[i + 1, 0] - pts[i, 0])
    fy = pts[i, 1] + t * (pts[i + 1, 1] - pts[i, 1])
    cross = ex * (py - fy) - ey * (px - fx)
    return math.sqrt(best), heading, cross, best_arc, i, t


def project_polyline_numpy(px, py, pts, heads):
    pts = np.asarray(pts, dtype=np.float64)
    heads = np.asarray(heads, dtype=np.float64)
    p = np.array([px, py], dtype=np.float64)
    e = np.diff(pts, axis=0)
    l2 = np.einsum("ij,ij->i", e, e)
    with np.errstate(invalid="ignore", divide="ignore"):
        t = np.where(l2 > 0, np.einsum("ij,ij->i", p - pts[:-1], e) / l2, 0.0)
    t = np.clip(t, 0.0, 1.0)
    foot = pts[:-1] + t[:, None] * e
    d2 = np.sum((p - foot) ** 2, axis=1)
    i = int(np.argmin(d2))
    seg = np.sqrt(l2)
    arc = float(np.sum(seg[:i]) + t[i] * seg[i])
    h0 = heads[i]
    heading = _wrap_py(h0 + t[i] * _wrap_py(heads[i + 1] - h0))
    ex, ey = e[i]
    if l2[i] == 0.0:
        ex, ey = math.cos(heading), math.sin(heading)
    cross = ex * (py - foot[i, 1]) - ey * (px - foot[i, 0])
    return math.sqrt(d2[i]), heading, float(cross), arc, i, float(t[i])


# --------------------------------------------------------------------------
# generalised advantage estimation
# --------------------------------------------------------------------------


def _gae_loop(rewards, values, next_values, episode_end, gamma, lam):
    T, C = rewards.shape
    adv = np.zeros((T, C))
    for c in range(C):
        running = 0.0
        for t in range(T - 1, -1, -1):
            if episode_end[t]:
                running = 0.0
            delta = rewards[t, c] + gamma * next_values[t, c] - values[t, c]
            running = delta + gamma * lam * running
            adv[t, c] = running
    return adv


def gae_backward_numpy(rewards, values, next_values, episode_end, gamma, lam):
    rewards = np.asarray(rewards, dtype=np.float64)
    delta = rewards + gamma * np.asarray(next_values, dtype=np.float64) - np.asarray(
        values, dtype=np.float64
    )
    adv = np.zeros_like(delta)
    running = np.zeros(delta.shape[1])
    for t in range(delta.shape[0] - 1, -1, -1):
        if episode_end[t]:
            running[:] = 0.0
        running = delta[t] + gamma * lam * running
        adv[t] = running
    return adv


# --------------------------------------------------------------------------
# compiled variants and dispatch
# --------------------------------------------------------------------------

_obb_overlap_jit = njit(cache=True)(_obb_overlap_loop)
obb_overlap_many_numba = njit(cache=True)(_obb_overlap_many_loop)
polygon_box_overlap_numba = njit(cache=True)(_polygon_box_overlap_loop)
_wrap = njit(cache=True)(_wrap)
project_polyline_numba = njit(cache=True)(_project_polyline_loop)
gae_backward_numba = njit(cache=True)(_gae_loop)


def obb_overlap_numba(a, b):
    return bool(_obb_overlap_jit(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)))


if USE_NUMBA:

    obb_overlap = obb_overlap_numba

    def obb_overlap_many(a, boxes):
        boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 5)
        return obb_overlap_many_numba(np.asarray(a, dtype=np.float64), boxes)

    def polygon_box_overlap(poly, box):
        return bool(
            polygon_box_overlap_numba(
                np.ascontiguousarray(poly, dtype=np.float64), np.asarray(box, dtype=np.float64)
            )
        )

    def project_polyline(px, py, pts, heads):
        return project_polyline_numba(
            float(px),
            float(py),
            np.ascontiguousarray(pts, dtype=np.float64),
            np.ascontiguousarray(heads, dtype=np.float64),
        )

    def gae_backward(rewards, values, next_values, episode_end, gamma, lam):
        return gae_backward_numba(
            np.ascontiguousarray(rewards, dtype=np.float64),
            np.ascontiguousarray(values, dtype=np.float64),
            np.ascontiguousarray(next_values, dtype=np.float64),
            np.ascontiguousarray(episode_end, dtype=np.bool_),
            float(gamma),
            float(lam),
        )

else:
    obb_overlap = obb_overlap_numpy
    obb_overlap_many = obb_overlap_many_numpy
    polygon_box_overlap = polygon_box_overlap_numpy
    project_polyline = project_polyline_numpy
    gae_backward = gae_backward_numpy
