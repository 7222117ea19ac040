"""Shared helpers: small rigid-geometry generators independent of the
production code, used as oracles for the epipolar module."""

from __future__ import annotations

import numpy as np
import pytest


def rodrigues(axis: np.ndarray, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    kx, ky, kz = axis
    k = np.array([[0, -kz, ky], [kz, 0, -kx], [-ky, kx, 0]])
    return np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)


def skew(t: np.ndarray) -> np.ndarray:
    return np.array([[0, -t[2], t[1]], [t[2], 0, -t[0]], [-t[1], t[0], 0]])


def intrinsics(f: float = 120.0, cx: float = 64.0, cy: float = 48.0) -> np.ndarray:
    return np.array([[f, 0, cx], [0, f, cy], [0, 0, 1.0]])


def project(k: np.ndarray, points_cam: np.ndarray) -> np.ndarray:
    p = points_cam @ k.T
    return p[:, :2] / p[:, 2:3]


def rigid_scene(
    seed: int,
    n_points: int = 24,
    rotation: float = 0.02,
    baseline: float = 0.5,
    coplanar: bool = False,
):
    """Random 3-D point cloud seen from two poses.

    Returns (p1, p2, f_true) where f_true is the unnormalized fundamental
    matrix mapping view-1 points to view-2 lines.
    """
    rng = np.random.default_rng(seed)
    k = intrinsics()
    pts = np.column_stack(
        [
            rng.uniform(-4, 4, n_points),
            rng.uniform(-3, 3, n_points),
            rng.uniform(8, 20, n_points),
        ]
    )
    if coplanar:
        normal = rng.standard_normal(3)
        normal /= np.linalg.norm(normal)
        normal[2] = max(abs(normal[2]), 0.5)
        d = 12.0
        # project points onto the plane normal . X = d
        pts -= ((pts @ normal - d) / (normal @ normal))[:, None] * normal
    axis = rng.standard_normal(3)
    r = rodrigues(axis, rotation)
    c = rng.uniform(-1, 1, 3) * baseline
    c[2] = abs(c[2])  # move forward
    p1 = project(k, pts)
    p2 = project(k, (pts - c) @ r.T)
    kinv = np.linalg.inv(k)
    t = -r @ c
    f_true = kinv.T @ skew(t) @ r @ kinv
    return p1, p2, f_true


def flow_volume(u, v, valid, window):
    """Cost volume with one candidate per valid pixel: the rounded flow."""
    from rigidflow.costvol import TopKCostVolume

    h, w = u.shape
    ids = np.full((h, w, 1), -1, dtype=np.int64)
    scores = np.full((h, w, 1), -np.inf)
    du = np.rint(u).astype(np.int64)
    dv = np.rint(v).astype(np.int64)
    ok = valid & window.contains(du, dv)
    ids[ok, 0] = window.id_of(du[ok], dv[ok])
    scores[ok, 0] = 5.0
    return TopKCostVolume(ids=ids, scores=scores, window=window, k=1)


def blob_volume(u, v, valid, window):
    """3x3 candidates around the true target with Gaussian scores.

    Gives graded profiles like an aggregated matcher volume, so parabolic
    sub-pixel refinement has something to work with."""
    from rigidflow.costvol import TopKCostVolume

    h, w = u.shape
    base_u = np.floor(u).astype(np.int64)
    base_v = np.floor(v).astype(np.int64)
    su, sv, ss = [], [], []
    for b in (-1, 0, 1):
        for a in (-1, 0, 1):
            cu, cv = base_u + a, base_v + b
            su.append(cu)
            sv.append(cv)
            ss.append(5.0 * np.exp(-0.5 * ((cu - u) ** 2 + (cv - v) ** 2)))
    su, sv, ss = np.stack(su, -1), np.stack(sv, -1), np.stack(ss, -1)
    order = np.argsort(-ss, axis=-1, kind="stable")
    su = np.take_along_axis(su, order, -1)
    sv = np.take_along_axis(sv, order, -1)
    ss = np.take_along_axis(ss, order, -1)
    ok = valid[:, :, None] & window.contains(su, sv)
    ids = np.where(ok, window.id_of(su, sv), -1)
    scores = np.where(ok, ss, -np.inf)
    order = np.argsort(~ok, axis=-1, kind="stable")  # padding after real slots
    ids = np.take_along_axis(ids, order, -1)
    scores = np.take_along_axis(scores, order, -1)
    return TopKCostVolume(ids=ids, scores=scores, window=window, k=9)


def scatter_backward(flow, window):
    """Reverse volume built by scattering forward targets into frame 2."""
    h, w = flow.u.shape
    bu = np.zeros((h, w))
    bv = np.zeros((h, w))
    bval = np.zeros((h, w), dtype=bool)
    ys, xs = np.nonzero(flow.valid)
    tx = np.rint(xs + flow.u[ys, xs]).astype(np.int64)
    ty = np.rint(ys + flow.v[ys, xs]).astype(np.int64)
    ok = (tx >= 0) & (tx < w) & (ty >= 0) & (ty < h)
    bu[ty[ok], tx[ok]] = -flow.u[ys, xs][ok]
    bv[ty[ok], tx[ok]] = -flow.v[ys, xs][ok]
    bval[ty[ok], tx[ok]] = True
    return blob_volume(bu, bv, bval, window)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
