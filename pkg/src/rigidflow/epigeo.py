"""Two-view epipolar geometry for rigid bodies.

Fundamental matrices are canonicalized to rank 2, unit Frobenius norm and
positive largest-magnitude entry, so equal geometries compare equal.
Flow is decomposed as an affine rotational field plus a 1-D translational
move along the epipolar line, oriented away from the epipole.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

COLLINEAR_RTOL = 1e-8  # singular-value ratio below which samples are collinear
LSTSQ_RCOND = 1e-6


class DegenerateGeometryError(Exception):
    """Raised when a geometric estimate is not recoverable from the input."""


class DegenerateLineError(Exception):
    """Raised when an epipolar line is undefined (point maps to zero)."""


@dataclass(frozen=True)
class FundamentalMatrix:
    """Canonical rank-2 fundamental matrix with p2~' F p1~ = 0."""

    m: np.ndarray

    def __post_init__(self) -> None:
        m = np.ascontiguousarray(self.m, dtype=np.float64)
        if m.shape != (3, 3):
            raise ValueError("fundamental matrix must be 3x3")
        m = canonicalize(m)
        m.flags.writeable = False
        object.__setattr__(self, "m", m)

    def transpose(self) -> "FundamentalMatrix":
        """Geometry of the swapped view pair."""
        return FundamentalMatrix(self.m.T)


def canonicalize(m: np.ndarray) -> np.ndarray:
    """Project to rank 2, scale to unit Frobenius norm, fix the sign."""
    u, s, vt = np.linalg.svd(m)
    if s[1] <= 0:
        raise DegenerateGeometryError("matrix has rank < 2")
    s = s.copy()
    s[2] = 0.0
    out = (u * s) @ vt
    out /= np.linalg.norm(out)
    flat = np.abs(out).ravel()
    if out.ravel()[int(np.argmax(flat))] < 0:
        out = -out
    return out


def _homogeneous(points: np.ndarray) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    return np.concatenate([points, np.ones((*points.shape[:-1], 1))], axis=-1)


def _hartley_transform(points: np.ndarray) -> np.ndarray:
    """Batched similarity transforms mapping points to centroid 0, rms sqrt(2).

    points: (..., N, 2) -> transforms (..., 3, 3).  Raises if any batch item
    is degenerate (all points coincident).
    """
    centroid = points.mean(axis=-2, keepdims=True)
    centered = points - centroid
    mean_dist = np.sqrt((centered**2).sum(axis=-1)).mean(axis=-1)
    if np.any(mean_dist <= 0):
        raise DegenerateGeometryError("coincident points")
    scale = np.sqrt(2.0) / mean_dist
    t = np.zeros((*points.shape[:-2], 3, 3))
    t[..., 0, 0] = scale
    t[..., 1, 1] = scale
    t[..., 2, 2] = 1.0
    t[..., 0, 2] = -scale * centroid[..., 0, 0]
    t[..., 1, 2] = -scale * centroid[..., 0, 1]
    return t


def _collinearity_ratio(points: np.ndarray) -> np.ndarray:
    """Ratio of second to first singular value of centered coordinates."""
    centered = points - points.mean(axis=-2, keepdims=True)
    s = np.linalg.svd(centered, compute_uv=False)
    return s[..., 1] / np.maximum(s[..., 0], 1e-300)


def _design_matrix(p1n: np.ndarray, p2n: np.ndarray) -> np.ndarray:
    x1, y1 = p1n[..., 0], p1n[..., 1]
    x2, y2 = p2n[..., 0], p2n[..., 1]
    ones = np.ones_like(x1)
    return np.stack(
        [x2 * x1, x2 * y1, x2, y2 * x1, y2 * y1, y2, x1, y1, ones], axis=-1
    )


def _apply_transform(t: np.ndarray, points: np.ndarray) -> np.ndarray:
    ph = _homogeneous(points)
    out = ph @ np.swapaxes(t, -1, -2)
    return out[..., :2] / out[..., 2:3]


def eight_point(p1: np.ndarray, p2: np.ndarray) -> FundamentalMatrix:
    """Normalized eight-point estimate from matched points (N >= 8).

    Coplanar scene content leaves a solution family; a deterministic member
    is returned, whose epipolar lines still pass through the true matches.
    Near-collinear configurations are rejected.
    """
    p1 = np.asarray(p1, dtype=np.float64)
    p2 = np.asarray(p2, dtype=np.float64)
    if p1.shape != p2.shape or p1.ndim != 2 or p1.shape[1] != 2:
        raise ValueError("matches must be two (N, 2) arrays of equal shape")
    if p1.shape[0] < 8:
        raise ValueError(f"need at least 8 matches, got {p1.shape[0]}")
    if (
        _collinearity_ratio(p1) < COLLINEAR_RTOL
        or _collinearity_ratio(p2) < COLLINEAR_RTOL
    ):
        raise DegenerateGeometryError("matched points are near-collinear")
    t1 = _hartley_transform(p1)
    t2 = _hartley_transform(p2)
    a = _design_matrix(_apply_transform(t1, p1), _apply_transform(t2, p2))
    _, _, vt = np.linalg.svd(a)
    f_norm = vt[-1].reshape(3, 3)
    f = t2.T @ f_norm @ t1
    return FundamentalMatrix(f)


def epipolar_lines(f: FundamentalMatrix, points: np.ndarray) -> np.ndarray:
    """Lines F p~ in the second image, normalized to a^2 + b^2 = 1.

    Returns (N, 3); rows where the line is undefined are NaN.
    """
    lines = _homogeneous(np.atleast_2d(points)) @ f.m.T
    norm = np.hypot(lines[:, 0], lines[:, 1])
    bad = norm < 1e-12
    norm = np.where(bad, 1.0, norm)
    lines = lines / norm[:, None]
    lines[bad] = np.nan
    return lines


def epipolar_line(f: FundamentalMatrix, point: np.ndarray) -> np.ndarray:
    line = epipolar_lines(f, np.asarray(point, dtype=np.float64)[None])[0]
    if not np.isfinite(line).all():
        raise DegenerateLineError("point maps to the zero line (epipole)")
    return line


def point_line_distance(points: np.ndarray, lines: np.ndarray) -> np.ndarray:
    """Unsigned distance from points (N, 2) to normalized lines (N, 3)."""
    points = np.atleast_2d(points)
    return np.abs(
        lines[:, 0] * points[:, 0] + lines[:, 1] * points[:, 1] + lines[:, 2]
    )


def epipolar_distances(
    f: FundamentalMatrix, p1: np.ndarray, p2: np.ndarray
) -> np.ndarray:
    """Distance of each p2 to the epipolar line of its p1 (NaN if undefined)."""
    return point_line_distance(np.atleast_2d(p2), epipolar_lines(f, p1))


def epipole_of(f: FundamentalMatrix) -> np.ndarray:
    """Left epipole o' with o'^T F = 0, as a canonical homogeneous 3-vector.

    Finite epipoles are scaled to w = 1; epipoles at infinity get w = 0,
    unit direction norm, and a positive leading component.
    """
    u, _, _ = np.linalg.svd(f.m)
    e = u[:, 2]
    xy_norm = np.hypot(e[0], e[1])
    if abs(e[2]) > 1e-12 * max(xy_norm, 1.0):
        return np.array([e[0] / e[2], e[1] / e[2], 1.0])
    if xy_norm == 0:
        raise DegenerateGeometryError("null epipole")
    e = np.array([e[0] / xy_norm, e[1] / xy_norm, 0.0])
    lead = e[0] if e[0] != 0 else e[1]
    return e if lead > 0 else -e


def radial_frame(
    epipole: np.ndarray, points: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Unit directions away from the epipole and distances to it.

    For an epipole at infinity every direction equals the epipole's
    direction component and all distances are +inf.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if epipole[2] != 0:
        diff = points - epipole[:2]
        dist = np.hypot(diff[:, 0], diff[:, 1])
        safe = np.maximum(dist, 1e-300)
        return diff / safe[:, None], dist
    dirs = np.tile(epipole[:2], (points.shape[0], 1))
    return dirs, np.full(points.shape[0], np.inf)


def epipolar_disparity(
    p_rect: np.ndarray, p2: np.ndarray, epipole: np.ndarray
) -> np.ndarray:
    """Signed move from rectified points to matches, positive away from o'."""
    p_rect = np.atleast_2d(np.asarray(p_rect, dtype=np.float64))
    p2 = np.atleast_2d(np.asarray(p2, dtype=np.float64))
    dirs, dist = radial_frame(epipole, p_rect)
    if epipole[2] != 0 and np.any(dist < 1e-9):
        raise DegenerateGeometryError("rectified point coincides with epipole")
    diff = p2 - p_rect
    return (diff * dirs).sum(axis=1)


@dataclass(frozen=True)
class EpipolarFrame:
    """Rigid-body view pair: geometry, left epipole and rotational field."""

    f: FundamentalMatrix
    epipole: np.ndarray  # canonical homogeneous, w = 1 or 0 (infinite)
    rotation: RotationalFlowModel

    def __post_init__(self) -> None:
        residual = np.abs(self.epipole @ self.f.m).max()
        if residual > 1e-9 * max(np.linalg.norm(self.epipole), 1.0):
            raise ValueError("epipole is not the left null vector of F")

    def backward(self, points2: np.ndarray) -> "EpipolarFrame":
        """Frame of the swapped view pair, refit on image-2 points."""
        return make_frame(self.f.transpose(), points2)


def make_frame(f: FundamentalMatrix, points: np.ndarray) -> EpipolarFrame:
    """Assemble the frame used for 1-D matching along epipolar lines."""
    return EpipolarFrame(f, epipole_of(f), fit_rotational_flow(points, f))


@dataclass(frozen=True)
class RansacResult:
    f: FundamentalMatrix
    inliers: np.ndarray  # boolean mask over the input matches
    median_error: float  # median point-to-line distance over all matches


def _sample_octets(
    rng: np.random.Generator, n: int, iterations: int
) -> np.ndarray:
    """(iterations, 8) index rows without repeats inside a row."""
    idx = rng.integers(0, n, size=(iterations, 8))
    while True:
        bad = (np.diff(np.sort(idx, axis=1), axis=1) == 0).any(axis=1)
        if not bad.any():
            return idx
        # redraw clashing rows; tiny n may need the exact sampler
        if n >= 64:
            idx[bad] = rng.integers(0, n, size=(int(bad.sum()), 8))
        else:
            for i in np.nonzero(bad)[0]:
                idx[i] = rng.choice(n, size=8, replace=False)


def ransac_f(
    p1: np.ndarray,
    p2: np.ndarray,
    iterations: int = 2000,
    threshold: float = 1.0,
    seed: int = 0,
) -> RansacResult:
    """Eight-point RANSAC scored by median squared point-to-line distance.

    All hypotheses are evaluated; the smallest median wins (ties: lowest
    iteration index).  The final matrix is refit on the winning inliers and
    the reported inlier set is consistent with the refit matrix.
    """
    p1 = np.asarray(p1, dtype=np.float64)
    p2 = np.asarray(p2, dtype=np.float64)
    n = p1.shape[0]
    if n < 8:
        raise ValueError(f"need at least 8 matches, got {n}")
    rng = np.random.default_rng(seed)
    idx = _sample_octets(rng, n, iterations)
    s1, s2 = p1[idx], p2[idx]

    ok = (_collinearity_ratio(s1) >= COLLINEAR_RTOL) & (
        _collinearity_ratio(s2) >= COLLINEAR_RTOL
    )
    # Batched Hartley-normalized eight-point over all sample sets.
    cent1 = s1.mean(axis=1, keepdims=True)
    cent2 = s2.mean(axis=1, keepdims=True)
    d1 = np.sqrt(((s1 - cent1) ** 2).sum(-1)).mean(-1)
    d2 = np.sqrt(((s2 - cent2) ** 2).sum(-1)).mean(-1)
    ok &= (d1 > 0) & (d2 > 0)
    sc1 = np.sqrt(2.0) / np.where(d1 > 0, d1, 1.0)
    sc2 = np.sqrt(2.0) / np.where(d2 > 0, d2, 1.0)
    n1 = (s1 - cent1) * sc1[:, None, None]
    n2 = (s2 - cent2) * sc2[:, None, None]
    a = _design_matrix(n1, n2)
    _, _, vt = np.linalg.svd(a)
    f_norm = vt[:, -1].reshape(-1, 3, 3)
    # Denormalize: F = T2^T Fn T1 with T = [[s,0,-s cx],[0,s,-s cy],[0,0,1]].
    t1 = np.zeros((iterations, 3, 3))
    t1[:, 0, 0] = sc1
    t1[:, 1, 1] = sc1
    t1[:, 2, 2] = 1.0
    t1[:, 0, 2] = -sc1 * cent1[:, 0, 0]
    t1[:, 1, 2] = -sc1 * cent1[:, 0, 1]
    t2 = np.zeros_like(t1)
    t2[:, 0, 0] = sc2
    t2[:, 1, 1] = sc2
    t2[:, 2, 2] = 1.0
    t2[:, 0, 2] = -sc2 * cent2[:, 0, 0]
    t2[:, 1, 2] = -sc2 * cent2[:, 0, 1]
    f = np.swapaxes(t2, 1, 2) @ f_norm @ t1

    # Batched rank-2 projection (no sign/norm fix needed for scoring).
    uu, ss, vv = np.linalg.svd(f)
    ok &= ss[:, 1] > 1e-15
    ss = ss.copy()
    ss[:, 2] = 0.0
    f = (uu * ss[:, None, :]) @ vv

    ph1 = _homogeneous(p1)
    med = np.empty(iterations)
    for lo in range(0, iterations, 256):  # chunked: (256, 3, N) at a time
        hi = min(lo + 256, iterations)
        lines = f[lo:hi] @ ph1.T
        norm = np.hypot(lines[:, 0], lines[:, 1])
        ok[lo:hi] &= (norm > 1e-15).all(axis=1)
        norm = np.maximum(norm, 1e-300)
        dist = np.abs(
            lines[:, 0] * p2[:, 0] + lines[:, 1] * p2[:, 1] + lines[:, 2]
        )
        dist /= norm
        med[lo:hi] = np.median(dist**2, axis=1)
    med[~ok] = np.inf
    if not np.isfinite(med).any():
        raise DegenerateGeometryError("all RANSAC hypotheses were degenerate")
    best = int(np.argmin(med))

    f_best = FundamentalMatrix(f[best])
    inliers = epipolar_distances(f_best, p1, p2) < threshold
    if inliers.sum() >= 8:
        try:
            f_best = eight_point(p1[inliers], p2[inliers])
        except DegenerateGeometryError:
            pass
    all_dist = epipolar_distances(f_best, p1, p2)
    return RansacResult(
        f=f_best,
        inliers=all_dist < threshold,
        median_error=float(np.median(all_dist)),
    )


@dataclass(frozen=True)
class RotationalFlowModel:
    """Affine flow (a1 + a2 x + a3 y, a4 + a5 x + a6 y) from camera rotation."""

    coeffs: np.ndarray
    residual_rms: float

    def __post_init__(self) -> None:
        coeffs = np.ascontiguousarray(self.coeffs, dtype=np.float64)
        if coeffs.shape != (6,):
            raise ValueError("rotational model needs 6 coefficients")
        coeffs.flags.writeable = False
        object.__setattr__(self, "coeffs", coeffs)

    @staticmethod
    def zero() -> "RotationalFlowModel":
        return RotationalFlowModel(np.zeros(6), 0.0)

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        x, y = points[:, 0], points[:, 1]
        a = self.coeffs
        return np.stack([a[0] + a[1] * x + a[2] * y, a[3] + a[4] * x + a[5] * y], 1)

    def rectify(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return points + self.apply(points)


def fit_rotational_flow(
    p1: np.ndarray, f: FundamentalMatrix
) -> RotationalFlowModel:
    """Least-squares affine field placing rectified points on epipolar lines.

    The component sliding points along their own lines is unconstrained by
    the data; the minimum-norm solution pins it to zero, so matches already
    on their lines yield the zero model.
    """
    p1 = np.asarray(p1, dtype=np.float64)
    if p1.ndim != 2 or p1.shape[0] < 6:
        raise ValueError("need at least 6 points to fit the rotational field")
    lines = epipolar_lines(f, p1)
    good = np.isfinite(lines).all(axis=1)
    if good.sum() < 6:
        raise DegenerateGeometryError("too few well-defined epipolar lines")
    lines, pts = lines[good], p1[good]
    a_l, b_l, c_l = lines[:, 0], lines[:, 1], lines[:, 2]
    x, y = pts[:, 0], pts[:, 1]
    m = np.stack([a_l, a_l * x, a_l * y, b_l, b_l * x, b_l * y], axis=1)
    rhs = -(a_l * x + b_l * y + c_l)
    coeffs, _, rank, _ = np.linalg.lstsq(m, rhs, rcond=LSTSQ_RCOND)
    if rank < 5:
        raise DegenerateGeometryError("rotational fit is rank-deficient")
    residual = m @ coeffs - rhs
    return RotationalFlowModel(coeffs, float(np.sqrt(np.mean(residual**2))))
