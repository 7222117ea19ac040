"""Per-instance flow as a 1-D search along each body's epipolar lines.

After camera rotation is compensated, a rigid body's correspondences
slide along the epipolar lines of that body's fundamental matrix.  Cost
volume candidates near a pixel's line become a per-disparity cost
profile, SGM smooths the profiles inside the instance mask, a reverse
pass filters inconsistent pixels, and edge-aware interpolation fills the
mask back in.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np

from . import sgm
from .costvol import SparseMatches, TopKCostVolume
from .epigeo import (
    DegenerateGeometryError,
    EpipolarFrame,
    make_frame,
    radial_frame,
    ransac_f,
)
from .imgproc import FlowField, Image
from .sgm import SgmPenalties

PERP_TOL = 1.0  # candidate may sit this far from the epipolar line, px
MIN_MATCHES = 8  # below this, RANSAC is not even attempted
MIN_INLIERS = 15
MAX_MEDIAN_ERROR = 2.0  # px, over all confident matches of the instance

# edge-aware interpolation constants
EDGE_WEIGHT = 40.0  # gradient penalty per pixel step in geodesic costs
SEED_SCALE = 10.0  # geodesic distance scale of seed weights
N_NEIGHBOR_SEEDS = 16
SMOOTH_EDGE_SCALE = 0.1  # intensity difference scale of the Jacobi sweep


@dataclass(frozen=True)
class DisparityRange:
    """Uniform disparity labels d_min + step * k, endpoints inclusive."""

    d_min: float = -128.0
    d_max: float = 128.0
    step: float = 1.0

    def __post_init__(self) -> None:
        if not self.d_min < self.d_max:
            raise ValueError("need d_min < d_max")
        if not self.step > 0:
            raise ValueError("need a positive step")

    @property
    def n_labels(self) -> int:
        return int(round((self.d_max - self.d_min) / self.step)) + 1

    def values(self) -> np.ndarray:
        return self.d_min + self.step * np.arange(self.n_labels)


def miss_penalty(volume: TopKCostVolume) -> float:
    """Cost assigned to disparities with no candidate support.

    One unit above the cost of the worst retained candidate, so misses
    are uniformly unattractive but still finite for SGM.
    """
    kept = volume.scores[volume.ids >= 0]
    if kept.size == 0:
        raise ValueError("cost volume has no candidates")
    return float(-kept.min() + 1.0)


def _profiles(
    pixels: np.ndarray,
    frame: EpipolarFrame,
    volume: TopKCostVolume,
    drange: DisparityRange,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-disparity costs for integer pixels (N, 2); also returns the
    rectified positions.  Pixels at the epipole get all-miss profiles and
    must be screened by the caller."""
    pixels = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
    p_rect = frame.rotation.rectify(pixels)
    dirs, dist = radial_frame(frame.epipole, p_rect)

    n = pixels.shape[0]
    profiles = np.full((n, drange.n_labels), miss_penalty(volume))
    xi = np.rint(pixels[:, 0]).astype(np.int64)
    yi = np.rint(pixels[:, 1]).astype(np.int64)
    ids = volume.ids[yi, xi]  # (N, K)
    scores = volume.scores[yi, xi]
    du, dv = volume.window.displacement_of(np.maximum(ids, 0))
    p2x = pixels[:, :1] + du
    p2y = pixels[:, 1:2] + dv
    relx = p2x - p_rect[:, :1]
    rely = p2y - p_rect[:, 1:2]
    along = relx * dirs[:, :1] + rely * dirs[:, 1:2]
    perp = np.abs(relx * dirs[:, 1:2] - rely * dirs[:, :1])

    labf = (along - drange.d_min) / drange.step
    lab = np.rint(labf).astype(np.int64)
    ok = (
        (ids >= 0)
        & (perp <= PERP_TOL)
        & (lab >= 0)
        & (lab < drange.n_labels)
        & (dist[:, None] > 1e-9)
    )
    pix, slot = np.nonzero(ok)
    frac = np.abs(labf[ok] - lab[ok])
    # write order: per pixel, distant-from-center candidates first so the
    # nearest one lands last and wins; ties go to the better-ranked slot
    order = np.lexsort((-slot, -frac, pix))
    profiles[pix[order], lab[ok][order]] = -scores[ok][order]
    return profiles, p_rect


def instance_cost_profile(
    p: np.ndarray,
    frame: EpipolarFrame,
    volume: TopKCostVolume,
    drange: DisparityRange | None = None,
) -> np.ndarray:
    """Cost over all disparities for one pixel of a rigid instance."""
    drange = drange or DisparityRange()
    p = np.asarray(p, dtype=np.float64).reshape(1, 2)
    p_rect = frame.rotation.rectify(p)
    _, dist = radial_frame(frame.epipole, p_rect)
    if frame.epipole[2] != 0 and dist[0] <= 1e-9:
        raise DegenerateGeometryError("pixel coincides with the epipole")
    return _profiles(p, frame, volume, drange)[0][0]


def epipolar_disparity_field(
    mask: np.ndarray,
    frame: EpipolarFrame,
    volume: TopKCostVolume,
    drange: DisparityRange | None = None,
    penalties: SgmPenalties | None = None,
    unary_scale: float = 1.0,
) -> FlowField:
    """Semi-dense flow on a mask from SGM over per-pixel disparity profiles.

    Labels are refined to sub-pixel disparity by a parabolic fit, then
    mapped back to flow through the rectified radial frame.
    """
    mask = np.asarray(mask, dtype=bool)
    drange = drange or DisparityRange()
    penalties = penalties or SgmPenalties()
    h, w = mask.shape
    if not mask.any():
        raise ValueError("empty mask")

    ys, xs = np.nonzero(mask)
    pixels = np.stack([xs, ys], axis=1).astype(np.float64)
    profiles, p_rect = _profiles(pixels, frame, volume, drange)
    dirs, dist = radial_frame(frame.epipole, p_rect)
    good = dist > 1e-9  # pixels at the epipole carry no direction

    # SGM on the mask bounding box; scanlines restart outside the mask
    y0, y1 = ys.min(), ys.max() + 1
    x0, x1 = xs.min(), xs.max() + 1
    box = np.zeros((y1 - y0, x1 - x0, drange.n_labels))
    good_mask = np.zeros((h, w), dtype=bool)
    good_mask[ys[good], xs[good]] = True
    box[ys[good] - y0, xs[good] - x0] = profiles[good] * unary_scale
    labels, _ = sgm.sgm_field(box, good_mask[y0:y1, x0:x1], penalties, subpixel=True)

    d = drange.d_min + labels[ys[good] - y0, xs[good] - x0] * drange.step
    target = p_rect[good] + d[:, None] * dirs[good]
    u = np.zeros((h, w))
    v = np.zeros((h, w))
    u[ys[good], xs[good]] = target[:, 0] - pixels[good, 0]
    v[ys[good], xs[good]] = target[:, 1] - pixels[good, 1]
    return FlowField(u, v, good_mask)


def left_right_check(
    flow_fw: FlowField, flow_bw: FlowField, tol: float = 1.0
) -> FlowField:
    """Keep pixels whose backward flow at the target cancels the forward one.

    The backward field is sampled bilinearly; targets outside the image
    or over invalid backward pixels are dropped.
    """
    if flow_fw.u.shape != flow_bw.u.shape:
        raise ValueError("flow fields must share dimensions")
    h, w = flow_fw.u.shape
    ys, xs = np.nonzero(flow_fw.valid)
    tx = xs + flow_fw.u[ys, xs]
    ty = ys + flow_fw.v[ys, xs]
    inside = (tx >= 0) & (tx <= w - 1) & (ty >= 0) & (ty <= h - 1)

    x0 = np.clip(tx.astype(np.int64), 0, w - 2)
    y0 = np.clip(ty.astype(np.int64), 0, h - 2)
    fx, fy = tx - x0, ty - y0
    support = (
        flow_bw.valid[y0, x0]
        & flow_bw.valid[y0, x0 + 1]
        & flow_bw.valid[y0 + 1, x0]
        & flow_bw.valid[y0 + 1, x0 + 1]
    )

    def sample(f: np.ndarray) -> np.ndarray:
        return (
            f[y0, x0] * (1 - fx) * (1 - fy)
            + f[y0, x0 + 1] * fx * (1 - fy)
            + f[y0 + 1, x0] * (1 - fx) * fy
            + f[y0 + 1, x0 + 1] * fx * fy
        )

    resid = np.hypot(
        flow_fw.u[ys, xs] + sample(flow_bw.u), flow_fw.v[ys, xs] + sample(flow_bw.v)
    )
    keep = inside & support & (resid <= tol)
    valid = np.zeros((h, w), dtype=bool)
    valid[ys[keep], xs[keep]] = True
    return FlowField(
        np.where(valid, flow_fw.u, 0.0), np.where(valid, flow_fw.v, 0.0), valid
    )


def _axis_edge_costs(guide: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # step cost 1 plus a gradient penalty; crossing an image edge is dear
    right = 1.0 + EDGE_WEIGHT * np.abs(np.diff(guide, axis=1))
    down = 1.0 + EDGE_WEIGHT * np.abs(np.diff(guide, axis=0))
    return right, down


def _geodesic_cells(
    seed_mask: np.ndarray, region: np.ndarray, guide: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Multi-source Dijkstra: nearest-seed index and distance per pixel."""
    h, w = region.shape
    right, down = _axis_edge_costs(guide)
    dist = np.full((h, w), np.inf)
    cell = np.full((h, w), -1, dtype=np.int64)
    heap = []
    ys, xs = np.nonzero(seed_mask)
    for i, (y, x) in enumerate(zip(ys.tolist(), xs.tolist())):
        dist[y, x] = 0.0
        cell[y, x] = i
        heap.append((0.0, y, x))
    heapq.heapify(heap)
    while heap:
        d, y, x = heapq.heappop(heap)
        if d > dist[y, x]:
            continue
        if x + 1 < w and region[y, x + 1]:
            _relax(dist, cell, heap, d + right[y, x], y, x + 1, cell[y, x])
        if x > 0 and region[y, x - 1]:
            _relax(dist, cell, heap, d + right[y, x - 1], y, x - 1, cell[y, x])
        if y + 1 < h and region[y + 1, x]:
            _relax(dist, cell, heap, d + down[y, x], y + 1, x, cell[y, x])
        if y > 0 and region[y - 1, x]:
            _relax(dist, cell, heap, d + down[y - 1, x], y - 1, x, cell[y, x])
    return cell, dist


def _relax(dist, cell, heap, nd, y, x, src) -> None:
    if nd < dist[y, x]:
        dist[y, x] = nd
        cell[y, x] = src
        heapq.heappush(heap, (nd, y, x))


def _seed_graph(
    cell: np.ndarray, dist: np.ndarray, region: np.ndarray, guide: np.ndarray
) -> dict[int, dict[int, float]]:
    """Approximate seed-to-seed geodesics from adjacent Voronoi cells."""
    right, down = _axis_edge_costs(guide)
    adj: dict[int, dict[int, float]] = {}

    def link(a: int, b: int, d: float) -> None:
        if a < 0 or b < 0 or a == b:
            return
        for u, v in ((a, b), (b, a)):
            cur = adj.setdefault(u, {})
            if d < cur.get(v, np.inf):
                cur[v] = d

    both = region[:, :-1] & region[:, 1:]
    ys, xs = np.nonzero(both & (cell[:, :-1] != cell[:, 1:]))
    for y, x in zip(ys.tolist(), xs.tolist()):
        link(cell[y, x], cell[y, x + 1], dist[y, x] + dist[y, x + 1] + right[y, x])
    both = region[:-1, :] & region[1:, :]
    ys, xs = np.nonzero(both & (cell[:-1, :] != cell[1:, :]))
    for y, x in zip(ys.tolist(), xs.tolist()):
        link(cell[y, x], cell[y + 1, x], dist[y, x] + dist[y + 1, x] + down[y, x])
    return adj


def _nearest_seeds(
    adj: dict[int, dict[int, float]], start: int, count: int
) -> list[tuple[int, float]]:
    """Closest seeds to `start` in the seed graph, including itself."""
    best: dict[int, float] = {}
    heap = [(0.0, start)]
    while heap and len(best) < count:
        d, s = heapq.heappop(heap)
        if s in best:
            continue
        best[s] = d
        for t, w in adj.get(s, {}).items():
            if t not in best:
                heapq.heappush(heap, (d + w, t))
    return sorted(best.items(), key=lambda kv: (kv[1], kv[0]))


def _affine_fit(
    pos: np.ndarray, val: np.ndarray, weights: np.ndarray, center: np.ndarray
) -> np.ndarray:
    """Weighted affine coefficients (2, 3); constant fallback when thin."""
    if len(pos) < 6:
        mean = (val * weights[:, None]).sum(0) / weights.sum()
        return np.column_stack([mean, np.zeros((2, 2))])
    a = np.column_stack([np.ones(len(pos)), pos - center])
    aw = a * weights[:, None]
    coef, _, rank, _ = np.linalg.lstsq(aw, val * weights[:, None], rcond=1e-8)
    if rank < 3:
        mean = (val * weights[:, None]).sum(0) / weights.sum()
        return np.column_stack([mean, np.zeros((2, 2))])
    return coef.T


def interpolate_dense(
    semi_dense: FlowField,
    guide: Image,
    region_mask: np.ndarray,
    smoothing: bool = True,
) -> FlowField:
    """Fill a region from its valid seeds with edge-aware affine models.

    Each pixel takes the locally-weighted affine fit of the seeds nearest
    to its own nearest seed under a gradient-penalized geodesic distance.
    Seed pixels keep their values; one edge-stopping Jacobi sweep runs at
    the end unless `smoothing` is disabled.
    """
    region = np.asarray(region_mask, dtype=bool)
    seeds = semi_dense.valid & region
    if not seeds.any():
        raise ValueError("no seeds inside the region")
    img = guide.data
    cell, dist = _geodesic_cells(seeds, region, img)

    sy, sx = np.nonzero(seeds)
    pos = np.stack([sx, sy], axis=1).astype(np.float64)
    val = np.stack([semi_dense.u[sy, sx], semi_dense.v[sy, sx]], axis=1)
    adj = _seed_graph(cell, dist, region, img)

    u = semi_dense.u.copy()
    v = semi_dense.v.copy()
    for s in np.unique(cell[region & (cell >= 0)]):
        near = _nearest_seeds(adj, int(s), N_NEIGHBOR_SEEDS)
        idx = np.array([i for i, _ in near])
        w = np.exp(-np.array([d for _, d in near]) / SEED_SCALE)
        coef = _affine_fit(pos[idx], val[idx], w, pos[s])
        m = region & (cell == s)
        yy, xx = np.nonzero(m)
        dx = xx - pos[s, 0]
        dy = yy - pos[s, 1]
        u[m] = coef[0, 0] + coef[0, 1] * dx + coef[0, 2] * dy
        v[m] = coef[1, 0] + coef[1, 1] * dx + coef[1, 2] * dy

    # region pixels cut off from every seed get the global seed mean
    orphan = region & (cell < 0)
    if orphan.any():
        u[orphan] = val[:, 0].mean()
        v[orphan] = val[:, 1].mean()

    u[seeds] = semi_dense.u[seeds]
    v[seeds] = semi_dense.v[seeds]

    if smoothing:
        u, v = _jacobi_sweep(u, v, img, region)
    valid = semi_dense.valid | region
    return FlowField(np.where(valid, u, 0.0), np.where(valid, v, 0.0), valid)


def _jacobi_sweep(
    u: np.ndarray, v: np.ndarray, guide: np.ndarray, region: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """One diffusion step with edge-stopping neighbor weights."""
    h, w = u.shape
    wsum = np.zeros((h, w))
    acc_u = u * region
    acc_v = v * region
    total_u = np.zeros((h, w))
    total_v = np.zeros((h, w))
    for axis, shift in ((1, 1), (1, -1), (0, 1), (0, -1)):
        wgt = np.exp(-np.abs(guide - np.roll(guide, shift, axis)) / SMOOTH_EDGE_SCALE)
        ok = region & np.roll(region, shift, axis)
        # roll wraps around the border; mask the wrapped lane
        if axis == 1:
            col = 0 if shift == 1 else w - 1
            ok[:, col] = False
        else:
            row = 0 if shift == 1 else h - 1
            ok[row, :] = False
        wgt = np.where(ok, wgt, 0.0)
        wsum += wgt
        total_u += wgt * np.roll(acc_u, shift, axis)
        total_v += wgt * np.roll(acc_v, shift, axis)
    denom = 1.0 + wsum
    nu = np.where(region, (u + total_u) / denom, u)
    nv = np.where(region, (v + total_v) / denom, v)
    return nu, nv


def _dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    out = mask.copy()
    for _ in range(radius):
        grown = out.copy()
        grown[1:, :] |= out[:-1, :]
        grown[:-1, :] |= out[1:, :]
        grown[:, 1:] |= out[:, :-1]
        grown[:, :-1] |= out[:, 1:]
        out = grown
    return out


@dataclass
class InstanceFlowResult:
    instance: int
    semi_dense: FlowField
    dense: FlowField
    status: str  # "epipolar" or "fallback"
    inlier_count: int
    median_error: float
    lr_survival: float  # fraction of mask pixels passing the reverse check
    frame: EpipolarFrame | None = None  # set when status == "epipolar"


def _matches_as_field(matches: SparseMatches, shape: tuple[int, int]) -> FlowField:
    u = np.zeros(shape)
    v = np.zeros(shape)
    valid = np.zeros(shape, dtype=bool)
    xi = np.rint(matches.p1[:, 0]).astype(np.int64)
    yi = np.rint(matches.p1[:, 1]).astype(np.int64)
    u[yi, xi] = matches.p2[:, 0] - matches.p1[:, 0]
    v[yi, xi] = matches.p2[:, 1] - matches.p1[:, 1]
    valid[yi, xi] = True
    return FlowField(u, v, valid)


def estimate_instance_flow(
    mask: np.ndarray,
    volume_fw: TopKCostVolume,
    volume_bw: TopKCostVolume,
    matches: SparseMatches,
    guide: Image,
    instance: int = 0,
    drange: DisparityRange | None = None,
    penalties: SgmPenalties | None = None,
    lr_tol: float = 1.0,
    unary_scale: float = 1.0,
    ransac_iterations: int = 2000,
    ransac_threshold: float = 1.0,
    min_inliers: int = MIN_INLIERS,
    max_median_error: float = MAX_MEDIAN_ERROR,
) -> InstanceFlowResult:
    """Dense flow for one rigid instance.

    Estimates the instance's fundamental matrix from its confident
    matches and searches along epipolar lines; with too few inliers or
    too noisy a fit it falls back to the raw confident matches.  Either
    way the mask is filled densely by edge-aware interpolation.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("empty instance mask")
    shape = mask.shape
    local = matches.within(mask)

    semi = None
    status = "fallback"
    frame_used = None
    inlier_count = 0
    median_error = np.inf
    if len(local) >= MIN_MATCHES:
        try:
            fit = ransac_f(local.p1, local.p2, ransac_iterations, ransac_threshold)
            inlier_count = int(fit.inliers.sum())
            median_error = float(fit.median_error)
            if inlier_count >= min_inliers and median_error <= max_median_error:
                frame = make_frame(fit.f, local.p1[fit.inliers])
                fw = epipolar_disparity_field(
                    mask, frame, volume_fw, drange, penalties, unary_scale
                )
                # reverse field only around where forward targets land
                ys, xs = np.nonzero(fw.valid)
                tx = np.rint(xs + fw.u[ys, xs]).astype(np.int64)
                ty = np.rint(ys + fw.v[ys, xs]).astype(np.int64)
                ok = (tx >= 0) & (tx < shape[1]) & (ty >= 0) & (ty < shape[0])
                back_mask = np.zeros(shape, dtype=bool)
                back_mask[ty[ok], tx[ok]] = True
                back_mask = _dilate(back_mask, 2)
                if back_mask.any():  # all targets off-image counts as failure
                    frame_bw = frame.backward(local.p2[fit.inliers])
                    bw = epipolar_disparity_field(
                        back_mask, frame_bw, volume_bw, drange, penalties, unary_scale
                    )
                    checked = left_right_check(fw, bw, lr_tol)
                    if checked.valid.any():
                        semi = checked
                        status = "epipolar"
                        frame_used = frame
        except DegenerateGeometryError:
            pass  # any geometric failure degrades to the match fallback

    if semi is None:
        semi = _matches_as_field(local, shape)

    if semi.valid.any():
        dense = interpolate_dense(semi, guide, mask)
    else:
        # nothing to anchor on; a zero field is the only honest guess
        dense = FlowField(np.zeros(shape), np.zeros(shape), mask.copy())
    survival = float(semi.valid[mask].mean())
    return InstanceFlowResult(
        instance=instance,
        semi_dense=semi,
        dense=dense,
        status=status,
        inlier_count=inlier_count,
        median_error=median_error,
        lr_survival=survival,
        frame=frame_used,
    )
