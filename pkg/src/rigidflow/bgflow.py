"""Background flow from ego-motion geometry.

The static world moves along epipolar lines of the ego-motion
fundamental matrix.  Disparity is parameterized by the depth ratio
omega = v_z / Z, which is what SGM labels discretize; occlusions are
filled by linear extrapolation toward the epipole and the field is
densified by a slanted-plane model over superpixels.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import cv2
import numpy as np

from . import sgm
from .costvol import SparseMatches, TopKCostVolume
from .epigeo import (
    DegenerateGeometryError,
    EpipolarFrame,
    epipolar_distances,
    make_frame,
    radial_frame,
    ransac_f,
)
from .fgflow import left_right_check, miss_penalty
from .imgproc import FlowField, Image, InstanceMap
from .sgm import SgmPenalties

PERP_TOL = 1.0  # candidate distance from the epipolar line, px
ALONG_TOL = 1.0  # extra move allowed when snapping to a label, px
N_OMEGA_LABELS = 96
OMEGA_PAD = 1.2
MAX_EXTRAPOLATION_SAMPLES = 50

# slanted-plane boundary terms per adjacent pixel pair: coplanar weighs
# plane disagreement on both sides, hinge pays a fixed price plus the
# midline disagreement, occlusion pays a larger fixed price only
W_COPLANAR = 1.0
W_HINGE = 0.5
W_OCCLUSION = 2.0
HUBER_STEPS = 3.0  # robust scale of the data term, in label steps
MAX_SWEEPS = 20
ENERGY_TOL = 1e-6
BOUNDARY_TYPES = ("coplanar", "hinge", "occlusion")


@dataclass(frozen=True)
class VzRatioField:
    """Per-pixel depth ratio omega = v_z / Z with a validity mask."""

    omega: np.ndarray
    valid: np.ndarray

    def __post_init__(self) -> None:
        omega = np.asarray(self.omega, dtype=np.float64)
        valid = np.asarray(self.valid, dtype=bool)
        if omega.shape != valid.shape or omega.ndim != 2:
            raise ValueError("omega and valid must be matching 2-D arrays")
        if not np.isfinite(omega[valid]).all():
            raise ValueError("valid omega values must be finite")
        if valid.any() and omega[valid].max() >= 1.0:
            raise ValueError("omega must stay below 1")
        omega = np.where(valid, omega, 0.0)
        omega.flags.writeable = False
        valid = valid.copy()
        valid.flags.writeable = False
        object.__setattr__(self, "omega", omega)
        object.__setattr__(self, "valid", valid)


def vz_disparity(delta: np.ndarray, omega: np.ndarray) -> np.ndarray:
    """Pixels moved along the line away from the epipole: d = delta*w/(1-w).

    omega = 0 means infinite depth or no forward motion and yields zero
    even where delta is infinite (epipole at infinity).
    """
    delta = np.asarray(delta, dtype=np.float64)
    omega = np.asarray(omega, dtype=np.float64)
    if np.any(omega >= 1.0):
        raise ValueError("omega >= 1 puts the point behind the camera")
    with np.errstate(invalid="ignore"):
        out = np.where(omega == 0.0, 0.0, delta * omega / (1.0 - omega))
    return out


def vz_ratio(delta: np.ndarray, d: np.ndarray) -> np.ndarray:
    """Inverse of vz_disparity: omega = d / (delta + d)."""
    delta = np.asarray(delta, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(np.isinf(delta), 0.0, d / (delta + d))
    return out


def background_frame(
    matches: SparseMatches,
    instances: InstanceMap,
    ransac_iterations: int = 2000,
    ransac_threshold: float = 1.0,
) -> EpipolarFrame:
    """Ego-motion frame from confident matches outside all instance masks."""
    bg = matches.within(instances.labels == 0)
    if len(bg) < 8:
        raise DegenerateGeometryError(
            f"only {len(bg)} background matches, need at least 8"
        )
    fit = ransac_f(bg.p1, bg.p2, ransac_iterations, ransac_threshold)
    return make_frame(fit.f, bg.p1[fit.inliers])


def omega_labels(
    matches: SparseMatches,
    frame: EpipolarFrame,
    n_labels: int = N_OMEGA_LABELS,
    pad: float = OMEGA_PAD,
) -> np.ndarray:
    """Uniform omega grid sized from the matches' implied depth ratios."""
    p_rect = frame.rotation.rectify(matches.p1)
    dirs, delta = radial_frame(frame.epipole, p_rect)
    along = ((matches.p2 - p_rect) * dirs).sum(axis=1)
    omega = vz_ratio(delta, along)
    ok = np.isfinite(omega) & (omega > 0) & (omega < 1)
    top = np.quantile(omega[ok], 0.99) * pad if ok.any() else 0.0
    top = min(max(top, 1e-3), 0.999)  # degenerate scenes still get a grid
    return np.linspace(0.0, top, n_labels)


def _vz_profiles(
    pixels: np.ndarray,
    frame: EpipolarFrame,
    volume: TopKCostVolume,
    labels: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-omega-label costs for integer pixels; also rectified positions
    and epipole distances.

    A label takes the best candidate inside its quantization cell along
    the line: half the local label spacing, at least half a pixel (the
    candidate grid is integer), at most ALONG_TOL.
    """
    pixels = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.float64)
    p_rect = frame.rotation.rectify(pixels)
    dirs, dist = radial_frame(frame.epipole, p_rect)

    n = pixels.shape[0]
    xi = np.rint(pixels[:, 0]).astype(np.int64)
    yi = np.rint(pixels[:, 1]).astype(np.int64)
    ids = volume.ids[yi, xi]
    scores = volume.scores[yi, xi]
    du, dv = volume.window.displacement_of(np.maximum(ids, 0))
    relx = pixels[:, :1] + du - p_rect[:, :1]
    rely = pixels[:, 1:2] + dv - p_rect[:, 1:2]
    along = relx * dirs[:, :1] + rely * dirs[:, 1:2]
    perp = np.abs(relx * dirs[:, 1:2] - rely * dirs[:, :1])
    with np.errstate(invalid="ignore"):
        usable = (
            (ids >= 0)
            & (perp <= PERP_TOL)
            & (dist[:, None] + along > 0)  # in front of the epipole
        )

    with np.errstate(invalid="ignore"):
        d_lab = vz_disparity(dist[:, None], labels[None, :])
    half = np.zeros_like(d_lab)
    if labels.size >= 2:
        gaps = np.diff(d_lab, axis=1)
        half[:, 0] = gaps[:, 0]
        half[:, -1] = gaps[:, -1]
        half[:, 1:-1] = np.maximum(gaps[:, :-1], gaps[:, 1:])
    with np.errstate(invalid="ignore"):
        tol = np.clip(0.5 * half, 0.5, ALONG_TOL)
        tol = np.where(np.isnan(half), 0.5, tol)

    best = np.full((n, labels.size), -np.inf)
    for j in range(volume.k):
        with np.errstate(invalid="ignore"):
            hit = np.abs(d_lab - along[:, j : j + 1]) <= tol
        hit &= usable[:, j : j + 1]
        np.maximum(best, np.where(hit, scores[:, j : j + 1], -np.inf), out=best)
    miss = miss_penalty(volume)
    profiles = np.where(np.isfinite(best), -best, miss)
    return profiles, p_rect, dist


def vz_cost_profile(
    p: np.ndarray,
    frame: EpipolarFrame,
    volume: TopKCostVolume,
    labels: np.ndarray,
) -> np.ndarray:
    """Matching cost of one pixel over the depth-ratio grid."""
    p = np.asarray(p, dtype=np.float64)
    profiles, _, dist = _vz_profiles(p[None, :], frame, volume, labels)
    if dist[0] <= 1e-9:
        raise DegenerateGeometryError("pixel at the epipole has no direction")
    return profiles[0]


def sgm_vz(
    mask: np.ndarray,
    frame: EpipolarFrame,
    volume: TopKCostVolume,
    labels: np.ndarray,
    penalties: SgmPenalties | None = None,
    unary_scale: float = 1.0,
    subpixel: bool = True,
) -> VzRatioField:
    """Depth ratios on a mask from 4-direction SGM over omega labels."""
    mask = np.asarray(mask, dtype=bool)
    penalties = penalties or SgmPenalties()
    if not mask.any():
        raise ValueError("empty mask")
    h, w = mask.shape
    ys, xs = np.nonzero(mask)
    pixels = np.stack([xs, ys], axis=1).astype(np.float64)
    profiles, _, dist = _vz_profiles(pixels, frame, volume, labels)
    good = dist > 1e-9

    good_mask = np.zeros((h, w), dtype=bool)
    good_mask[ys[good], xs[good]] = True
    y0, y1 = ys.min(), ys.max() + 1
    x0, x1 = xs.min(), xs.max() + 1
    box = np.zeros((y1 - y0, x1 - x0, labels.size))
    box[ys[good] - y0, xs[good] - x0] = profiles[good] * unary_scale
    lab, _ = sgm.sgm_field(box, good_mask[y0:y1, x0:x1], penalties, subpixel=subpixel)

    picked = np.interp(
        lab[ys[good] - y0, xs[good] - x0], np.arange(labels.size), labels
    )
    omega = np.zeros((h, w))
    omega[ys[good], xs[good]] = picked
    return VzRatioField(np.minimum(omega, 1.0 - 1e-9), good_mask)


def bg_flow_from_vz(vz: VzRatioField, frame: EpipolarFrame) -> FlowField:
    """Flow = rotational field + vz disparity along the radial direction."""
    h, w = vz.omega.shape
    gx, gy = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    pixels = np.stack([gx.ravel(), gy.ravel()], axis=1)
    p_rect = frame.rotation.rectify(pixels)
    dirs, delta = radial_frame(frame.epipole, p_rect)
    with np.errstate(invalid="ignore"):
        d = vz_disparity(delta, vz.omega.ravel())
        d = np.where(delta < 1e-9, 0.0, d)  # the epipole itself does not move
        target = p_rect + d[:, None] * dirs
    u = (target[:, 0] - pixels[:, 0]).reshape(h, w)
    v = (target[:, 1] - pixels[:, 1]).reshape(h, w)
    # an epipole at infinity cannot carry omega > 0; such pixels drop out
    valid = vz.valid & np.isfinite(u) & np.isfinite(v)
    return FlowField(np.where(valid, u, 0.0), np.where(valid, v, 0.0), valid)


def background_vz(
    instances: InstanceMap,
    frame: EpipolarFrame,
    volume_fw: TopKCostVolume,
    volume_bw: TopKCostVolume,
    matches: SparseMatches,
    labels: np.ndarray,
    penalties: SgmPenalties | None = None,
    unary_scale: float = 1.0,
    lr_tol: float = 1.0,
) -> VzRatioField:
    """Semi-dense background depth ratios: SGM plus the reverse-flow check.

    The reverse pass reuses the transposed fundamental matrix with its
    rotational field refit on the matches' second-image points.
    """
    bg_mask = instances.labels == 0
    fw = sgm_vz(bg_mask, frame, volume_fw, labels, penalties, unary_scale)
    flow_fw = bg_flow_from_vz(fw, frame)

    bg = matches.within(bg_mask)
    near = epipolar_distances(frame.f, bg.p1, bg.p2) <= 1.0
    if near.sum() >= 6:
        frame_bw = frame.backward(bg.p2[near])
    else:
        frame_bw = frame.backward(bg.p2)
    # reversing the motion maps each ratio to -w/(1-w): contraction toward
    # the epipole, so the reverse grid sits on the negative side
    labels_bw = np.sort(-labels / (1.0 - labels))
    full = np.ones_like(bg_mask)
    bw = sgm_vz(full, frame_bw, volume_bw, labels_bw, penalties, unary_scale)
    flow_bw = bg_flow_from_vz(bw, frame_bw)

    kept = left_right_check(flow_fw, flow_bw, lr_tol)
    return VzRatioField(fw.omega, kept.valid)


def extrapolate_vz(
    vz: VzRatioField,
    epipole: np.ndarray,
    instances: InstanceMap,
    max_samples: int = MAX_EXTRAPOLATION_SAMPLES,
) -> VzRatioField:
    """Fill invalid background pixels from samples toward the epipole.

    Walks each hole pixel toward the epipole, collects up to
    `max_samples` valid background ratios, and fits omega linear in the
    epipole distance (depth is inversely proportional to it along such a
    ray).  Samples at a single distance fall back to their mean; fewer
    than two samples leave the pixel invalid.
    """
    h, w = vz.omega.shape
    bg = instances.labels == 0
    holes = bg & ~vz.valid
    if not holes.any():
        return vz

    gx, gy = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    points = np.stack([gx.ravel(), gy.ravel()], axis=1)
    dirs_all, delta_all = radial_frame(epipole, points)
    delta_map = delta_all.reshape(h, w)

    hy, hx = np.nonzero(holes)
    m = hy.size
    # step toward the epipole: against the away-facing radial direction
    step = -dirs_all.reshape(h, w, 2)[hy, hx]
    pos = np.stack([hx, hy], axis=1).astype(np.float64)
    remaining = (
        delta_map[hy, hx].copy()
        if epipole[2] != 0
        else np.full(m, np.hypot(h, w))
    )

    count = np.zeros(m)
    s_d = np.zeros(m)
    s_w = np.zeros(m)
    s_dd = np.zeros(m)
    s_dw = np.zeros(m)
    d_min = np.full(m, np.inf)
    d_max = np.full(m, -np.inf)
    alive = np.ones(m, dtype=bool)
    sampled = bg & vz.valid

    limit = int(np.ceil(np.hypot(h, w)))
    for _ in range(limit):
        if not alive.any():
            break
        pos[alive] += step[alive]
        remaining[alive] -= 1.0
        xi = np.rint(pos[:, 0]).astype(np.int64)
        yi = np.rint(pos[:, 1]).astype(np.int64)
        inside = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        alive &= inside & (remaining > 0) & (count < max_samples)
        take = alive.copy()
        take[alive] = sampled[yi[alive], xi[alive]]
        if take.any():
            dd = delta_map[yi[take], xi[take]]
            ww = vz.omega[yi[take], xi[take]]
            count[take] += 1
            s_d[take] += dd
            s_w[take] += ww
            s_dd[take] += dd * dd
            s_dw[take] += dd * ww
            d_min[take] = np.minimum(d_min[take], dd)
            d_max[take] = np.maximum(d_max[take], dd)

    filled = count >= 2
    omega = vz.omega.copy()
    valid = vz.valid.copy()
    with np.errstate(divide="ignore", invalid="ignore"):
        det = count * s_dd - s_d * s_d
        spread = d_max - d_min
        alpha = (count * s_dw - s_d * s_w) / det
        beta = (s_w - alpha * s_d) / count
        mean = s_w / count
    degenerate = filled & (
        ~np.isfinite(spread) | (spread < 1e-9) | ~(np.abs(det) > 1e-12)
    )
    with np.errstate(invalid="ignore"):
        est = np.where(degenerate, mean, alpha * delta_map[hy, hx] + beta)
    est = np.minimum(est, 1.0 - 1e-9)
    omega[hy[filled], hx[filled]] = est[filled]
    valid[hy[filled], hx[filled]] = True
    return VzRatioField(omega, valid)


@dataclass
class SuperpixelGraph:
    """Partition of the image with typed boundaries between regions."""

    labels: np.ndarray  # (H, W) superpixel index per pixel
    centroids: np.ndarray  # (S, 2) x, y
    boundary_type: dict[tuple[int, int], str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        present = np.unique(self.labels)
        if present.min() < 0 or present.max() >= self.centroids.shape[0]:
            raise ValueError("labels must index the centroid table")

    def adjacent_pairs(self) -> list[tuple[int, int]]:
        lab = self.labels
        pairs = set()
        a, b = lab[:, :-1], lab[:, 1:]
        for x, y in zip(a[a != b].tolist(), b[a != b].tolist()):
            pairs.add((min(x, y), max(x, y)))
        a, b = lab[:-1, :], lab[1:, :]
        for x, y in zip(a[a != b].tolist(), b[a != b].tolist()):
            pairs.add((min(x, y), max(x, y)))
        return sorted(pairs)


@dataclass(frozen=True)
class PlaneParams:
    """Per-superpixel omega planes: w(x, y) = A dx + B dy + C."""

    coeffs: np.ndarray  # (S, 3)

    def __post_init__(self) -> None:
        if not np.isfinite(self.coeffs).all():
            raise ValueError("plane coefficients must be finite")

    def evaluate(self, s: np.ndarray, dx: np.ndarray, dy: np.ndarray) -> np.ndarray:
        c = self.coeffs[s]
        return c[..., 0] * dx + c[..., 1] * dy + c[..., 2]


def superpixels(guide: Image, cell: int = 16, iterations: int = 5) -> SuperpixelGraph:
    """Grid-seeded local clustering in (x, y, intensity).

    The spatial scale is the seed spacing; intensity differences are
    weighted so that a strong edge outweighs a cell of spatial distance.
    """
    img = guide.data
    h, w = img.shape
    if cell < 2 or cell > min(h, w):
        raise ValueError("cell size must fit the image")
    sy = np.arange(cell // 2, h, cell)
    sx = np.arange(cell // 2, w, cell)
    cy, cx = [g.ravel().astype(np.float64) for g in np.meshgrid(sy, sx, indexing="ij")]
    ci = img[cy.astype(np.int64), cx.astype(np.int64)]
    intensity_scale = 0.1

    gx, gy = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    labels = np.zeros((h, w), dtype=np.int64)
    for _ in range(iterations):
        best = np.full((h, w), np.inf)
        for s in range(cy.size):
            y0, y1 = int(max(cy[s] - cell, 0)), int(min(cy[s] + cell + 1, h))
            x0, x1 = int(max(cx[s] - cell, 0)), int(min(cx[s] + cell + 1, w))
            d2 = (
                ((gx[y0:y1, x0:x1] - cx[s]) ** 2 + (gy[y0:y1, x0:x1] - cy[s]) ** 2)
                / cell**2
                + ((img[y0:y1, x0:x1] - ci[s]) / intensity_scale) ** 2
            )
            win = best[y0:y1, x0:x1]
            upd = d2 < win
            win[upd] = d2[upd]
            labels[y0:y1, x0:x1][upd] = s
        for s in range(cy.size):
            m = labels == s
            if m.any():
                cy[s] = gy[m].mean()
                cx[s] = gx[m].mean()
                ci[s] = img[m].mean()

    labels = _enforce_connectivity(labels)
    ids, labels = np.unique(labels, return_inverse=True)
    labels = labels.reshape(h, w)
    n = ids.size
    centroids = np.zeros((n, 2))
    for s in range(n):
        m = labels == s
        centroids[s] = [gx[m].mean(), gy[m].mean()]
    graph = SuperpixelGraph(labels, centroids)
    graph.boundary_type = {pair: "coplanar" for pair in graph.adjacent_pairs()}
    return graph


def _enforce_connectivity(labels: np.ndarray) -> np.ndarray:
    """Keep each label's largest component; orphans adopt a neighbor."""
    out = labels.copy()
    for s in np.unique(labels):
        m = (out == s).astype(np.uint8)
        n, comp = cv2.connectedComponents(m, connectivity=4)
        if n <= 2:
            continue
        sizes = np.bincount(comp.ravel())
        sizes[0] = 0
        keep = int(np.argmax(sizes))
        out[(comp != keep) & (comp != 0)] = -1
    while (out < 0).any():
        for shift, axis in ((1, 0), (-1, 0), (1, 1), (-1, 1)):
            nb = np.roll(out, shift, axis)
            if axis == 0:
                nb[0 if shift == 1 else -1, :] = -1
            else:
                nb[:, 0 if shift == 1 else -1] = -1
            fix = (out < 0) & (nb >= 0)
            out[fix] = nb[fix]
    return out


def _huber_value(r: np.ndarray, scale: float) -> np.ndarray:
    a = np.abs(r)
    return np.where(a <= scale, 0.5 * r**2, scale * (a - 0.5 * scale))


def _huber_weight(r: np.ndarray, scale: float) -> np.ndarray:
    a = np.maximum(np.abs(r), 1e-12)
    return np.minimum(1.0, scale / a)


@dataclass
class SlantedPlaneResult:
    field: VzRatioField  # plane value at every pixel
    planes: PlaneParams
    graph: SuperpixelGraph
    energies: list[float]  # total energy after each sweep


class _PlaneState:
    """Bookkeeping for the block coordinate descent."""

    def __init__(
        self,
        vz: VzRatioField,
        graph: SuperpixelGraph,
        label_step: float,
    ) -> None:
        self.labels = graph.labels.copy()
        self.centroids = graph.centroids
        self.n = graph.centroids.shape[0]
        self.step = label_step
        h, w = vz.omega.shape
        self.gx, self.gy = np.meshgrid(
            np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64)
        )
        self.omega = vz.omega
        self.has_data = vz.valid
        self.types = dict(graph.boundary_type)
        global_mean = vz.omega[vz.valid].mean() if vz.valid.any() else 0.0
        self.coeffs = np.zeros((self.n, 3))
        self.coeffs[:, 2] = global_mean

    def plane_at(self, s: int, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        c = self.coeffs[s]
        return (
            c[0] * (x - self.centroids[s, 0])
            + c[1] * (y - self.centroids[s, 1])
            + c[2]
        )

    def plane_scalar(self, s: int, x: float, y: float) -> float:
        c = self.coeffs[s]
        return (
            c[0] * (x - self.centroids[s, 0])
            + c[1] * (y - self.centroids[s, 1])
            + c[2]
        )

    def dense_eval(self) -> np.ndarray:
        c = self.coeffs[self.labels]
        cen = self.centroids[self.labels]
        return (
            c[..., 0] * (self.gx - cen[..., 0])
            + c[..., 1] * (self.gy - cen[..., 1])
            + c[..., 2]
        )

    def boundary_pixels(self) -> list[tuple[int, int, np.ndarray, np.ndarray, np.ndarray, np.ndarray]]:
        """(a, b, xa, ya, xb, yb) per adjacent pair; a < b, xa on a's side."""
        lab = self.labels
        yy, xx = np.nonzero(lab[:, :-1] != lab[:, 1:])
        segs = [(lab[yy, xx], lab[yy, xx + 1], xx, yy, xx + 1, yy)]
        yy, xx = np.nonzero(lab[:-1, :] != lab[1:, :])
        segs.append((lab[yy, xx], lab[yy + 1, xx], xx, yy, xx, yy + 1))

        la = np.concatenate([s[0] for s in segs])
        lb = np.concatenate([s[1] for s in segs])
        xa = np.concatenate([s[2] for s in segs]).astype(np.float64)
        ya = np.concatenate([s[3] for s in segs]).astype(np.float64)
        xb = np.concatenate([s[4] for s in segs]).astype(np.float64)
        yb = np.concatenate([s[5] for s in segs]).astype(np.float64)
        swap = la > lb
        la2 = np.where(swap, lb, la)
        lb2 = np.where(swap, la, lb)
        xa2 = np.where(swap, xb, xa)
        ya2 = np.where(swap, yb, ya)
        xb2 = np.where(swap, xa, xb)
        yb2 = np.where(swap, ya, yb)
        key = la2 * self.n + lb2
        if key.size == 0:
            return []
        order = np.argsort(key, kind="stable")
        key = key[order]
        cuts = np.nonzero(np.diff(key))[0] + 1
        starts = np.concatenate([[0], cuts])
        ends = np.concatenate([cuts, [key.size]])
        rows = []
        for s0, s1 in zip(starts, ends):
            idx = order[s0:s1]
            rows.append(
                (
                    int(key[s0] // self.n),
                    int(key[s0] % self.n),
                    xa2[idx],
                    ya2[idx],
                    xb2[idx],
                    yb2[idx],
                )
            )
        return rows

    def pair_energy(self, a, b, xa, ya, xb, yb, btype) -> float:
        if btype == "occlusion":
            return W_OCCLUSION * xa.size
        if btype == "coplanar":
            da = (self.plane_at(a, xa, ya) - self.plane_at(b, xa, ya)) / self.step
            db = (self.plane_at(a, xb, yb) - self.plane_at(b, xb, yb)) / self.step
            return W_COPLANAR * float((da**2).sum() + (db**2).sum())
        xm, ym = 0.5 * (xa + xb), 0.5 * (ya + yb)
        dm = (self.plane_at(a, xm, ym) - self.plane_at(b, xm, ym)) / self.step
        return W_HINGE * xa.size + float((dm**2).sum())

    def members(self) -> list[np.ndarray]:
        """Flat pixel indices per superpixel, gathered in one sort."""
        flat = self.labels.ravel()
        order = np.argsort(flat, kind="stable")
        counts = np.bincount(flat, minlength=self.n)
        bounds = np.concatenate([[0], np.cumsum(counts)])
        return [order[bounds[s] : bounds[s + 1]] for s in range(self.n)]

    def total_energy(self) -> float:
        r = (self.omega - self.dense_eval())[self.has_data] / self.step
        e = float(_huber_value(r, HUBER_STEPS).sum())
        for a, b, xa, ya, xb, yb in self.boundary_pixels():
            btype = self.types.get((a, b), "coplanar")
            e += self.pair_energy(a, b, xa, ya, xb, yb, btype)
        return e


def slanted_plane(
    vz: VzRatioField,
    guide: Image,
    seeds: SuperpixelGraph,
    label_step: float | None = None,
) -> SlantedPlaneResult:
    """Densify a semi-dense omega field with plane-per-superpixel descent.

    Sweeps alternate robust plane refits, boundary-type selection and
    boundary-pixel reassignment; each step only ever lowers the energy,
    and the descent stops on a sweep that improves it by less than
    ENERGY_TOL (or after MAX_SWEEPS).
    """
    if label_step is None:
        spread = vz.omega[vz.valid].max() - vz.omega[vz.valid].min() if vz.valid.any() else 0.0
        label_step = max(spread / (N_OMEGA_LABELS - 1), 1e-6)
    state = _PlaneState(vz, seeds, label_step)
    _merge_empty(state)

    energies = [state.total_energy()]
    for _ in range(MAX_SWEEPS):
        _fit_planes(state)
        _select_types(state)
        _reassign_boundary_pixels(state)
        energies.append(state.total_energy())
        if energies[-2] - energies[-1] < ENERGY_TOL:
            break

    h, w = vz.omega.shape
    dense = np.minimum(state.dense_eval(), 1.0 - 1e-9)
    graph = SuperpixelGraph(state.labels, state.centroids, dict(state.types))
    return SlantedPlaneResult(
        field=VzRatioField(dense, np.ones((h, w), dtype=bool)),
        planes=PlaneParams(state.coeffs.copy()),
        graph=graph,
        energies=energies,
    )


def _merge_empty(state: _PlaneState) -> None:
    # unused labels get the plane of the nearest populated superpixel so
    # their parameters stay defined
    sizes = np.bincount(state.labels.ravel(), minlength=state.n)
    empty = np.nonzero(sizes == 0)[0]
    alive = np.nonzero(sizes > 0)[0]
    for s in empty:
        d = np.linalg.norm(state.centroids[alive] - state.centroids[s], axis=1)
        state.coeffs[s] = state.coeffs[alive[int(np.argmin(d))]]


def _fit_planes(state: _PlaneState) -> None:
    boundary = state.boundary_pixels()
    by_label: dict[int, list] = {}
    for row in boundary:
        by_label.setdefault(row[0], []).append(row)
        by_label.setdefault(row[1], []).append(row)
    members = state.members()
    flat_x = state.gx.ravel()
    flat_y = state.gy.ravel()
    flat_w = state.omega.ravel()
    flat_has = state.has_data.ravel()
    for s in range(state.n):
        rows = []
        targets = []
        weights = []
        mem = members[s][flat_has[members[s]]]
        if mem.size:
            px, py = flat_x[mem], flat_y[mem]
            dx = px - state.centroids[s, 0]
            dy = py - state.centroids[s, 1]
            r = flat_w[mem] - state.plane_at(s, px, py)
            wgt = _huber_weight(r / state.step, HUBER_STEPS)
            rows.append(np.column_stack([dx, dy, np.ones(dx.size)]))
            targets.append(flat_w[mem])
            weights.append(wgt)
        for a, b, xa, ya, xb, yb in by_label.get(s, ()):
            if s not in (a, b):
                continue
            btype = state.types.get((a, b), "coplanar")
            if btype == "occlusion":
                continue
            other = b if s == a else a
            if btype == "coplanar":
                px = np.concatenate([xa, xb])
                py = np.concatenate([ya, yb])
                wgt_b = W_COPLANAR
            else:
                # the hinge constant does not depend on the planes; only
                # the midline disagreement enters the fit
                px = 0.5 * (xa + xb)
                py = 0.5 * (ya + yb)
                wgt_b = 1.0
            rows.append(
                np.column_stack(
                    [
                        px - state.centroids[s, 0],
                        py - state.centroids[s, 1],
                        np.ones(px.size),
                    ]
                )
            )
            targets.append(state.plane_at(other, px, py))
            weights.append(np.full(px.size, wgt_b))
        if not rows:
            continue
        a_mat = np.concatenate(rows)
        t_vec = np.concatenate(targets)
        w_vec = np.concatenate(weights)
        sw = np.sqrt(w_vec)
        sol, _, rank, _ = np.linalg.lstsq(
            a_mat * sw[:, None], t_vec * sw, rcond=1e-10
        )
        if rank == 3 and np.isfinite(sol).all():
            state.coeffs[s] = sol
        elif np.isfinite(sol).all():
            # rank-deficient data (single point or a line): constant plane
            state.coeffs[s] = [0.0, 0.0, float(np.average(t_vec, weights=w_vec))]


def _select_types(state: _PlaneState) -> None:
    for a, b, xa, ya, xb, yb in state.boundary_pixels():
        best = None
        for btype in BOUNDARY_TYPES:
            e = state.pair_energy(a, b, xa, ya, xb, yb, btype)
            if best is None or e < best[0] - 1e-15:
                best = (e, btype)
        state.types[(a, b)] = best[1]


def _reassign_boundary_pixels(state: _PlaneState) -> None:
    """Greedy single-pixel moves between adjacent superpixels.

    A move is accepted only when the exactly recomputed local energy
    drops, so the sweep never increases the total energy.
    """
    lab = state.labels
    h, w = lab.shape
    sizes = np.bincount(lab.ravel(), minlength=state.n)
    edge = np.zeros((h, w), dtype=bool)
    edge[:, :-1] |= lab[:, :-1] != lab[:, 1:]
    edge[:, 1:] |= lab[:, :-1] != lab[:, 1:]
    edge[:-1, :] |= lab[:-1, :] != lab[1:, :]
    edge[1:, :] |= lab[:-1, :] != lab[1:, :]
    ys, xs = np.nonzero(edge)
    for y, x in zip(ys.tolist(), xs.tolist()):
        cur = int(lab[y, x])
        if sizes[cur] <= 1:
            continue
        neighbors = set()
        for ny, nx in ((y, x - 1), (y, x + 1), (y - 1, x), (y + 1, x)):
            if 0 <= ny < h and 0 <= nx < w and lab[ny, nx] != cur:
                neighbors.add(int(lab[ny, nx]))
        if not neighbors:
            continue
        e_cur = _local_energy(state, y, x, cur)
        best = (0.0, cur)
        for cand in sorted(neighbors):
            delta = _local_energy(state, y, x, cand) - e_cur
            if delta < best[0] - 1e-12:
                best = (delta, cand)
        if best[1] != cur:
            lab[y, x] = best[1]
            sizes[cur] -= 1
            sizes[best[1]] += 1


def _local_energy(state: _PlaneState, y: int, x: int, s: int) -> float:
    """Energy terms touching pixel (x, y) if it belonged to superpixel s."""
    e = 0.0
    if state.has_data[y, x]:
        r = abs(state.omega[y, x] - state.plane_scalar(s, x, y)) / state.step
        e += 0.5 * r * r if r <= HUBER_STEPS else HUBER_STEPS * (r - 0.5 * HUBER_STEPS)
    h, w = state.labels.shape
    for ny, nx in ((y, x - 1), (y, x + 1), (y - 1, x), (y + 1, x)):
        if not (0 <= ny < h and 0 <= nx < w):
            continue
        t = int(state.labels[ny, nx])
        if t == s:
            continue
        btype = state.types.get((min(s, t), max(s, t)), "coplanar")
        if btype == "occlusion":
            e += W_OCCLUSION
        elif btype == "coplanar":
            da = (state.plane_scalar(s, x, y) - state.plane_scalar(t, x, y)) / state.step
            db = (state.plane_scalar(s, nx, ny) - state.plane_scalar(t, nx, ny)) / state.step
            e += W_COPLANAR * (da * da + db * db)
        else:
            xm, ym = 0.5 * (x + nx), 0.5 * (y + ny)
            dm = (state.plane_scalar(s, xm, ym) - state.plane_scalar(t, xm, ym)) / state.step
            e += W_HINGE + dm * dm
    return e
