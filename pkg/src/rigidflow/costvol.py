"""Sparse top-K matching cost volumes over a 2-D displacement window.

A dense volume over a driving-scale window is hundreds of gigabytes, so
only the K best-scoring displacements per pixel are kept.  Candidate
lists are sorted by descending score; exact ties rank the displacement
that comes first in scanline order (v-major, then u) higher, which makes
every operation bit-reproducible.

Aggregation averages each candidate score over the 5x5 spatial
neighborhood on the union of the neighbors' candidate sets: entries a
neighbor lacks contribute zero, and the divisor is the in-bounds
neighborhood size regardless of how many neighbors carry the label.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .matchnet.net import FeatureMap

_PAD_ID = np.iinfo(np.int64).max
_MAGIC = b"RFCV"
_DUMP_VERSION = 1


@dataclass(frozen=True)
class SearchWindow:
    """Half-open displacement ranges u in [u_min, u_max), v in [v_min, v_max)."""

    u_min: int = -200
    u_max: int = 200
    v_min: int = -100
    v_max: int = 100

    def __post_init__(self) -> None:
        if self.u_min >= self.u_max or self.v_min >= self.v_max:
            raise ValueError("search window must be non-empty")

    @property
    def n_u(self) -> int:
        return self.u_max - self.u_min

    @property
    def n_v(self) -> int:
        return self.v_max - self.v_min

    @property
    def size(self) -> int:
        return self.n_u * self.n_v

    def id_of(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        return (np.asarray(v) - self.v_min) * self.n_u + (np.asarray(u) - self.u_min)

    def displacement_of(self, ids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        ids = np.asarray(ids)
        v, u = np.divmod(ids, self.n_u)
        return u + self.u_min, v + self.v_min

    def contains(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        u, v = np.asarray(u), np.asarray(v)
        return (
            (u >= self.u_min) & (u < self.u_max) & (v >= self.v_min) & (v < self.v_max)
        )


@dataclass(frozen=True)
class TopKCostVolume:
    """Per-pixel candidate displacements on the feature grid.

    ids/scores are (H, W, K); unused slots hold id -1 and score -inf.
    offset maps feature coordinates back to image pixels.
    """

    window: SearchWindow
    k: int
    ids: np.ndarray
    scores: np.ndarray
    offset: int = 0

    @property
    def shape(self) -> tuple[int, int]:
        return self.ids.shape[:2]

    def counts(self) -> np.ndarray:
        return (self.ids >= 0).sum(axis=2)

    def best_scores(self) -> np.ndarray:
        """Best score per pixel, -inf where no candidates exist."""
        return self.scores[:, :, 0]

    def validate(self) -> None:
        h, w, k = self.ids.shape
        if k != self.k or self.scores.shape != (h, w, k):
            raise ValueError("inconsistent candidate array shapes")
        filled = self.ids >= 0
        if np.any(self.ids[filled] >= self.window.size):
            raise ValueError("candidate id outside the search window")
        if np.any(np.isfinite(self.scores[~filled])):
            raise ValueError("unused slots must hold -inf")
        s = self.scores
        if np.any(s[:, :, 1:] > s[:, :, :-1]):
            raise ValueError("candidates must be sorted by descending score")
        tied = s[:, :, 1:] == s[:, :, :-1]
        both = filled[:, :, 1:] & filled[:, :, :-1]
        if np.any(tied & both & (self.ids[:, :, 1:] <= self.ids[:, :, :-1])):
            raise ValueError("ties must rank scanline-first displacements higher")


def _merge_topk(
    scores_a: np.ndarray,
    ids_a: np.ndarray,
    scores_b: np.ndarray,
    ids_b: np.ndarray,
    k: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Merge two candidate blocks along the last axis, keep the best k."""
    scores = np.concatenate([scores_a, scores_b], axis=-1)
    ids = np.concatenate([ids_a, ids_b], axis=-1)
    order = np.lexsort((ids, -scores), axis=-1)[..., :k]
    return np.take_along_axis(scores, order, axis=-1), np.take_along_axis(
        ids, order, axis=-1
    )


def _empty_block(h: int, w: int, k: int) -> tuple[np.ndarray, np.ndarray]:
    return (
        np.full((h, w, k), -np.inf),
        np.full((h, w, k), _PAD_ID, dtype=np.int64),
    )


def _finalize_ids(ids: np.ndarray) -> np.ndarray:
    out = ids.copy()
    out[out == _PAD_ID] = -1
    return out


def build_cost_volume(
    feat1: FeatureMap,
    feat2: FeatureMap,
    window: SearchWindow | None = None,
    k: int = 30,
    chunk: int = 512,
) -> TopKCostVolume:
    """Score every in-window, in-bounds displacement; keep the top k."""
    window = window or SearchWindow()
    if feat1.data.shape != feat2.data.shape:
        raise ValueError("feature maps must share a shape")
    if feat1.offset != feat2.offset:
        raise ValueError("feature maps must share an offset")
    if k <= 0:
        raise ValueError("k must be positive")
    f1, f2 = feat1.data, feat2.data
    h, w, _ = f1.shape
    run_scores, run_ids = _empty_block(h, w, k)
    for lo in range(0, window.size, chunk):
        hi = min(lo + chunk, window.size)
        block = np.full((h, w, hi - lo), -np.inf)
        us, vs = window.displacement_of(np.arange(lo, hi))
        any_valid = False
        for j, (u, v) in enumerate(zip(us, vs)):
            y0, y1 = max(0, -v), h - max(0, v)
            x0, x1 = max(0, -u), w - max(0, u)
            if y0 >= y1 or x0 >= x1:
                continue
            any_valid = True
            block[y0:y1, x0:x1, j] = np.einsum(
                "ijc,ijc->ij",
                f1[y0:y1, x0:x1],
                f2[y0 + v : y1 + v, x0 + u : x1 + u],
            )
        if not any_valid:
            continue
        block_ids = np.broadcast_to(np.arange(lo, hi, dtype=np.int64), block.shape)
        block_ids = np.where(np.isneginf(block), _PAD_ID, block_ids)
        run_scores, run_ids = _merge_topk(run_scores, run_ids, block, block_ids, k)
    return TopKCostVolume(window, k, _finalize_ids(run_ids), run_scores, feat1.offset)


def _box_sum(arr: np.ndarray, radius: int) -> np.ndarray:
    """Sum over the (2r+1)^2 in-bounds neighborhood of every pixel."""
    h, w = arr.shape[:2]
    integral = arr.cumsum(axis=0).cumsum(axis=1)
    pad = ((1, 0), (1, 0)) + ((0, 0),) * (arr.ndim - 2)
    integral = np.pad(integral, pad)
    ys = np.arange(h)
    xs = np.arange(w)
    y1, y2 = np.maximum(ys - radius, 0), np.minimum(ys + radius, h - 1) + 1
    x1, x2 = np.maximum(xs - radius, 0), np.minimum(xs + radius, w - 1) + 1
    rows = integral[y2] - integral[y1]
    return rows[:, x2] - rows[:, x1]


def neighborhood_counts(h: int, w: int, radius: int) -> np.ndarray:
    return _box_sum(np.ones((h, w)), radius)


def aggregate(
    volume: TopKCostVolume,
    iterations: int = 4,
    radius: int = 2,
    k: int | None = None,
    chunk: int = 512,
) -> TopKCostVolume:
    """Iterative neighborhood averaging on the union of candidate sets.

    k=None keeps the input k; pass k >= window.size for dense behavior.
    After each iteration only the top k aggregated candidates survive.
    """
    if iterations < 0:
        raise ValueError("iterations must be non-negative")
    h, w = volume.shape
    k_eff = min(volume.window.size, volume.k if k is None else k)
    counts = neighborhood_counts(h, w, radius)[:, :, None]
    ids = np.where(volume.ids >= 0, volume.ids, _PAD_ID)
    scores = volume.scores
    # normalize slot count to k_eff; real candidates always fit because the
    # lists are sorted with padding last and hold at most window.size entries
    if k_eff <= volume.k:
        ids, scores = ids[:, :, :k_eff], scores[:, :, :k_eff]
    else:
        pad_scores, pad_ids = _empty_block(h, w, k_eff - volume.k)
        ids = np.concatenate([ids, pad_ids], axis=-1)
        scores = np.concatenate([scores, pad_scores], axis=-1)
    for _ in range(iterations):
        new_scores, new_ids = _empty_block(h, w, k_eff)
        for lo in range(0, volume.window.size, chunk):
            hi = min(lo + chunk, volume.window.size)
            width = hi - lo
            dense = np.zeros((h, w, width))
            member = np.zeros((h, w, width))
            in_chunk = (ids >= lo) & (ids < hi)
            if not in_chunk.any():
                continue
            yy, xx, _ = np.nonzero(in_chunk)
            off = ids[in_chunk] - lo
            dense[yy, xx, off] = scores[in_chunk]
            member[yy, xx, off] = 1.0
            mean = _box_sum(dense, radius) / counts
            present = _box_sum(member, radius) > 0.5
            mean[~present] = -np.inf
            block_ids = np.broadcast_to(np.arange(lo, hi, dtype=np.int64), mean.shape)
            block_ids = np.where(present, block_ids, _PAD_ID)
            new_scores, new_ids = _merge_topk(
                new_scores, new_ids, mean, block_ids, k_eff
            )
        scores, ids = new_scores, new_ids
    return TopKCostVolume(
        volume.window, k_eff, _finalize_ids(ids), scores, volume.offset
    )


@dataclass(frozen=True)
class SparseMatches:
    """Confident correspondences in image coordinates."""

    p1: np.ndarray  # (N, 2) x, y in the first image
    p2: np.ndarray  # (N, 2) matched position in the second image
    score: np.ndarray  # (N,) aggregated score of the winning candidate

    def __len__(self) -> int:
        return self.p1.shape[0]

    def subset(self, keep: np.ndarray) -> "SparseMatches":
        return SparseMatches(self.p1[keep], self.p2[keep], self.score[keep])

    def within(self, mask: np.ndarray) -> "SparseMatches":
        """Entries whose first-image pixel lies inside a boolean mask."""
        xi = np.rint(self.p1[:, 0]).astype(int)
        yi = np.rint(self.p1[:, 1]).astype(int)
        return self.subset(mask[yi, xi])


def _entropy(scores: np.ndarray, filled: np.ndarray) -> np.ndarray:
    """Per-pixel entropy of the softmax over candidate scores."""
    masked = np.where(filled, scores, -np.inf)
    shifted = masked - masked.max(axis=-1, keepdims=True)
    with np.errstate(over="ignore"):
        e = np.exp(shifted)
    e[~filled] = 0.0
    z = e.sum(axis=-1, keepdims=True)
    p = e / np.maximum(z, 1e-300)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log(p), 0.0)
    return terms.sum(axis=-1)


def confident_matches(
    volume: TopKCostVolume,
    target_fraction: float = 0.6,
    mode: str = "best_score",
) -> SparseMatches:
    """Keep the requested fraction of candidate-bearing pixels.

    best_score ranks pixels by their best aggregated score; entropy ranks
    by ascending entropy of the per-pixel score distribution.  Ties break
    in scanline order, so raising the fraction only ever adds pixels.
    """
    if not 0.0 < target_fraction <= 1.0:
        raise ValueError("target_fraction must lie in (0, 1]")
    h, w = volume.shape
    filled = volume.ids >= 0
    has_any = filled[:, :, 0]
    if mode == "best_score":
        quality = -volume.best_scores()
    elif mode == "entropy":
        quality = _entropy(volume.scores, filled)
    else:
        raise ValueError(f"unknown confidence mode: {mode}")
    quality = np.where(has_any, quality, np.inf).ravel()
    candidates = int(has_any.sum())
    if candidates == 0:
        raise ValueError("cost volume has no candidates")
    n_keep = int(np.ceil(target_fraction * candidates))
    order = np.lexsort((np.arange(quality.size), quality))[:n_keep]
    order.sort()  # report matches in scanline order
    ys, xs = np.divmod(order, w)
    u, v = volume.window.displacement_of(volume.ids[ys, xs, 0])
    p1 = np.stack([xs + volume.offset, ys + volume.offset], axis=1).astype(np.float64)
    p2 = p1 + np.stack([u, v], axis=1)
    return SparseMatches(p1, p2, volume.scores[ys, xs, 0].copy())


def _peak_offset(sm: np.ndarray, s0: np.ndarray, sp: np.ndarray) -> np.ndarray:
    """Vertex of the parabola through three scores, clamped to half a step.

    Missing neighbors (nan) and non-concave triples stay at zero."""
    with np.errstate(invalid="ignore", divide="ignore"):
        den = sm - 2.0 * s0 + sp
        off = np.where(den < -1e-12, 0.5 * (sm - sp) / den, 0.0)
    return np.clip(np.nan_to_num(off), -0.5, 0.5)


def subpixel_matches(
    volume: TopKCostVolume, matches: SparseMatches
) -> SparseMatches:
    """Quadratic peak interpolation of integer matches on the score surface.

    Each axis is refined independently from the displacement's immediate
    neighbors when both are among the pixel's candidates; a match whose
    displacement is not integer, not a candidate, or whose pixel lies off
    the volume is returned unchanged."""
    n = len(matches)
    if n == 0:
        return matches
    h, w = volume.shape
    win = volume.window
    xi = np.rint(matches.p1[:, 0]).astype(np.int64) - volume.offset
    yi = np.rint(matches.p1[:, 1]).astype(np.int64) - volume.offset
    d = matches.p2 - matches.p1
    du = np.rint(d[:, 0]).astype(np.int64)
    dv = np.rint(d[:, 1]).astype(np.int64)
    usable = (
        (np.abs(d - np.stack([du, dv], axis=1)) <= 1e-9).all(axis=1)
        & (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        & win.contains(du, dv)
    )
    ids = volume.ids[np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
    scores = volume.scores[np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]

    def score_at(u: np.ndarray, v: np.ndarray) -> np.ndarray:
        inside = usable & np.asarray(win.contains(u, v))
        want = win.id_of(np.clip(u, win.u_min, win.u_max - 1),
                         np.clip(v, win.v_min, win.v_max - 1))
        hit = ids == want[:, None]
        found = inside & hit.any(axis=1)
        got = np.take_along_axis(scores, hit.argmax(axis=1)[:, None], axis=1)[:, 0]
        return np.where(found, got, np.nan)

    s0 = score_at(du, dv)
    offu = _peak_offset(score_at(du - 1, dv), s0, score_at(du + 1, dv))
    offv = _peak_offset(score_at(du, dv - 1), s0, score_at(du, dv + 1))
    keep = usable & np.isfinite(s0)
    p2 = matches.p2 + np.where(
        keep[:, None], np.stack([offu, offv], axis=1), 0.0
    )
    return SparseMatches(matches.p1.copy(), p2, matches.score.copy())


def save_cost_volume(path: str, volume: TopKCostVolume) -> None:
    """Binary dump: fixed header, then candidate ids and scores."""
    h, w = volume.shape
    header = struct.pack(
        "<4sIiiiiiiii",
        _MAGIC,
        _DUMP_VERSION,
        h,
        w,
        volume.k,
        volume.offset,
        volume.window.u_min,
        volume.window.u_max,
        volume.window.v_min,
        volume.window.v_max,
    )
    with open(path, "wb") as fh:
        fh.write(header)
        volume.ids.astype("<i8").tofile(fh)
        volume.scores.astype("<f8").tofile(fh)


def load_cost_volume(path: str) -> TopKCostVolume:
    header_size = struct.calcsize("<4sIiiiiiiii")
    with open(path, "rb") as fh:
        magic, version, h, w, k, offset, u0, u1, v0, v1 = struct.unpack(
            "<4sIiiiiiiii", fh.read(header_size)
        )
        if magic != _MAGIC:
            raise ValueError(f"not a cost-volume dump: {path}")
        if version != _DUMP_VERSION:
            raise ValueError(f"unsupported dump version {version}")
        ids = np.fromfile(fh, dtype="<i8", count=h * w * k).reshape(h, w, k)
        scores = np.fromfile(fh, dtype="<f8", count=h * w * k).reshape(h, w, k)
    return TopKCostVolume(
        SearchWindow(u0, u1, v0, v1), k, ids.astype(np.int64), scores, offset
    )
