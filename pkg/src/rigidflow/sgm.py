"""Semi-global matching over per-pixel label cost profiles.

The directional recursion is the usual one: moving along a scanline,
L(p, d) = C(p, d) + min(L(q, d),
                        L(q, d +- 1) + small_jump,
                        min_d' L(q, d') + large_jump) - min_d' L(q, d').
Multi-direction results sum the directional costs and take per-pixel
argmins; the single-direction path instead backtracks the chain optimum,
which is exact for a 1-D scanline.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class SgmPenalties:
    small_jump: float = 32.0  # label change of exactly 1
    large_jump: float = 256.0  # any larger change

    def __post_init__(self) -> None:
        if not 0 < self.small_jump <= self.large_jump:
            raise ValueError("penalties must satisfy 0 < small <= large")

    def matrix(self, n_labels: int) -> np.ndarray:
        d = np.arange(n_labels)
        gap = np.abs(d[:, None] - d[None, :])
        out = np.zeros((n_labels, n_labels))
        out[gap == 1] = self.small_jump
        out[gap > 1] = self.large_jump
        return out


def _smoothed(prev: np.ndarray, penalties: SgmPenalties) -> np.ndarray:
    """min over transitions from prev (..., L), minus the running minimum."""
    best = prev.min(axis=-1, keepdims=True)
    cand = np.minimum(prev, best + penalties.large_jump)
    cand[..., 1:] = np.minimum(cand[..., 1:], prev[..., :-1] + penalties.small_jump)
    cand[..., :-1] = np.minimum(cand[..., :-1], prev[..., 1:] + penalties.small_jump)
    return cand - best


def directional_costs(
    costs: np.ndarray, penalties: SgmPenalties, reverse: bool = False
) -> np.ndarray:
    """Accumulated costs along one scanline direction.  costs: (N, L)."""
    costs = np.asarray(costs, dtype=np.float64)
    if reverse:
        return directional_costs(costs[::-1], penalties)[::-1]
    out = np.empty_like(costs)
    out[0] = costs[0]
    for i in range(1, costs.shape[0]):
        out[i] = costs[i] + _smoothed(out[i - 1], penalties)
    return out


def evaluate_energy(
    costs: np.ndarray, labels: np.ndarray, penalties: SgmPenalties
) -> float:
    """Unary costs of a chain labeling plus its jump penalties."""
    costs = np.asarray(costs, dtype=np.float64)
    labels = np.asarray(labels)
    unary = costs[np.arange(costs.shape[0]), labels].sum()
    gap = np.abs(np.diff(labels))
    return float(
        unary
        + penalties.small_jump * (gap == 1).sum()
        + penalties.large_jump * (gap > 1).sum()
    )


def chain_optimum(
    costs: np.ndarray, penalties: SgmPenalties
) -> tuple[np.ndarray, float]:
    """Exact minimum-energy chain labeling via backtracking.

    Ties prefer the smaller label at every decision.
    """
    costs = np.asarray(costs, dtype=np.float64)
    n, n_labels = costs.shape
    trans = penalties.matrix(n_labels)
    acc = costs[0].copy()
    back = np.zeros((n, n_labels), dtype=np.int64)
    for i in range(1, n):
        reach = acc[:, None] + trans  # (from, to)
        back[i] = np.argmin(reach, axis=0)
        acc = costs[i] + reach[back[i], np.arange(n_labels)]
    labels = np.empty(n, dtype=np.int64)
    labels[-1] = int(np.argmin(acc))
    for i in range(n - 1, 0, -1):
        labels[i - 1] = back[i, labels[i]]
    return labels, float(acc[labels[-1]])


def sgm_1d(
    costs: np.ndarray, penalties: SgmPenalties, bidirectional: bool = True
) -> np.ndarray:
    """Labels for one scanline of cost vectors (N, L).

    Bidirectional mode sums both directional passes and takes per-pixel
    argmins (ties to the smaller label).  Single-direction mode returns
    the exact chain optimum.
    """
    costs = np.asarray(costs, dtype=np.float64)
    if costs.ndim != 2 or costs.shape[0] == 0:
        raise ValueError("costs must be a non-empty (N, L) array")
    if not bidirectional:
        return chain_optimum(costs, penalties)[0]
    total = directional_costs(costs, penalties) + directional_costs(
        costs, penalties, reverse=True
    )
    return np.argmin(total, axis=1)


def _sweep_horizontal(
    volume: np.ndarray, mask: np.ndarray, penalties: SgmPenalties, reverse: bool
) -> np.ndarray:
    h, w, _ = volume.shape
    out = np.empty_like(volume)
    cols = range(w - 1, -1, -1) if reverse else range(w)
    prev_col = None
    for x in cols:
        cur = volume[:, x, :].copy()
        if prev_col is not None:
            linked = mask[:, x] & mask[:, prev_col]
            if linked.any():
                cur[linked] += _smoothed(out[linked, prev_col, :], penalties)
        out[:, x, :] = cur
        prev_col = x
    return out


def sgm_field(
    volume: np.ndarray,
    mask: np.ndarray,
    penalties: SgmPenalties,
    subpixel: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """Four-direction SGM over a masked cost volume (H, W, L).

    Scanlines restart wherever the mask breaks, so smoothing never leaks
    across region boundaries.  Returns (labels, summed costs); labels are
    float when subpixel refinement is requested.
    """
    volume = np.asarray(volume, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if volume.ndim != 3 or mask.shape != volume.shape[:2]:
        raise ValueError("volume must be (H, W, L) with a matching mask")
    total = _sweep_horizontal(volume, mask, penalties, reverse=False)
    total += _sweep_horizontal(volume, mask, penalties, reverse=True)
    swapped = volume.swapaxes(0, 1)
    mask_t = mask.T
    total += _sweep_horizontal(swapped, mask_t, penalties, reverse=False).swapaxes(0, 1)
    total += _sweep_horizontal(swapped, mask_t, penalties, reverse=True).swapaxes(0, 1)
    labels = np.argmin(total, axis=2)
    if subpixel:
        return labels + parabolic_offset(total, labels), total
    return labels, total


def parabolic_offset(costs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Sub-label offset from a parabola through the argmin and neighbors.

    Zero at label-range borders and wherever the curvature vanishes;
    always clamped to [-0.5, 0.5].
    """
    costs = np.asarray(costs, dtype=np.float64)
    labels = np.asarray(labels)
    n_labels = costs.shape[-1]
    interior = (labels > 0) & (labels < n_labels - 1)
    safe = np.clip(labels, 1, max(n_labels - 2, 1))
    grid = np.indices(labels.shape)
    c0 = costs[(*grid, safe)]
    cm = costs[(*grid, safe - 1)]
    cp = costs[(*grid, safe + 1)]
    denom = cm - 2.0 * c0 + cp
    with np.errstate(divide="ignore", invalid="ignore"):
        delta = 0.5 * (cm - cp) / denom
    delta = np.where(np.isfinite(delta) & (denom > 1e-12), delta, 0.0)
    return np.where(interior, np.clip(delta, -0.5, 0.5), 0.0)
