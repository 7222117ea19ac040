"""End-to-end flow estimation and evaluation.

The run follows the data: features for both frames, forward and backward
cost volumes, confident matches, an ego-motion frame for the background,
one epipolar solve per labeled instance, and a hard per-pixel composition
by the instance map.  Evaluation reports the fraction of pixels whose
endpoint error exceeds max(3 px, 5% of the true magnitude), split by
region and occlusion state.
"""

import math
import os
from dataclasses import dataclass, fields

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python 3.10
    import tomli as tomllib

from . import bgflow, fgflow
from .bgflow import VzRatioField
from .costvol import (
    SearchWindow,
    SparseMatches,
    TopKCostVolume,
    aggregate,
    build_cost_volume,
    confident_matches,
    subpixel_matches,
)
from .epigeo import DegenerateGeometryError, EpipolarFrame
from .fgflow import DisparityRange, InstanceFlowResult
from .imgproc import FlowField, Image, InstanceMap
from .matchnet import NetParams, extract_features, load_checkpoint
from .sgm import SgmPenalties

CONFIG_ENV = "RIGIDFLOW_CONFIG"


class ConfigError(Exception):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    """All pipeline tunables; defaults follow the reference setup."""

    checkpoint: str = ""
    top_k: int = 30
    u_min: int = -200
    u_max: int = 200
    v_min: int = -100
    v_max: int = 100
    agg_iterations: int = 4
    agg_window: int = 5
    confidence_fraction: float = 0.6
    entropy_confidence: bool = False
    sgm_small_jump: float = 32.0
    sgm_large_jump: float = 256.0
    ransac_iterations: int = 2000
    ransac_threshold: float = 1.0
    min_instance_inliers: int = 15
    max_median_error: float = 2.0
    n_omega_labels: int = 96
    superpixel_cell: int = 16
    unary_scale: float = 1.0
    lr_tol: float = 1.0
    train_search_span: int = 200
    seed: int = 0

    def __post_init__(self) -> None:
        if self.top_k < 1:
            raise ConfigError("top_k must be at least 1")
        if not 0.0 < self.confidence_fraction <= 1.0:
            raise ConfigError("confidence_fraction must be in (0, 1]")
        if self.u_min >= self.u_max or self.v_min >= self.v_max:
            raise ConfigError("search window must be non-empty")
        if not 0.0 < self.sgm_small_jump <= self.sgm_large_jump:
            raise ConfigError("need 0 < sgm_small_jump <= sgm_large_jump")
        if self.agg_iterations < 0 or self.agg_window < 1:
            raise ConfigError("bad aggregation settings")
        if self.n_omega_labels < 2 or self.superpixel_cell < 2:
            raise ConfigError("bad label grid or superpixel settings")

    def search_window(self) -> SearchWindow:
        return SearchWindow(self.u_min, self.u_max, self.v_min, self.v_max)

    def penalties(self) -> SgmPenalties:
        return SgmPenalties(self.sgm_small_jump, self.sgm_large_jump)

    def disparity_range(self) -> DisparityRange:
        """1D search span covering the window's longest displacement."""
        w = self.search_window()
        du = max(abs(w.u_min), abs(w.u_max - 1))
        dv = max(abs(w.v_min), abs(w.v_max - 1))
        span = float(math.ceil(math.hypot(du, dv)))
        return DisparityRange(-span, span, 1.0)


def load_config(path: str | None = None) -> PipelineConfig:
    """Read a flat TOML config; unset keys keep their defaults."""
    if path is None:
        path = os.environ.get(CONFIG_ENV)
    if path is None:
        return PipelineConfig()
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    known = {f.name for f in fields(PipelineConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    return PipelineConfig(**raw)


def load_params(config: PipelineConfig) -> NetParams:
    """Checkpoint lookup happens before any compute is spent."""
    if not config.checkpoint:
        raise ConfigError("no checkpoint configured")
    if not os.path.isfile(config.checkpoint):
        raise ConfigError(f"checkpoint not found: {config.checkpoint}")
    return load_checkpoint(config.checkpoint)


def mirror_window(window: SearchWindow) -> SearchWindow:
    """Window of the negated displacements (bounds are half-open)."""
    return SearchWindow(
        1 - window.u_max, 1 - window.u_min, 1 - window.v_max, 1 - window.v_min
    )


def pad_volume(volume: TopKCostVolume, shape: tuple[int, int]) -> TopKCostVolume:
    """Embed a feature-grid volume into the full image grid.

    Border pixels the matcher never saw get empty candidate lists."""
    if volume.offset == 0 and volume.shape == shape:
        return volume
    h, w = shape
    m = volume.offset
    fh, fw = volume.shape
    if m + fh > h or m + fw > w:
        raise ValueError("volume does not fit the target shape")
    ids = np.full((h, w, volume.k), -1, dtype=np.int64)
    scores = np.full((h, w, volume.k), -np.inf)
    ids[m : m + fh, m : m + fw] = volume.ids
    scores[m : m + fh, m : m + fw] = volume.scores
    return TopKCostVolume(volume.window, volume.k, ids, scores, 0)


def build_volumes(
    img1: Image, img2: Image, params: NetParams, config: PipelineConfig
) -> tuple[TopKCostVolume, TopKCostVolume, SparseMatches]:
    """Aggregated forward/backward volumes on the image grid, plus the
    confident forward matches."""
    f1 = extract_features(img1, params)
    f2 = extract_features(img2, params)
    window = config.search_window()
    radius = config.agg_window // 2
    vol_fw = aggregate(
        build_cost_volume(f1, f2, window, config.top_k),
        config.agg_iterations,
        radius,
    )
    vol_bw = aggregate(
        build_cost_volume(f2, f1, mirror_window(window), config.top_k),
        config.agg_iterations,
        radius,
    )
    mode = "entropy" if config.entropy_confidence else "best_score"
    # integer displacements bias the geometry fits; refine on the score peak
    matches = subpixel_matches(vol_fw, confident_matches(
        vol_fw, config.confidence_fraction, mode))
    return pad_volume(vol_fw, img1.shape), pad_volume(vol_bw, img1.shape), matches


def compose(
    bg: FlowField, instances: list[InstanceFlowResult], imap: InstanceMap
) -> FlowField:
    """Hard per-pixel selection: label 0 reads bg, label k its instance."""
    if bg.shape != imap.shape:
        raise ValueError("background field and instance map differ in shape")
    by_label = {r.instance: r for r in instances}
    u = bg.u.copy()
    v = bg.v.copy()
    valid = bg.valid.copy()
    for k in range(1, imap.num_instances + 1):
        if k not in by_label:
            raise ValueError(f"no flow result for instance {k}")
        dense = by_label[k].dense
        if dense.shape != imap.shape:
            raise ValueError(f"instance {k} field has the wrong shape")
        m = imap.labels == k
        u[m] = dense.u[m]
        v[m] = dense.v[m]
        valid[m] = dense.valid[m]
    return FlowField(np.where(valid, u, 0.0), np.where(valid, v, 0.0), valid)


@dataclass(frozen=True)
class OutlierCount:
    outliers: int
    total: int

    def __post_init__(self) -> None:
        if not 0 <= self.outliers <= self.total:
            raise ValueError("outliers must lie in [0, total]")

    @property
    def percent(self) -> float:
        return 100.0 * self.outliers / self.total if self.total else 0.0

    def __add__(self, other: "OutlierCount") -> "OutlierCount":
        return OutlierCount(self.outliers + other.outliers, self.total + other.total)


@dataclass(frozen=True)
class EvalReport:
    """Outlier tallies split by region (bg/fg) and occlusion state.

    Percentages over all pixels are pixel-weighted combinations of the
    two regions by construction."""

    bg_noc: OutlierCount
    fg_noc: OutlierCount
    bg_all: OutlierCount
    fg_all: OutlierCount

    @property
    def fl_bg_noc(self) -> float:
        return self.bg_noc.percent

    @property
    def fl_fg_noc(self) -> float:
        return self.fg_noc.percent

    @property
    def fl_all_noc(self) -> float:
        return (self.bg_noc + self.fg_noc).percent

    @property
    def fl_bg_all(self) -> float:
        return self.bg_all.percent

    @property
    def fl_fg_all(self) -> float:
        return self.fg_all.percent

    @property
    def fl_all_all(self) -> float:
        return (self.bg_all + self.fg_all).percent

    def merge(self, other: "EvalReport") -> "EvalReport":
        return EvalReport(
            self.bg_noc + other.bg_noc,
            self.fg_noc + other.fg_noc,
            self.bg_all + other.bg_all,
            self.fg_all + other.fg_all,
        )

    def table(self) -> str:
        rows = [
            ("Fl-bg", self.fl_bg_noc, self.fl_bg_all),
            ("Fl-fg", self.fl_fg_noc, self.fl_fg_all),
            ("Fl-all", self.fl_all_noc, self.fl_all_all),
        ]
        out = ["metric    noc       all"]
        for name, noc, everything in rows:
            out.append(f"{name:<8}  {noc:7.2f}%  {everything:7.2f}%")
        return "\n".join(out)


def fl_outliers(est: FlowField, gt: FlowField) -> np.ndarray:
    """Endpoint error beyond max(3 px, 5% of truth); holes always fail."""
    epe = np.hypot(est.u - gt.u, est.v - gt.v)
    bound = np.maximum(3.0, 0.05 * gt.magnitude())
    return (epe > bound) | ~est.valid


def evaluate_fl(
    est: FlowField,
    gt: FlowField,
    gt_valid_noc: np.ndarray,
    imap: InstanceMap,
) -> EvalReport:
    if est.shape != gt.shape or est.shape != imap.shape:
        raise ValueError("evaluation inputs differ in shape")
    gt_valid_noc = np.asarray(gt_valid_noc, dtype=bool)
    if gt_valid_noc.shape != gt.shape:
        raise ValueError("noc mask has the wrong shape")
    bad = fl_outliers(est, gt)
    fg = imap.labels > 0
    noc = gt.valid & gt_valid_noc

    def tally(region: np.ndarray) -> OutlierCount:
        return OutlierCount(int((bad & region).sum()), int(region.sum()))

    return EvalReport(
        bg_noc=tally(noc & ~fg),
        fg_noc=tally(noc & fg),
        bg_all=tally(gt.valid & ~fg),
        fg_all=tally(gt.valid & fg),
    )


def _grid(shape: tuple[int, int]) -> np.ndarray:
    gx, gy = np.meshgrid(
        np.arange(shape[1], dtype=np.float64), np.arange(shape[0], dtype=np.float64)
    )
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def _fill_holes(flow: FlowField, frame: EpipolarFrame) -> FlowField:
    """Rotation-only flow at any pixel no stage could estimate."""
    holes = ~flow.valid
    if not holes.any():
        return flow
    rot = frame.rotation.apply(_grid(flow.shape))
    u = np.where(holes, rot[:, 0].reshape(flow.shape), flow.u)
    v = np.where(holes, rot[:, 1].reshape(flow.shape), flow.v)
    return FlowField(u, v, np.ones(flow.shape, dtype=bool))


def _epipole_line(frame: EpipolarFrame) -> str:
    e = frame.epipole
    if e[2] == 0.0:
        return f"epipole_at_infinity {e[0]:.6f} {e[1]:.6f}"
    return f"epipole {e[0] / e[2]:.3f} {e[1] / e[2]:.3f}"


def run(
    img1: Image,
    img2: Image,
    instances: InstanceMap,
    config: PipelineConfig,
) -> tuple[FlowField, str]:
    """Dense flow for the frame pair plus a diagnostic report.

    A background geometry failure is fatal; per-instance failures fall
    back to raw matches inside that instance and are only reported."""
    if img1.shape != img2.shape or img1.shape != instances.shape:
        raise ValueError("images and instance map must share dimensions")
    params = load_params(config)
    penalties = config.penalties()
    vol_fw, vol_bw, matches = build_volumes(img1, img2, params, config)

    frame = bgflow.background_frame(
        matches, instances, config.ransac_iterations, config.ransac_threshold
    )
    labels = bgflow.omega_labels(matches, frame, config.n_omega_labels)
    semi = bgflow.background_vz(
        instances, frame, vol_fw, vol_bw, matches, labels,
        penalties, config.unary_scale, config.lr_tol,
    )
    filled = bgflow.extrapolate_vz(semi, frame.epipole, instances)
    bg_mask = instances.labels == 0
    support = filled.valid & bg_mask
    if not support.any():
        raise DegenerateGeometryError("no background estimate survived checking")
    graph = bgflow.superpixels(img1, config.superpixel_cell)
    planes = bgflow.slanted_plane(
        VzRatioField(np.where(support, filled.omega, 0.0), support),
        img1, graph, label_step=labels[1] - labels[0],
    )
    bg_flow = bgflow.bg_flow_from_vz(planes.field, frame)

    results = []
    for k in range(1, instances.num_instances + 1):
        results.append(
            fgflow.estimate_instance_flow(
                instances.mask(k), vol_fw, vol_bw, matches, img1,
                instance=k,
                drange=config.disparity_range(),
                penalties=penalties,
                lr_tol=config.lr_tol,
                unary_scale=config.unary_scale,
                ransac_iterations=config.ransac_iterations,
                ransac_threshold=config.ransac_threshold,
                min_inliers=config.min_instance_inliers,
                max_median_error=config.max_median_error,
            )
        )
    flow = _fill_holes(compose(bg_flow, results, instances), frame)

    h, w = img1.shape
    lines = [
        "status ok",
        f"width {w}",
        f"height {h}",
        f"instances {instances.num_instances}",
        f"confident_matches {len(matches)}",
        _epipole_line(frame),
        f"omega_top {labels[-1]:.6f}",
        f"background_coverage {semi.valid[bg_mask].mean():.4f}",
        f"background_sweeps {len(planes.energies)}",
        "",
        "instance status matches inliers median_error lr_coverage",
    ]
    for r in results:
        n_local = len(matches.within(instances.labels == r.instance))
        med = "inf" if not np.isfinite(r.median_error) else f"{r.median_error:.3f}"
        lines.append(
            f"{r.instance} {r.status} {n_local} {r.inlier_count} "
            f"{med} {r.lr_survival:.4f}"
        )
    return flow, "\n".join(lines) + "\n"
