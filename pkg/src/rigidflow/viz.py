"""Flow and error rendering for quick inspection."""

import cv2
import numpy as np

from .imgproc import CodecError, FlowField
from .pipeline import fl_outliers


def flow_to_color(flow: FlowField, max_magnitude: float | None = None) -> np.ndarray:
    """Direction as hue, magnitude as saturation; invalid pixels black.

    Returns (H, W, 3) uint8 RGB.  max_magnitude fixes the normalization
    so renders of different frames stay comparable; by default the 99th
    percentile of the valid magnitudes is used."""
    mag = flow.magnitude()
    if max_magnitude is None:
        valid_mags = mag[flow.valid]
        max_magnitude = float(np.quantile(valid_mags, 0.99)) if valid_mags.size else 1.0
    max_magnitude = max(max_magnitude, 1e-9)
    angle = np.arctan2(-flow.v, -flow.u) / np.pi  # (-1, 1], 0 = leftward
    hsv = np.zeros(flow.shape + (3,), dtype=np.uint8)
    hsv[..., 0] = ((angle + 1.0) / 2.0 * 179.0).astype(np.uint8)
    hsv[..., 1] = (np.clip(mag / max_magnitude, 0.0, 1.0) * 255.0).astype(np.uint8)
    hsv[..., 2] = 255
    rgb = cv2.cvtColor(hsv, cv2.COLOR_HSV2RGB)
    rgb[~flow.valid] = 0
    return rgb


def error_to_color(est: FlowField, gt: FlowField) -> np.ndarray:
    """Endpoint error ramp black..red, outliers marked in blue.

    Pixels without ground truth stay black."""
    if est.shape != gt.shape:
        raise ValueError("fields differ in shape")
    epe = np.hypot(est.u - gt.u, est.v - gt.v)
    ramp = np.clip(epe / 5.0, 0.0, 1.0)  # saturates at 5 px
    rgb = np.zeros(est.shape + (3,), dtype=np.uint8)
    rgb[..., 0] = (ramp * 255.0).astype(np.uint8)
    rgb[fl_outliers(est, gt)] = (64, 64, 255)
    rgb[~gt.valid] = 0
    return rgb


def write_color_png(path: str, rgb: np.ndarray) -> None:
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise ValueError("expected (H, W, 3) uint8")
    if not cv2.imwrite(path, rgb[:, :, ::-1]):  # opencv writes BGR
        raise CodecError(f"cannot write {path}")
