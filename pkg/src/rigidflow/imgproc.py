"""Image, flow-field and instance-map containers plus PNG codecs.

All images are grayscale float64 in [0, 1] with shape (height, width).
Flow fields follow the 16-bit PNG convention used by driving benchmarks:
channel 1 = u, channel 2 = v (both offset by 2**15 and scaled by 64),
channel 3 = validity.  Points are (x, y) with x along the width axis.
"""

from __future__ import annotations

import os
import warnings
from dataclasses import dataclass

import cv2
import numpy as np

# BT.601 luminance weights for RGB -> gray conversion.
_LUMA = np.array([0.299, 0.587, 0.114])

FLOW_OFFSET = 2**15
FLOW_SCALE = 64.0
FLOW_LIMIT = 512.0  # |u|,|v| beyond this cannot be encoded losslessly


class CodecError(Exception):
    """Raised when an image or flow file cannot be decoded or encoded."""


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class Image:
    """Grayscale image with float64 intensities in [0, 1]."""

    data: np.ndarray

    def __post_init__(self) -> None:
        data = np.ascontiguousarray(self.data, dtype=np.float64)
        if data.ndim != 2:
            raise ValueError(f"image data must be 2-D, got shape {data.shape}")
        if not np.isfinite(data).all():
            raise ValueError("image intensities must be finite")
        if data.min() < -1e-9 or data.max() > 1.0 + 1e-9:
            raise ValueError("image intensities must lie in [0, 1]")
        object.__setattr__(self, "data", _freeze(data))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape


@dataclass(frozen=True)
class FlowField:
    """Dense flow with a validity mask; invalid pixels carry u = v = 0."""

    u: np.ndarray
    v: np.ndarray
    valid: np.ndarray

    def __post_init__(self) -> None:
        u = np.ascontiguousarray(self.u, dtype=np.float64)
        v = np.ascontiguousarray(self.v, dtype=np.float64)
        valid = np.ascontiguousarray(self.valid, dtype=bool)
        if not (u.shape == v.shape == valid.shape) or u.ndim != 2:
            raise ValueError("u, v, valid must share a 2-D shape")
        if not (np.isfinite(u[valid]).all() and np.isfinite(v[valid]).all()):
            raise ValueError("valid flow entries must be finite")
        u = np.where(valid, u, 0.0)
        v = np.where(valid, v, 0.0)
        object.__setattr__(self, "u", _freeze(u))
        object.__setattr__(self, "v", _freeze(v))
        object.__setattr__(self, "valid", _freeze(valid))

    @property
    def shape(self) -> tuple[int, int]:
        return self.u.shape

    @staticmethod
    def zeros(height: int, width: int, valid: bool = True) -> "FlowField":
        mask = np.full((height, width), valid, dtype=bool)
        z = np.zeros((height, width))
        return FlowField(z, z.copy(), mask)

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.u, self.v)


@dataclass(frozen=True)
class InstanceMap:
    """Per-pixel rigid-body labels, contiguous 0..M with 0 = background."""

    labels: np.ndarray

    def __post_init__(self) -> None:
        labels = np.ascontiguousarray(self.labels, dtype=np.int32)
        if labels.ndim != 2:
            raise ValueError("instance labels must be 2-D")
        if labels.min() < 0:
            raise ValueError("instance labels must be non-negative")
        present = np.unique(labels)
        expected = np.arange(present.size, dtype=np.int32)
        # Background label 0 may be absent only in fully covered frames.
        if present[0] == 0:
            if not np.array_equal(present, expected):
                raise ValueError("instance labels must be contiguous 0..M")
        else:
            raise ValueError("instance map must contain background label 0")
        object.__setattr__(self, "labels", _freeze(labels))

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape

    @property
    def num_instances(self) -> int:
        return int(self.labels.max())

    def mask(self, label: int) -> np.ndarray:
        return self.labels == label


def _imread(path: str, flags: int) -> np.ndarray:
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    raw = cv2.imread(path, flags)
    if raw is None:
        raise CodecError(f"cannot decode image file: {path}")
    return raw


def load_image(path: str) -> Image:
    """Load an 8/16-bit grayscale or RGB PNG as a normalized gray image."""
    raw = _imread(path, cv2.IMREAD_UNCHANGED)
    if raw.dtype == np.uint8:
        full = 255.0
    elif raw.dtype == np.uint16:
        full = 65535.0
    else:
        raise CodecError(f"unsupported bit depth {raw.dtype} in {path}")
    if raw.ndim == 2:
        gray = raw / full
    elif raw.ndim == 3 and raw.shape[2] in (3, 4):
        rgb = raw[:, :, 2::-1].astype(np.float64)  # BGR(A) -> RGB
        gray = rgb @ _LUMA / full
    else:
        raise CodecError(f"unsupported channel count in {path}")
    return Image(np.clip(gray, 0.0, 1.0))


def read_flow_png(path: str) -> FlowField:
    """Decode a 16-bit 3-channel flow PNG."""
    raw = _imread(path, cv2.IMREAD_UNCHANGED)
    if raw.ndim != 3 or raw.shape[2] != 3:
        raise CodecError(f"flow PNG must have 3 channels: {path}")
    if raw.dtype != np.uint16:
        raise CodecError(f"flow PNG must be 16-bit: {path}")
    rgb = raw[:, :, ::-1].astype(np.float64)  # stored BGR by cv2
    valid = rgb[:, :, 2] != 0
    u = (rgb[:, :, 0] - FLOW_OFFSET) / FLOW_SCALE
    v = (rgb[:, :, 1] - FLOW_OFFSET) / FLOW_SCALE
    return FlowField(u, v, valid)


def write_flow_png(path: str, flow: FlowField) -> None:
    """Encode a flow field as a 16-bit 3-channel PNG (lossless roundtrip)."""
    u, v = flow.u, flow.v
    if np.abs(u[flow.valid]).max(initial=0.0) >= FLOW_LIMIT or np.abs(
        v[flow.valid]
    ).max(initial=0.0) >= FLOW_LIMIT:
        warnings.warn(
            f"flow magnitudes exceed {FLOW_LIMIT} px and will be clamped",
            stacklevel=2,
        )
        u = np.clip(u, -FLOW_LIMIT, FLOW_LIMIT - 1.0 / FLOW_SCALE)
        v = np.clip(v, -FLOW_LIMIT, FLOW_LIMIT - 1.0 / FLOW_SCALE)
    enc_u = np.where(flow.valid, np.rint(u * FLOW_SCALE) + FLOW_OFFSET, FLOW_OFFSET)
    enc_v = np.where(flow.valid, np.rint(v * FLOW_SCALE) + FLOW_OFFSET, FLOW_OFFSET)
    out = np.stack(
        [
            flow.valid.astype(np.uint16),
            np.clip(enc_v, 0, 65535).astype(np.uint16),
            np.clip(enc_u, 0, 65535).astype(np.uint16),
        ],
        axis=2,
    )  # BGR order for cv2
    if not cv2.imwrite(path, out):
        raise CodecError(f"cannot write flow PNG: {path}")


def load_instance_map(path: str) -> InstanceMap:
    """Load a single-channel label PNG, relabeling to contiguous 0..M.

    Label 0 stays background; the remaining original labels map to 1..M
    in increasing order of their original value.
    """
    raw = _imread(path, cv2.IMREAD_UNCHANGED)
    if raw.ndim != 2:
        raise CodecError(f"instance map must be single channel: {path}")
    if raw.dtype not in (np.uint8, np.uint16):
        raise CodecError(f"instance map must be 8- or 16-bit: {path}")
    return InstanceMap(relabel_contiguous(raw))


def relabel_contiguous(labels: np.ndarray) -> np.ndarray:
    present = np.unique(labels)
    if present[0] != 0:
        present = np.concatenate([[0], present])
    lut = {int(orig): new for new, orig in enumerate(present)}
    out = np.zeros(labels.shape, dtype=np.int32)
    for orig, new in lut.items():
        out[labels == orig] = new
    return out


def write_instance_png(path: str, labels: np.ndarray) -> None:
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() > 65535:
        raise CodecError("instance labels must fit a 16-bit channel")
    if not cv2.imwrite(path, labels.astype(np.uint16)):
        raise CodecError(f"cannot write instance PNG: {path}")


def write_image_png(path: str, image: Image) -> None:
    out = np.rint(image.data * 255.0).clip(0, 255).astype(np.uint8)
    if not cv2.imwrite(path, out):
        raise CodecError(f"cannot write image PNG: {path}")


def write_mask_png(path: str, mask: np.ndarray) -> None:
    out = np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)
    if not cv2.imwrite(path, out):
        raise CodecError(f"cannot write mask PNG: {path}")
