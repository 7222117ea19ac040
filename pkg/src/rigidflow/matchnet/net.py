"""Siamese feature network: stacked 3x3 conv + batch norm + ReLU.

Matching compares per-pixel feature vectors by inner product.  The stack
uses no pooling and no padding, so a net with L layers sees a receptive
field of 2L + 1 pixels and a full image shrinks by L pixels per side;
FeatureMap carries that offset so feature coordinates can be mapped back
to image pixels.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..imgproc import Image
from . import layers

CHECKPOINT_VERSION = 1

# Filter counts for the full-scale nine-layer matcher.
FULL_SCALE_FILTERS = (32, 32, 64, 64, 64, 128, 128, 128, 128)


class CheckpointError(Exception):
    """Raised when a checkpoint file is missing, stale or inconsistent."""


@dataclass(frozen=True)
class NetSpec:
    filters: tuple[int, ...]
    kernel: int = 3
    in_channels: int = 1

    def __post_init__(self) -> None:
        if not self.filters or any(f <= 0 for f in self.filters):
            raise ValueError("filters must be a non-empty tuple of positives")
        if self.kernel < 3 or self.kernel % 2 == 0:
            raise ValueError("kernel must be odd and >= 3")
        object.__setattr__(self, "filters", tuple(int(f) for f in self.filters))

    @property
    def n_layers(self) -> int:
        return len(self.filters)

    @property
    def receptive_field(self) -> int:
        return self.n_layers * (self.kernel - 1) + 1

    @property
    def margin(self) -> int:
        """Pixels trimmed from each image border by the valid convolutions."""
        return self.n_layers * (self.kernel - 1) // 2

    @property
    def feature_dim(self) -> int:
        return self.filters[-1]

    @staticmethod
    def full_scale() -> "NetSpec":
        return NetSpec(FULL_SCALE_FILTERS)

    @staticmethod
    def desk_scale(width: int = 8, n_layers: int = 2) -> "NetSpec":
        return NetSpec((width,) * n_layers)


@dataclass
class NetParams:
    spec: NetSpec
    layers: list[dict[str, np.ndarray]] = field(default_factory=list)

    def check_finite(self) -> None:
        for i, layer in enumerate(self.layers):
            for name, arr in layer.items():
                if not np.isfinite(arr).all():
                    raise ValueError(f"non-finite parameter {name} in layer {i}")


def init_params(spec: NetSpec, seed: int = 0) -> NetParams:
    """Uniform fan-in initialization; identity batch-norm statistics."""
    rng = np.random.default_rng(seed)
    params = NetParams(spec)
    c_in = spec.in_channels
    for c_out in spec.filters:
        fan_in = spec.kernel * spec.kernel * c_in
        bound = np.sqrt(3.0 / fan_in)
        params.layers.append(
            {
                "w": rng.uniform(-bound, bound, (spec.kernel, spec.kernel, c_in, c_out)),
                "b": np.zeros(c_out),
                "gamma": np.ones(c_out),
                "beta": np.zeros(c_out),
                "run_mean": np.zeros(c_out),
                "run_var": np.ones(c_out),
            }
        )
        c_in = c_out
    return params


def forward_features(
    x: np.ndarray,
    params: NetParams,
    train: bool = False,
    bn_momentum: float = 0.9,
):
    """Forward pass over an NHWC batch.

    Training mode normalizes with batch statistics and updates the running
    averages in place; inference mode uses the stored running statistics.
    Returns (features, caches); caches are None in inference mode.
    """
    caches = [] if train else None
    for layer in params.layers:
        x, conv_cache = layers.conv_forward(x, layer["w"], layer["b"])
        if train:
            x, bn_cache, mu, var = layers.batchnorm_forward(
                x, layer["gamma"], layer["beta"]
            )
            layer["run_mean"] = bn_momentum * layer["run_mean"] + (1 - bn_momentum) * mu
            layer["run_var"] = bn_momentum * layer["run_var"] + (1 - bn_momentum) * var
            x, relu_cache = layers.relu_forward(x)
            caches.append((conv_cache, bn_cache, relu_cache))
        else:
            x = layers.batchnorm_inference(
                x, layer["gamma"], layer["beta"], layer["run_mean"], layer["run_var"]
            )
            x, _ = layers.relu_forward(x)
    return x, caches


def backward_features(dout: np.ndarray, params: NetParams, caches):
    """Backprop through the stack; returns (dx, per-layer gradient dicts)."""
    grads = [dict() for _ in params.layers]
    for i in range(len(params.layers) - 1, -1, -1):
        conv_cache, bn_cache, relu_cache = caches[i]
        dout = layers.relu_backward(dout, relu_cache)
        dout, dgamma, dbeta = layers.batchnorm_backward(dout, bn_cache)
        dout, dw, db = layers.conv_backward(dout, conv_cache)
        grads[i] = {"w": dw, "b": db, "gamma": dgamma, "beta": dbeta}
    return dout, grads


@dataclass(frozen=True)
class FeatureMap:
    """Per-pixel descriptors on the valid-convolution grid.

    Feature pixel (row, col) describes image pixel (row + offset,
    col + offset).
    """

    data: np.ndarray
    offset: int

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[:2]

    @property
    def dim(self) -> int:
        return self.data.shape[2]


def extract_features(image: Image | np.ndarray, params: NetParams) -> FeatureMap:
    """Inference-mode descriptors for every pixel with full context."""
    data = image.data if isinstance(image, Image) else np.asarray(image, np.float64)
    if data.ndim != 2:
        raise ValueError("expected a single grayscale image")
    spec = params.spec
    if min(data.shape) < spec.receptive_field:
        raise ValueError(
            f"image {data.shape} smaller than receptive field {spec.receptive_field}"
        )
    x = data[None, :, :, None]
    out, _ = forward_features(x, params, train=False)
    return FeatureMap(out[0], spec.margin)


def match_score(f: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Inner-product similarity between descriptor arrays (broadcasting)."""
    return np.sum(np.asarray(f) * np.asarray(g), axis=-1)


def save_checkpoint(path: str, params: NetParams) -> None:
    spec = params.spec
    arrays = {
        "version": np.array(CHECKPOINT_VERSION),
        "filters": np.array(spec.filters, dtype=np.int64),
        "kernel": np.array(spec.kernel),
        "in_channels": np.array(spec.in_channels),
    }
    for i, layer in enumerate(params.layers):
        for name, arr in layer.items():
            arrays[f"layer{i}_{name}"] = arr
    np.savez(path, **arrays)


def load_checkpoint(path: str) -> NetParams:
    try:
        with np.load(path) as data:
            arrays = {k: data[k] for k in data.files}
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    version = int(arrays.get("version", -1))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    spec = NetSpec(
        tuple(int(f) for f in arrays["filters"]),
        kernel=int(arrays["kernel"]),
        in_channels=int(arrays["in_channels"]),
    )
    params = NetParams(spec)
    c_in = spec.in_channels
    for i, c_out in enumerate(spec.filters):
        layer = {}
        expected = {
            "w": (spec.kernel, spec.kernel, c_in, c_out),
            "b": (c_out,),
            "gamma": (c_out,),
            "beta": (c_out,),
            "run_mean": (c_out,),
            "run_var": (c_out,),
        }
        for name, shape in expected.items():
            key = f"layer{i}_{name}"
            if key not in arrays:
                raise CheckpointError(f"checkpoint missing tensor {key}")
            if arrays[key].shape != shape:
                raise CheckpointError(
                    f"tensor {key} has shape {arrays[key].shape}, expected {shape}"
                )
            layer[name] = arrays[key].astype(np.float64)
        params.layers.append(layer)
        c_in = c_out
    params.check_finite()
    return params
