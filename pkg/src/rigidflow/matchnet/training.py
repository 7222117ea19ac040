"""Training the matcher as 1-D search-space classification.

Every drawn pixel yields two examples: a horizontal strip and a vertical
strip, each pairing a reference patch with a search patch whose center is
the true match, so the ground-truth index sits mid-strip.  Targets smear
mass over the two neighbors on each side of the truth, and the loss is
softmax cross-entropy over strip positions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..imgproc import FlowField, Image
from .net import NetParams, NetSpec, backward_features, forward_features, init_params

# Target mass at the truth and at offsets of one and two positions.
TARGET_WEIGHTS = (0.5, 0.2, 0.05)

HORIZONTAL, VERTICAL = 0, 1


def make_target(n_labels: int, gt_index: int) -> np.ndarray:
    """Smoothed one-hot over strip positions, renormalized at the borders."""
    if not 0 <= gt_index < n_labels:
        raise ValueError(f"gt_index {gt_index} outside [0, {n_labels})")
    target = np.zeros(n_labels)
    target[gt_index] = TARGET_WEIGHTS[0]
    for off in (1, 2):
        w = TARGET_WEIGHTS[off]
        if gt_index - off >= 0:
            target[gt_index - off] = w
        if gt_index + off < n_labels:
            target[gt_index + off] = w
    return target / target.sum()


def softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_xent(scores: np.ndarray, targets: np.ndarray):
    """Summed cross-entropy and its gradient w.r.t. the scores."""
    if not np.isfinite(scores).all():
        raise ValueError("non-finite matching scores")
    p = softmax(scores)
    logp = scores - scores.max(axis=-1, keepdims=True)
    logp -= np.log(np.exp(logp).sum(axis=-1, keepdims=True))
    loss = -(targets * logp).sum()
    return float(loss), p - targets


@dataclass
class TrainingSample:
    patch1: np.ndarray  # (rf, rf)
    patch2: np.ndarray  # (rf, rf + span) or (rf + span, rf)
    axis: int  # HORIZONTAL or VERTICAL
    gt_index: int


def sample_training_pair(
    img1: Image,
    img2: Image,
    flow: FlowField,
    x: int,
    y: int,
    axis: int,
    span: int,
    receptive_field: int,
) -> TrainingSample | None:
    """Cut one training pair centered on pixel (x, y), or None if the
    reference patch, the search strip, or the flow at the pixel is unusable.

    The ground truth is rounded to the nearest pixel so the true index is
    exactly span // 2.
    """
    if span <= 0 or span % 2:
        raise ValueError("span must be positive and even")
    rf = receptive_field
    half = rf // 2
    h, w = img1.shape
    if not (half <= x < w - half and half <= y < h - half):
        return None
    if not flow.valid[y, x]:
        return None
    tx = x + int(np.rint(flow.u[y, x]))
    ty = y + int(np.rint(flow.v[y, x]))
    ext = half + span // 2
    if axis == HORIZONTAL:
        x0, x1 = tx - ext, tx + ext + 1
        y0, y1 = ty - half, ty + half + 1
    elif axis == VERTICAL:
        x0, x1 = tx - half, tx + half + 1
        y0, y1 = ty - ext, ty + ext + 1
    else:
        raise ValueError(f"unknown axis {axis}")
    if not (0 <= x0 and x1 <= w and 0 <= y0 and y1 <= h):
        return None
    patch1 = img1.data[y - half : y + half + 1, x - half : x + half + 1]
    patch2 = img2.data[y0:y1, x0:x1]
    return TrainingSample(patch1.copy(), patch2.copy(), axis, span // 2)


@dataclass
class PatchDataset:
    """Training pairs grouped by strip orientation, stored as arrays."""

    span: int
    receptive_field: int
    patches1: dict[int, np.ndarray] = field(default_factory=dict)
    patches2: dict[int, np.ndarray] = field(default_factory=dict)
    gt_index: int = 0

    @staticmethod
    def from_samples(samples: list[TrainingSample]) -> "PatchDataset":
        if not samples:
            raise ValueError("empty training set")
        rf = samples[0].patch1.shape[0]
        span = max(samples[0].patch2.shape) - rf
        ds = PatchDataset(span=span, receptive_field=rf, gt_index=span // 2)
        for axis in (HORIZONTAL, VERTICAL):
            group = [s for s in samples if s.axis == axis]
            if group:
                ds.patches1[axis] = np.stack([s.patch1 for s in group])
                ds.patches2[axis] = np.stack([s.patch2 for s in group])
        ds.size = sum(len(v) for v in ds.patches1.values())
        return ds

    size: int = 0


def draw_training_set(
    rng: np.random.Generator,
    frames: list[tuple[Image, Image, FlowField]],
    n_pixels: int,
    span: int,
    receptive_field: int,
    max_tries: int = 100000,
) -> PatchDataset:
    """Draw pixels uniformly over the frame list; two examples per pixel."""
    samples: list[TrainingSample] = []
    tries = 0
    while len(samples) < 2 * n_pixels and tries < max_tries:
        tries += 1
        img1, img2, flow = frames[rng.integers(len(frames))]
        h, w = img1.shape
        x = int(rng.integers(w))
        y = int(rng.integers(h))
        pair_h = sample_training_pair(
            img1, img2, flow, x, y, HORIZONTAL, span, receptive_field
        )
        pair_v = sample_training_pair(
            img1, img2, flow, x, y, VERTICAL, span, receptive_field
        )
        if pair_h is None or pair_v is None:
            continue
        samples.append(pair_h)
        samples.append(pair_v)
    if len(samples) < 2 * n_pixels:
        raise RuntimeError("could not draw enough in-bounds training pixels")
    return PatchDataset.from_samples(samples)


@dataclass
class TrainingConfig:
    iterations: int = 10000
    batch_size: int = 128
    learning_rate: float = 0.01
    weight_decay: float = 5e-4
    lr_milestones: tuple[int, ...] = (40000, 60000, 80000)
    lr_factor: float = 0.5
    seed: int = 0
    log_every: int = 0  # 0 disables progress logging


_DECAYED = ("w",)
_TRAINED = ("w", "b", "gamma", "beta")


class AdamState:
    def __init__(self, params: NetParams):
        self.m = [
            {k: np.zeros_like(layer[k]) for k in _TRAINED} for layer in params.layers
        ]
        self.v = [
            {k: np.zeros_like(layer[k]) for k in _TRAINED} for layer in params.layers
        ]
        self.t = 0

    def step(
        self,
        params: NetParams,
        grads: list[dict[str, np.ndarray]],
        lr: float,
        weight_decay: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ) -> None:
        self.t += 1
        correct1 = 1.0 - beta1**self.t
        correct2 = 1.0 - beta2**self.t
        for layer, grad, m, v in zip(params.layers, grads, self.m, self.v):
            for key in _TRAINED:
                g = grad[key]
                if key in _DECAYED and weight_decay:
                    g = g + weight_decay * layer[key]
                m[key] = beta1 * m[key] + (1 - beta1) * g
                v[key] = beta2 * v[key] + (1 - beta2) * g * g
                layer[key] -= lr * (m[key] / correct1) / (
                    np.sqrt(v[key] / correct2) + eps
                )


def scores_for_batch(
    params: NetParams,
    patches1: np.ndarray,
    patches2: np.ndarray,
    axis: int,
    train: bool,
):
    """Siamese forward: reference descriptor against every strip position."""
    x1 = patches1[:, :, :, None]
    x2 = patches2[:, :, :, None]
    f1, cache1 = forward_features(x1, params, train=train)
    f2, cache2 = forward_features(x2, params, train=train)
    feat1 = f1[:, 0, 0, :]
    if axis == HORIZONTAL:
        feat2 = f2[:, 0, :, :]
    else:
        feat2 = f2[:, :, 0, :]
    scores = np.einsum("bc,bqc->bq", feat1, feat2)
    return scores, (f1, f2, feat1, feat2, cache1, cache2)


def _scores_backward(dscores: np.ndarray, fwd_cache, axis: int, params: NetParams):
    f1, f2, feat1, feat2, cache1, cache2 = fwd_cache
    dfeat1 = np.einsum("bq,bqc->bc", dscores, feat2)
    dfeat2 = np.einsum("bq,bc->bqc", dscores, feat1)
    df1 = dfeat1[:, None, None, :]
    if axis == HORIZONTAL:
        df2 = dfeat2[:, None, :, :]
    else:
        df2 = dfeat2[:, :, None, :]
    _, grads1 = backward_features(df1, params, cache1)
    _, grads2 = backward_features(df2, params, cache2)
    for g1, g2 in zip(grads1, grads2):
        for key in g1:
            g1[key] += g2[key]
    return grads1


def loss_and_grads(
    params: NetParams, batches: dict[int, tuple[np.ndarray, np.ndarray, np.ndarray]]
):
    """Mean cross-entropy over the combined batch plus parameter gradients.

    batches maps axis -> (patches1, patches2, targets).
    """
    total = sum(b[0].shape[0] for b in batches.values())
    loss = 0.0
    acc: list[dict[str, np.ndarray]] | None = None
    for axis, (p1, p2, targets) in batches.items():
        scores, cache = scores_for_batch(params, p1, p2, axis, train=True)
        group_loss, dscores = softmax_xent(scores, targets)
        loss += group_loss
        grads = _scores_backward(dscores / total, cache, axis, params)
        if acc is None:
            acc = grads
        else:
            for a, g in zip(acc, grads):
                for key in a:
                    a[key] += g[key]
    return loss / total, acc


def train(
    dataset: PatchDataset,
    spec: NetSpec,
    config: TrainingConfig,
    params: NetParams | None = None,
    log=None,
) -> tuple[NetParams, list[tuple[int, float]]]:
    """Adam training; halves the learning rate at the configured milestones."""
    if spec.receptive_field != dataset.receptive_field:
        raise ValueError(
            f"net receptive field {spec.receptive_field} does not match "
            f"dataset patches of {dataset.receptive_field}"
        )
    rng = np.random.default_rng(config.seed)
    if params is None:
        params = init_params(spec, seed=config.seed)
    state = AdamState(params)
    target = make_target(dataset.span + 1, dataset.gt_index)
    history: list[tuple[int, float]] = []
    lr = config.learning_rate
    axes = sorted(dataset.patches1)
    sizes = np.array([len(dataset.patches1[a]) for a in axes])
    cum = np.concatenate([[0], np.cumsum(sizes)])
    for it in range(config.iterations):
        if it in config.lr_milestones:
            lr *= config.lr_factor
        draw = rng.integers(cum[-1], size=config.batch_size)
        batches = {}
        for ai, axis in enumerate(axes):
            local = draw[(draw >= cum[ai]) & (draw < cum[ai + 1])] - cum[ai]
            if local.size == 0:
                continue
            p1 = dataset.patches1[axis][local]
            p2 = dataset.patches2[axis][local]
            batches[axis] = (p1, p2, np.tile(target, (local.size, 1)))
        loss, grads = loss_and_grads(params, batches)
        if not np.isfinite(loss):
            raise RuntimeError(f"training diverged at iteration {it}: loss={loss}")
        state.step(params, grads, lr, config.weight_decay)
        if config.log_every and (it % config.log_every == 0 or it == config.iterations - 1):
            history.append((it, loss))
            if log is not None:
                log(f"iter {it:6d}  loss {loss:.4f}  lr {lr:.4g}")
    params.check_finite()
    return params, history


def argmax_accuracy(
    params: NetParams, dataset: PatchDataset, chunk: int = 256
) -> float:
    """Fraction of examples whose best-scoring position is the truth."""
    correct = 0
    total = 0
    for axis, p1 in dataset.patches1.items():
        p2 = dataset.patches2[axis]
        for i in range(0, len(p1), chunk):
            scores, _ = scores_for_batch(
                params, p1[i : i + chunk], p2[i : i + chunk], axis, train=False
            )
            correct += int((scores.argmax(axis=1) == dataset.gt_index).sum())
            total += scores.shape[0]
    return correct / total


def make_shifted_patch_dataset(
    seed: int,
    n_pixels: int,
    span: int,
    receptive_field: int,
    image_size: int = 96,
    n_textures: int = 25,
    max_shift: int = 6,
) -> PatchDataset:
    """Synthetic task: integer-shifted copies of band-limited noise."""
    rng = np.random.default_rng(seed)
    frames = []
    for _ in range(n_textures):
        tex = _bandlimited_noise(rng, image_size, image_size)
        sx = int(rng.integers(-max_shift, max_shift + 1))
        sy = int(rng.integers(-max_shift, max_shift + 1))
        shifted = np.roll(tex, (sy, sx), axis=(0, 1))
        flow = FlowField(
            np.full(tex.shape, float(sx)),
            np.full(tex.shape, float(sy)),
            np.ones(tex.shape, dtype=bool),
        )
        frames.append((Image(tex), Image(shifted), flow))
    return draw_training_set(rng, frames, n_pixels, span, receptive_field)


def _bandlimited_noise(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """Low-pass filtered white noise, normalized to [0.05, 0.95]."""
    noise = rng.standard_normal((h, w))
    spectrum = np.fft.rfft2(noise)
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.rfftfreq(w)[None, :]
    spectrum *= np.exp(-((fx**2 + fy**2) / (2 * 0.08**2)))
    tex = np.fft.irfft2(spectrum, s=(h, w))
    tex -= tex.min()
    peak = tex.max()
    if peak > 0:
        tex /= peak
    return 0.05 + 0.9 * tex
