"""Ray-cast synthetic driving scenes with exact ground truth.

A scene is a static background (ground plane plus a backdrop wall, which
keeps the background geometry non-planar) and a few independently moving
textured patches.  Both frames are rendered by intersecting pixel rays
with the same textured quads, so frame 2 is an exact rigid re-observation
of frame 1 and the analytic flow satisfies every body's epipolar
constraint to rounding error.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .epigeo import DegenerateGeometryError, FundamentalMatrix
from .imgproc import FlowField, Image, InstanceMap

_EPS = 1e-9


def rodrigues(axis_angle) -> np.ndarray:
    """Rotation matrix from an axis-angle vector."""
    w = np.asarray(axis_angle, dtype=np.float64)
    theta = np.linalg.norm(w)
    if theta < 1e-12:
        return np.eye(3)
    k = w / theta
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(theta) * kx + (1 - np.cos(theta)) * (kx @ kx)


@dataclass(frozen=True)
class Camera:
    f: float
    cx: float
    cy: float

    def matrix(self) -> np.ndarray:
        return np.array([[self.f, 0, self.cx], [0, self.f, self.cy], [0, 0, 1.0]])

    def rays(self, width: int, height: int) -> np.ndarray:
        """Unit-z ray directions for every pixel center, (H, W, 3)."""
        xs = (np.arange(width) - self.cx) / self.f
        ys = (np.arange(height) - self.cy) / self.f
        d = np.empty((height, width, 3))
        d[:, :, 0] = xs[None, :]
        d[:, :, 1] = ys[:, None]
        d[:, :, 2] = 1.0
        return d

    def project(self, points: np.ndarray) -> np.ndarray:
        """(..., 3) camera-frame points to (..., 2) pixel coordinates."""
        z = points[..., 2]
        return np.stack(
            [self.f * points[..., 0] / z + self.cx, self.f * points[..., 1] / z + self.cy],
            axis=-1,
        )


@dataclass(frozen=True)
class RigidMotion:
    r: np.ndarray
    t: np.ndarray

    @staticmethod
    def identity() -> "RigidMotion":
        return RigidMotion(np.eye(3), np.zeros(3))

    @staticmethod
    def about(axis_angle, center, translation) -> "RigidMotion":
        """Rotate about a pivot point, then translate."""
        r = rodrigues(axis_angle)
        center = np.asarray(center, dtype=np.float64)
        t = np.asarray(translation, dtype=np.float64) + center - r @ center
        return RigidMotion(r, t)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return points @ self.r.T + self.t

    def then(self, after: "RigidMotion") -> "RigidMotion":
        """Composite motion: self first, then `after`."""
        return RigidMotion(after.r @ self.r, after.r @ self.t + after.t)

    def fundamental(self, camera: Camera) -> FundamentalMatrix:
        """F with p2~' F p1~ = 0 for points moved by this camera-frame map."""
        t = self.t
        if np.linalg.norm(t) < 1e-12:
            raise DegenerateGeometryError("pure rotation has no fundamental matrix")
        tx = np.array([[0, -t[2], t[1]], [t[2], 0, -t[0]], [-t[1], t[0], 0]])
        k_inv = np.linalg.inv(camera.matrix())
        return FundamentalMatrix(k_inv.T @ tx @ self.r @ k_inv)


def bandlimited_noise(
    rng: np.random.Generator, height: int, width: int, sigma: float = 0.10
) -> np.ndarray:
    """Low-pass filtered white noise in [0.05, 0.95], periodic."""
    spectrum = np.fft.rfft2(rng.standard_normal((height, width)))
    fy = np.fft.fftfreq(height)[:, None]
    fx = np.fft.rfftfreq(width)[None, :]
    spectrum *= np.exp(-((fx**2 + fy**2) / (2 * sigma**2)))
    tex = np.fft.irfft2(spectrum, s=(height, width))
    tex -= tex.min()
    peak = tex.max()
    if peak > 0:
        tex /= peak
    return 0.05 + 0.9 * tex


def _blur_periodic(tex: np.ndarray, sigma: float) -> np.ndarray:
    """Gaussian low-pass in the frequency domain (textures are periodic)."""
    spectrum = np.fft.rfft2(tex)
    fy = np.fft.fftfreq(tex.shape[0])[:, None]
    fx = np.fft.rfftfreq(tex.shape[1])[None, :]
    spectrum *= np.exp(-2 * (np.pi * sigma) ** 2 * (fx**2 + fy**2))
    return np.fft.irfft2(spectrum, s=tex.shape)


N_LOD = 7


def _pyramid(tex: np.ndarray) -> tuple[np.ndarray, ...]:
    """Pre-filtered levels; level l suits ~2^l texels per screen pixel."""
    return (tex,) + tuple(_blur_periodic(tex, 0.6 * 2**level) for level in range(1, N_LOD))


@dataclass(frozen=True)
class Quad:
    """Textured planar patch X(s, t) = origin + s*e1 + t*e2, s,t in [0,1]."""

    origin: np.ndarray
    e1: np.ndarray
    e2: np.ndarray
    texture: np.ndarray
    levels: tuple[np.ndarray, ...] = ()

    def __post_init__(self) -> None:
        if not self.levels:
            object.__setattr__(self, "levels", _pyramid(self.texture))

    def moved(self, motion: RigidMotion) -> "Quad":
        return Quad(
            motion.apply(self.origin),
            motion.r @ self.e1,
            motion.r @ self.e2,
            self.texture,
            self.levels,
        )

    def sample(self, s: np.ndarray, t: np.ndarray, level: np.ndarray) -> np.ndarray:
        """Bilinear lookup at local coordinates, per-sample pyramid level."""
        th, tw = self.texture.shape
        xs = np.clip(s * (tw - 1), 0.0, tw - 1)
        ys = np.clip(t * (th - 1), 0.0, th - 1)
        x0 = np.minimum(xs.astype(np.int64), tw - 2)
        y0 = np.minimum(ys.astype(np.int64), th - 2)
        fx, fy = xs - x0, ys - y0
        out = np.empty_like(xs)
        for lv in np.unique(level):
            tex = self.levels[lv]
            m = level == lv
            out[m] = (
                tex[y0[m], x0[m]] * (1 - fx[m]) * (1 - fy[m])
                + tex[y0[m], x0[m] + 1] * fx[m] * (1 - fy[m])
                + tex[y0[m] + 1, x0[m]] * (1 - fx[m]) * fy[m]
                + tex[y0[m] + 1, x0[m] + 1] * fx[m] * fy[m]
            )
        return out


@dataclass
class RayHits:
    """Nearest-surface intersection of each pixel ray."""

    depth: np.ndarray  # z of the hit point (+inf where nothing was hit)
    surface: np.ndarray  # quad index, -1 where nothing was hit
    s: np.ndarray
    t: np.ndarray

    @property
    def hit(self) -> np.ndarray:
        return self.surface >= 0


def raycast(rays: np.ndarray, quads: list[Quad]) -> RayHits:
    """Z-buffered intersection of unit-z rays from the origin with quads."""
    h, w, _ = rays.shape
    depth = np.full((h, w), np.inf)
    surface = np.full((h, w), -1, dtype=np.int64)
    s_best = np.zeros((h, w))
    t_best = np.zeros((h, w))
    for qi, quad in enumerate(quads):
        n = np.cross(quad.e1, quad.e2)
        denom = rays @ n
        plane = quad.origin @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            tau = plane / denom
            ok = (np.abs(denom) > _EPS) & (tau > _EPS)
            rel = tau[:, :, None] * rays - quad.origin
            g11 = quad.e1 @ quad.e1
            g12 = quad.e1 @ quad.e2
            g22 = quad.e2 @ quad.e2
            det = g11 * g22 - g12 * g12
            a1 = rel @ quad.e1
            a2 = rel @ quad.e2
            s = (g22 * a1 - g12 * a2) / det
            t = (g11 * a2 - g12 * a1) / det
            ok &= (s >= 0) & (s <= 1) & (t >= 0) & (t <= 1) & (tau < depth)
        depth[ok] = tau[ok]
        surface[ok] = qi
        s_best[ok] = s[ok]
        t_best[ok] = t[ok]
    return RayHits(depth, surface, s_best, t_best)


def _lod(hits: RayHits, qi: int, tex_shape: tuple[int, ...]) -> np.ndarray:
    """Pyramid level per hit pixel from the on-screen texel density.

    Perspective compresses distant parts of a plane to many texels per
    pixel; sampling the matching pre-filtered level avoids aliasing that
    would differ between the two frames.
    """
    sel = hits.surface == qi
    s = np.where(sel, hits.s, np.nan)
    t = np.where(sel, hits.t, np.nan)
    gs = np.gradient(s)
    gt = np.gradient(t)
    den = np.fmax(
        np.hypot(gs[0], gs[1]) * (tex_shape[1] - 1),
        np.hypot(gt[0], gt[1]) * (tex_shape[0] - 1),
    )
    # silhouette pixels have cross-surface gradients; full blur is safe there
    den = np.where(np.isfinite(den), den, 2.0 ** (N_LOD - 1))
    level = np.ceil(np.log2(np.maximum(den, 1.0))).astype(np.int64)
    return np.clip(level, 0, N_LOD - 1)[sel]


def render(rays: np.ndarray, quads: list[Quad]) -> tuple[Image, RayHits]:
    hits = raycast(rays, quads)
    out = np.zeros(hits.depth.shape)
    for qi, quad in enumerate(quads):
        sel = hits.surface == qi
        if sel.any():
            out[sel] = quad.sample(hits.s[sel], hits.t[sel], _lod(hits, qi, quad.texture.shape))
    return Image(np.clip(out, 0.0, 1.0)), hits


@dataclass
class SyntheticScene:
    camera: Camera
    motions: list[RigidMotion]  # camera-frame map per label, 0 = background
    img1: Image
    img2: Image
    flow: FlowField
    instances: InstanceMap
    occluded: np.ndarray  # pixels of frame 1 not visible in frame 2
    points: np.ndarray = field(repr=False)  # (H, W, 3) frame-1 surface points

    @property
    def noc(self) -> np.ndarray:
        """Evaluation mask: valid ground truth, visible in both frames."""
        return self.flow.valid & ~self.occluded

    def body_f(self, label: int) -> FundamentalMatrix:
        return self.motions[label].fundamental(self.camera)


@dataclass(frozen=True)
class SceneSpec:
    width: int = 256
    height: int = 128
    n_objects: int = 2
    focal: float = 160.0
    # ego translation is drawn around this forward speed (+z into the scene)
    forward: float = 0.35
    texture_sigma: float = 0.10

    def camera(self) -> Camera:
        return Camera(self.focal, self.width / 2.0, self.height / 2.0)


def _background_quads(rng: np.random.Generator, spec: SceneSpec) -> list[Quad]:
    # ground resolution ~40 texels per world unit keeps on-screen texture
    # wavelengths above a pixel out to the backdrop distance
    ground_tex = bandlimited_noise(rng, 1024, 1024, spec.texture_sigma)
    wall_tex = bandlimited_noise(rng, 384, 768, spec.texture_sigma)
    ground = Quad(
        np.array([-14.0, 1.0, 2.0]),
        np.array([28.0, 0.0, 0.0]),
        np.array([0.0, 0.0, 12.5]),
        ground_tex,
    )
    wall = Quad(
        np.array([-16.0, -9.0, 14.0]),
        np.array([32.0, 0.0, 0.0]),
        np.array([0.0, 11.0, 0.0]),
        wall_tex,
    )
    return [ground, wall]


def _object_quad(rng: np.random.Generator, spec: SceneSpec, slot: int) -> Quad:
    # facing the camera with a small random tilt, left or right of center
    side = -1.0 if slot % 2 == 0 else 1.0
    cx = side * rng.uniform(1.0, 2.2)
    cy = rng.uniform(-0.6, 0.3)
    cz = rng.uniform(5.5, 9.0)
    width = rng.uniform(1.2, 1.8)
    height = rng.uniform(0.9, 1.4)
    tilt = rodrigues(rng.uniform(-0.15, 0.15, 3))
    e1 = tilt @ np.array([width, 0.0, 0.0])
    e2 = tilt @ np.array([0.0, height, 0.0])
    origin = np.array([cx, cy, cz]) - 0.5 * e1 - 0.5 * e2
    tex = bandlimited_noise(rng, 96, 96, 0.16)
    return Quad(origin, e1, e2, tex)


def _object_motion(rng: np.random.Generator, center: np.ndarray) -> RigidMotion:
    translation = np.array(
        [
            rng.uniform(-0.25, 0.25),
            rng.uniform(-0.08, 0.08),
            rng.uniform(-0.5, 0.5),
        ]
    )
    spin = rng.uniform(-0.02, 0.02, 3)
    return RigidMotion.about(spin, center, translation)


def make_scene(
    seed: int,
    spec: SceneSpec | None = None,
    ego: RigidMotion | None = None,
    object_motions: list[RigidMotion] | None = None,
) -> SyntheticScene:
    """Deterministic textured scene with exact flow, labels and occlusion.

    `ego` and `object_motions` override the random draws (world frame);
    passing identities yields an exactly static scene with zero flow.
    """
    spec = spec or SceneSpec()
    rng = np.random.default_rng(seed)
    camera = spec.camera()

    quads = _background_quads(rng, spec)
    labels_of_quad = [0, 0]
    world_motions = [RigidMotion.identity()]
    for slot in range(spec.n_objects):
        quad = _object_quad(rng, spec, slot)
        quads.append(quad)
        labels_of_quad.append(slot + 1)
        center = quad.origin + 0.5 * quad.e1 + 0.5 * quad.e2
        world_motions.append(_object_motion(rng, center))
    if object_motions is not None:
        if len(object_motions) != spec.n_objects:
            raise ValueError("need one motion per object")
        world_motions[1:] = list(object_motions)

    if ego is None:
        # point-map translation -z: the camera advances, the image expands
        ego = RigidMotion(
            rodrigues(rng.uniform(-0.004, 0.004, 3)),
            np.array(
                [
                    rng.uniform(-0.08, 0.08),
                    rng.uniform(-0.03, 0.03),
                    -spec.forward * rng.uniform(0.8, 1.2),
                ]
            ),
        )
    # camera-frame map per body: world motion followed by the ego transform
    motions = [m.then(ego) for m in world_motions]

    rays = camera.rays(spec.width, spec.height)
    img1, hits1 = render(rays, quads)
    quads2 = [quads[i].moved(motions[labels_of_quad[i]]) for i in range(len(quads))]
    img2, _ = render(rays, quads2)

    label_map = np.where(
        hits1.hit, np.asarray(labels_of_quad + [0])[hits1.surface], 0
    )

    points1 = hits1.depth[:, :, None] * rays
    points2 = np.zeros_like(points1)
    for label, motion in enumerate(motions):
        sel = hits1.hit & (label_map == label)
        points2[sel] = motion.apply(points1[sel])

    in_front = points2[:, :, 2] > _EPS
    valid = hits1.hit & in_front
    grid = np.stack(
        np.meshgrid(np.arange(spec.width), np.arange(spec.height)), axis=-1
    ).astype(np.float64)
    proj = np.zeros((spec.height, spec.width, 2))
    proj[valid] = camera.project(points2[valid])
    flow_uv = np.where(valid[:, :, None], proj - grid, 0.0)
    flow = FlowField(flow_uv[:, :, 0], flow_uv[:, :, 1], valid)

    occluded = _occlusion_mask(camera, quads2, points2, proj, valid, spec)

    return SyntheticScene(
        camera=camera,
        motions=motions,
        img1=img1,
        img2=img2,
        flow=flow,
        instances=InstanceMap(label_map),
        occluded=occluded,
        points=points1,
    )


def _occlusion_mask(
    camera: Camera,
    quads2: list[Quad],
    points2: np.ndarray,
    proj: np.ndarray,
    valid: np.ndarray,
    spec: SceneSpec,
) -> np.ndarray:
    """Frame-1 pixels whose moved point is hidden or out of view in frame 2."""
    h, w = valid.shape
    occluded = np.zeros((h, w), dtype=bool)
    # slack keeps border pixels of a static scene in view despite roundoff
    edge = 1e-9
    inside = (
        valid
        & (proj[:, :, 0] >= -edge)
        & (proj[:, :, 0] <= spec.width - 1 + edge)
        & (proj[:, :, 1] >= -edge)
        & (proj[:, :, 1] <= spec.height - 1 + edge)
    )
    occluded[valid & ~inside] = True
    if not inside.any():
        return occluded
    dirs = np.empty((int(inside.sum()), 1, 3))
    dirs[:, 0, 0] = (proj[inside][:, 0] - camera.cx) / camera.f
    dirs[:, 0, 1] = (proj[inside][:, 1] - camera.cy) / camera.f
    dirs[:, 0, 2] = 1.0
    hits2 = raycast(dirs, quads2)
    front = hits2.depth[:, 0] < points2[inside][:, 2] - 1e-6
    occ = occluded[inside]
    occ |= front
    occluded[inside] = occ
    return occluded


def write_scene(directory: str, scene: SyntheticScene) -> dict[str, str]:
    """Write the scene bundle as PNG files; returns the path map."""
    import os

    from . import imgproc

    os.makedirs(directory, exist_ok=True)
    paths = {
        "image1": os.path.join(directory, "frame_0.png"),
        "image2": os.path.join(directory, "frame_1.png"),
        "flow": os.path.join(directory, "flow_gt.png"),
        "instances": os.path.join(directory, "instances.png"),
        "occlusion": os.path.join(directory, "occluded.png"),
    }
    imgproc.write_image_png(paths["image1"], scene.img1)
    imgproc.write_image_png(paths["image2"], scene.img2)
    imgproc.write_flow_png(paths["flow"], scene.flow)
    imgproc.write_instance_png(paths["instances"], scene.instances.labels)
    imgproc.write_mask_png(paths["occlusion"], scene.occluded)
    return paths
