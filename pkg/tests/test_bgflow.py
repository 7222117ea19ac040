"""Background flow: depth-ratio labels, occlusion fill, slanted planes."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import blob_volume, scatter_backward
from rigidflow import bgflow, epigeo, synth
from rigidflow.bgflow import SuperpixelGraph, VzRatioField
from rigidflow.costvol import SearchWindow, SparseMatches
from rigidflow.epigeo import (
    DegenerateGeometryError,
    EpipolarFrame,
    RotationalFlowModel,
    radial_frame,
)
from rigidflow.imgproc import Image, InstanceMap
from rigidflow.sgm import SgmPenalties

BG_WINDOW = SearchWindow(-24, 24, -20, 20)


def translation_frame(ex: float, ey: float) -> EpipolarFrame:
    """Pure-translation frame with a finite epipole and no rotation."""
    f = epigeo.FundamentalMatrix(
        np.array([[0.0, -1.0, ey], [1.0, 0.0, -ex], [-ey, ex, 0.0]])
    )
    return EpipolarFrame(f, epigeo.epipole_of(f), RotationalFlowModel.zero())


def sideways_frame() -> EpipolarFrame:
    """Epipole at infinity along +x; lines stay horizontal."""
    f = epigeo.FundamentalMatrix(
        np.array([[0.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]])
    )
    return EpipolarFrame(f, epigeo.epipole_of(f), RotationalFlowModel.zero())


def grid_points(h: int, w: int) -> np.ndarray:
    gx, gy = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def constant_omega_setup(w0: float = 0.08):
    """Fronto-parallel wall far from the epipole: constant depth ratio.

    The epipole sits well outside the image so one omega step moves a
    match by close to a pixel, the resolution the candidate grid has."""
    h, w = 96, 128
    frame = translation_frame(700.0, 48.0)
    pts = grid_points(h, w)
    dirs, delta = radial_frame(frame.epipole, pts)
    d = bgflow.vz_disparity(delta, np.full(delta.size, w0))
    u = (d * dirs[:, 0]).reshape(h, w)
    v = (d * dirs[:, 1]).reshape(h, w)
    vol = blob_volume(u, v, np.isfinite(u), SearchWindow(-80, 10, -16, 16))
    labels = np.linspace(0.0, 1.2 * w0, 96)
    return frame, vol, labels, (h, w)


def bg_matches(scene, stride: int = 6) -> SparseMatches:
    """Exact correspondences sampled on visible background pixels."""
    h, w = scene.flow.u.shape
    bg = scene.instances.labels == 0
    gy, gx = np.mgrid[2:h:stride, 2:w:stride]
    sel = bg[gy, gx] & scene.noc[gy, gx]
    p1 = np.stack([gx[sel], gy[sel]], axis=1).astype(np.float64)
    shift = np.stack(
        [scene.flow.u[gy[sel], gx[sel]], scene.flow.v[gy[sel], gx[sel]]], axis=1
    )
    return SparseMatches(p1=p1, p2=p1 + shift, score=np.full(sel.sum(), 5.0))


def run_background(scene):
    """Whole background chain on exact-flow volumes."""
    bg = scene.instances.labels == 0
    matches = bg_matches(scene)
    frame = bgflow.background_frame(matches, scene.instances)
    labels = bgflow.omega_labels(matches, frame)
    vol_fw = blob_volume(scene.flow.u, scene.flow.v, scene.flow.valid, BG_WINDOW)
    vol_bw = scatter_backward(scene.flow, BG_WINDOW)
    semi = bgflow.background_vz(
        scene.instances, frame, vol_fw, vol_bw, matches, labels,
        SgmPenalties(), unary_scale=128.0,
    )
    filled = bgflow.extrapolate_vz(semi, frame.epipole, scene.instances)
    graph = bgflow.superpixels(scene.img1, cell=16)
    masked = VzRatioField(np.where(bg, filled.omega, 0.0), filled.valid & bg)
    planes = bgflow.slanted_plane(
        masked, scene.img1, graph, label_step=labels[1] - labels[0]
    )
    return {
        "scene": scene,
        "frame": frame,
        "labels": labels,
        "semi": semi,
        "filled": filled,
        "planes": planes,
        "flow": bgflow.bg_flow_from_vz(planes.field, frame),
    }


@pytest.fixture(scope="module")
def moving():
    return run_background(synth.make_scene(0))


@pytest.fixture(scope="module")
def static():
    return run_background(synth.make_scene(3, spec=synth.SceneSpec(n_objects=0)))


class TestVzRatioField:
    def test_invalid_entries_zeroed_and_frozen(self):
        omega = np.array([[0.5, 7.0], [0.2, np.nan]])
        valid = np.array([[True, False], [True, False]])
        field = VzRatioField(omega, valid)
        assert field.omega[0, 1] == 0.0 and field.omega[1, 1] == 0.0
        assert not field.omega.flags.writeable

    def test_rejects_ratio_of_one_on_valid_pixels(self):
        with pytest.raises(ValueError):
            VzRatioField(np.ones((2, 2)), np.ones((2, 2), dtype=bool))

    def test_rejects_non_finite_valid_values(self):
        with pytest.raises(ValueError):
            VzRatioField(np.full((2, 2), np.nan), np.ones((2, 2), dtype=bool))

    def test_rejects_shape_mismatch(self):
        with pytest.raises(ValueError):
            VzRatioField(np.zeros((2, 3)), np.ones((3, 2), dtype=bool))


class TestVzDisparity:
    def test_reference_values(self):
        assert bgflow.vz_disparity(100.0, 0.0) == 0.0
        assert bgflow.vz_disparity(100.0, 0.5) == 100.0
        assert bgflow.vz_disparity(100.0, 0.2) == 25.0
        # zero ratio wins even against an infinite radius
        assert bgflow.vz_disparity(np.inf, 0.0) == 0.0

    def test_rejects_ratio_at_one(self):
        with pytest.raises(ValueError):
            bgflow.vz_disparity(10.0, 1.0)
        with pytest.raises(ValueError):
            bgflow.vz_disparity(np.ones(3), np.array([0.2, 1.5, 0.0]))

    @settings(max_examples=200)
    @given(
        st.floats(min_value=1e-3, max_value=1e4),
        st.floats(min_value=0.0, max_value=0.999),
    )
    def test_roundtrip_recovers_ratio(self, delta, omega):
        d = bgflow.vz_disparity(delta, omega)
        assert abs(bgflow.vz_ratio(delta, d) - omega) <= 1e-12

    def test_roundtrip_on_grid(self):
        rng = np.random.default_rng(7)
        delta = rng.uniform(1e-3, 500.0, 10_000)
        omega = rng.uniform(0.0, 0.999, 10_000)
        back = bgflow.vz_ratio(delta, bgflow.vz_disparity(delta, omega))
        assert np.abs(back - omega).max() <= 1e-12

    def test_monotone_in_ratio(self):
        w = np.linspace(0.0, 0.99, 500)
        d = bgflow.vz_disparity(37.0, w)
        assert (np.diff(d) > 0).all()

    def test_linear_in_radius(self):
        d = bgflow.vz_disparity(np.linspace(0.0, 300.0, 100), 0.3)
        assert np.abs(np.diff(d, 2)).max() < 1e-10

    def test_infinite_radius_maps_back_to_zero(self):
        assert bgflow.vz_ratio(np.inf, 5.0) == 0.0


class TestBackgroundFrame:
    def test_epipole_matches_expansion_focus(self, static):
        scene = static["scene"]
        truth = epigeo.epipole_of(scene.body_f(0))
        est = static["frame"].epipole
        err = np.hypot(
            est[0] / est[2] - truth[0] / truth[2],
            est[1] / est[2] - truth[1] / truth[2],
        )
        assert err < 2.0

    def test_requires_eight_background_matches(self):
        rng = np.random.default_rng(0)
        p1 = rng.uniform(5, 55, (30, 2))
        matches = SparseMatches(p1=p1, p2=p1 + 1.0, score=np.ones(30))
        labels = np.ones((64, 64), dtype=np.int64)  # one big instance
        labels[:8, :8] = 0  # a corner of background holds too few matches
        inside = (p1 < 8).all(axis=1)
        assert inside.sum() < 8
        with pytest.raises(DegenerateGeometryError):
            bgflow.background_frame(matches, InstanceMap(labels))


class TestOmegaLabels:
    def make_matches(self, frame, ratios):
        # targets placed exactly where each ratio sends the pixel
        rng = np.random.default_rng(3)
        p1 = rng.uniform(10.0, 100.0, (ratios.size, 2))
        dirs, delta = radial_frame(frame.epipole, p1)
        d = bgflow.vz_disparity(delta, ratios)
        return SparseMatches(
            p1=p1, p2=p1 + d[:, None] * dirs, score=np.ones(ratios.size)
        )

    def test_grid_tracks_quantile_of_match_ratios(self):
        frame = translation_frame(300.0, 200.0)
        rng = np.random.default_rng(5)
        ratios = rng.uniform(0.01, 0.2, 400)
        labels = bgflow.omega_labels(self.make_matches(frame, ratios), frame)
        assert labels.shape == (96,)
        assert labels[0] == 0.0
        assert np.allclose(np.diff(labels), labels[1] - labels[0])
        assert np.isclose(labels[-1], 1.2 * np.quantile(ratios, 0.99), rtol=1e-6)

    def test_static_matches_still_give_a_grid(self):
        frame = translation_frame(300.0, 200.0)
        labels = bgflow.omega_labels(self.make_matches(frame, np.zeros(50)), frame)
        assert labels[-1] == pytest.approx(1e-3)
        assert (np.diff(labels) > 0).all()


class TestVzCostProfile:
    def test_constant_ratio_candidate_lands_on_its_label(self):
        frame, vol, labels, _ = constant_omega_setup(w0=0.08)
        prof = bgflow.vz_cost_profile(np.array([30.0, 40.0]), frame, vol, labels)
        best = labels[np.argmin(prof)]
        assert abs(best - 0.08) <= labels[1] - labels[0]

    def test_unmatched_labels_cost_one_above_worst(self):
        frame, vol, labels, _ = constant_omega_setup()
        prof = bgflow.vz_cost_profile(np.array([30.0, 40.0]), frame, vol, labels)
        assert prof.max() == pytest.approx(bgflow.miss_penalty(vol))
        assert (prof[np.isfinite(prof)] <= bgflow.miss_penalty(vol)).all()

    def test_pixel_at_epipole_rejected(self):
        frame = translation_frame(20.0, 20.0)
        vol = blob_volume(
            np.ones((40, 40)), np.zeros((40, 40)), np.ones((40, 40), bool),
            SearchWindow(-4, 4, -4, 4),
        )
        with pytest.raises(DegenerateGeometryError):
            bgflow.vz_cost_profile(np.array([20.0, 20.0]), frame, vol, np.linspace(0, 0.1, 8))


class TestSgmVz:
    def test_constant_ratio_recovered_within_one_step(self):
        frame, vol, labels, (h, w) = constant_omega_setup(w0=0.08)
        field = bgflow.sgm_vz(
            np.ones((h, w), dtype=bool), frame, vol, labels,
            SgmPenalties(), unary_scale=128.0,
        )
        step = labels[1] - labels[0]
        err = np.abs(field.omega[field.valid] - 0.08) / step
        assert field.valid.all()  # epipole lies outside the image
        assert (err <= 1.0).mean() >= 0.95

    def test_tiny_penalties_reduce_to_unary_argmin(self):
        frame, vol, labels, (h, w) = constant_omega_setup()
        mask = np.zeros((h, w), dtype=bool)
        mask[40:44, 60:70] = True
        field = bgflow.sgm_vz(
            mask, frame, vol, labels, SgmPenalties(1e-9, 1e-9),
            unary_scale=1.0, subpixel=False,
        )
        for y in range(40, 44):
            for x in range(60, 70):
                prof = bgflow.vz_cost_profile(
                    np.array([float(x), float(y)]), frame, vol, labels
                )
                # adjacent labels can tie inside one quantization cell, so
                # check the winner's cost rather than the tie-break choice
                idx = int(np.argmin(np.abs(labels - field.omega[y, x])))
                assert prof[idx] == prof.min()

    def test_epipole_pixel_invalid(self):
        frame = translation_frame(20.0, 20.0)
        h = w = 40
        pts = grid_points(h, w)
        dirs, delta = radial_frame(frame.epipole, pts)
        d = bgflow.vz_disparity(delta, np.full(delta.size, 0.05))
        u = (d * dirs[:, 0]).reshape(h, w)
        v = (d * dirs[:, 1]).reshape(h, w)
        ok = np.isfinite(u)
        u = np.where(ok, u, 0.0)
        v = np.where(ok, v, 0.0)
        vol = blob_volume(u, v, ok, SearchWindow(-8, 8, -8, 8))
        field = bgflow.sgm_vz(
            np.ones((h, w), dtype=bool), frame, vol, np.linspace(0, 0.1, 32),
            SgmPenalties(), unary_scale=64.0,
        )
        assert not field.valid[20, 20]
        assert field.valid.sum() == h * w - 1

    def test_empty_mask_rejected(self):
        frame, vol, labels, (h, w) = constant_omega_setup()
        with pytest.raises(ValueError):
            bgflow.sgm_vz(np.zeros((h, w), bool), frame, vol, labels)


class TestBgFlowFromVz:
    def test_zero_ratio_gives_rotational_flow_only(self):
        model = RotationalFlowModel(np.array([0.5, 0.01, -0.02, -0.3, 0.005, 0.015]), 0.0)
        f = translation_frame(200.0, 150.0)
        frame = EpipolarFrame(f.f, f.epipole, model)
        h, w = 24, 30
        field = VzRatioField(np.zeros((h, w)), np.ones((h, w), dtype=bool))
        flow = bgflow.bg_flow_from_vz(field, frame)
        expected = model.apply(grid_points(h, w))
        assert np.abs(flow.u.ravel() - expected[:, 0]).max() < 1e-12
        assert np.abs(flow.v.ravel() - expected[:, 1]).max() < 1e-12

    def test_epipole_pixel_moves_by_rotation_only(self):
        frame = translation_frame(10.0, 12.0)
        h, w = 24, 30
        omega = np.full((h, w), 0.3)
        flow = bgflow.bg_flow_from_vz(
            VzRatioField(omega, np.ones((h, w), dtype=bool)), frame
        )
        assert flow.valid[12, 10]
        assert flow.u[12, 10] == 0.0 and flow.v[12, 10] == 0.0
        assert np.hypot(flow.u[12, 14], flow.v[12, 14]) > 1.0

    def test_vectors_point_away_from_epipole(self):
        frame = translation_frame(10.0, 12.0)
        h, w = 24, 30
        omega = np.full((h, w), 0.3)
        flow = bgflow.bg_flow_from_vz(
            VzRatioField(omega, np.ones((h, w), dtype=bool)), frame
        )
        pts = grid_points(h, w)
        away = pts - np.array([10.0, 12.0])
        dot = flow.u.ravel() * away[:, 0] + flow.v.ravel() * away[:, 1]
        assert (dot[np.hypot(away[:, 0], away[:, 1]) > 0.5] > 0).all()

    def test_infinite_epipole_keeps_zero_ratio_pixels_only(self):
        frame = sideways_frame()
        h, w = 10, 12
        omega = np.zeros((h, w))
        omega[4:, :] = 0.2  # not representable without forward motion
        field = VzRatioField(omega, np.ones((h, w), dtype=bool))
        flow = bgflow.bg_flow_from_vz(field, frame)
        assert flow.valid[:4].all()
        assert not flow.valid[4:].any()
        assert np.abs(flow.u[:4]).max() == 0.0

    def test_static_scene_flow_matches_truth(self, static):
        scene = static["scene"]
        flow = static["flow"]
        epe = np.hypot(flow.u - scene.flow.u, flow.v - scene.flow.v)
        assert (epe[scene.noc] < 0.5).mean() >= 0.95


class TestBackgroundVz:
    def test_covers_visible_background(self, moving):
        scene = moving["scene"]
        keep = moving["semi"].valid
        noc_bg = (scene.instances.labels == 0) & scene.noc
        assert keep[noc_bg].mean() >= 0.95

    def test_survivors_are_accurate(self, moving):
        scene = moving["scene"]
        semi = moving["semi"]
        flow = bgflow.bg_flow_from_vz(semi, moving["frame"])
        k = semi.valid & (scene.instances.labels == 0) & scene.noc
        epe = np.hypot(flow.u - scene.flow.u, flow.v - scene.flow.v)[k]
        assert np.median(epe) < 0.35
        assert (epe < 1.0).mean() >= 0.98

    def test_occluded_pixels_mostly_rejected(self, moving):
        scene = moving["scene"]
        occ_bg = (scene.instances.labels == 0) & scene.occluded
        assert moving["semi"].valid[occ_bg].mean() < 0.5


class TestExtrapolateVz:
    def line_field(self, h=40, w=60, hole=None):
        ep = np.array([80.0, 20.0, 1.0])
        dirs, delta = radial_frame(ep, grid_points(h, w))
        omega = 0.002 * delta.reshape(h, w) + 0.01
        valid = np.ones((h, w), dtype=bool)
        if hole is not None:
            valid[hole] = False
        return VzRatioField(np.where(valid, omega, 0.0), valid), omega, ep

    def test_already_dense_is_identity(self):
        field, _, ep = self.line_field()
        out = bgflow.extrapolate_vz(field, ep, InstanceMap(np.zeros((40, 60), np.int64)))
        assert np.array_equal(out.omega, field.omega)
        assert np.array_equal(out.valid, field.valid)

    def test_samples_on_a_line_fill_exactly(self):
        hole = (slice(10, 30), slice(10, 40))
        field, truth, ep = self.line_field(hole=hole)
        out = bgflow.extrapolate_vz(field, ep, InstanceMap(np.zeros((40, 60), np.int64)))
        assert out.valid[hole].all()
        assert np.abs(out.omega[hole] - truth[hole]).max() < 1e-9

    def test_no_samples_stay_invalid(self):
        empty = VzRatioField(np.zeros((20, 20)), np.zeros((20, 20), dtype=bool))
        out = bgflow.extrapolate_vz(
            empty, np.array([100.0, 10.0, 1.0]), InstanceMap(np.zeros((20, 20), np.int64))
        )
        assert not out.valid.any()

    def test_constant_radius_falls_back_to_mean(self):
        # epipole at infinity puts every sample at the same (infinite) delta
        h, w = 30, 50
        rng = np.random.default_rng(1)
        omega = rng.uniform(0.01, 0.2, (h, w))
        valid = np.ones((h, w), dtype=bool)
        valid[:, 30:] = False
        field = VzRatioField(np.where(valid, omega, 0.0), valid)
        out = bgflow.extrapolate_vz(
            field, np.array([1.0, 0.0, 0.0]), InstanceMap(np.zeros((h, w), np.int64))
        )
        assert out.omega[5, 45] == pytest.approx(omega[5, :30].mean(), abs=1e-12)

    def test_foreground_pixels_not_sampled(self):
        h, w = 30, 50
        rng = np.random.default_rng(2)
        omega = rng.uniform(0.01, 0.2, (h, w))
        valid = np.ones((h, w), dtype=bool)
        valid[:, 30:] = False
        field = VzRatioField(np.where(valid, omega, 0.0), valid)
        labels = np.zeros((h, w), dtype=np.int64)
        labels[:, 20:25] = 1
        out = bgflow.extrapolate_vz(field, np.array([1.0, 0.0, 0.0]), InstanceMap(labels))
        expect = np.concatenate([omega[5, :20], omega[5, 25:30]]).mean()
        assert out.omega[5, 45] == pytest.approx(expect, abs=1e-12)

    def test_scene_hole_filled_close_to_truth(self, static):
        scene = static["scene"]
        frame = static["frame"]
        h, w = scene.flow.u.shape
        pts = grid_points(h, w)
        rect = frame.rotation.rectify(pts)
        dirs, delta = radial_frame(frame.epipole, rect)
        target = pts + np.stack([scene.flow.u.ravel(), scene.flow.v.ravel()], axis=1)
        along = ((target - rect) * dirs).sum(axis=1)
        truth = bgflow.vz_ratio(delta, along).reshape(h, w)
        hole = np.zeros((h, w), dtype=bool)
        hole[96:118, 60:130] = True
        valid = scene.flow.valid & ~hole
        start = VzRatioField(np.where(valid, truth, 0.0), valid)
        out = bgflow.extrapolate_vz(start, frame.epipole, scene.instances)
        rel = np.abs(out.omega[hole] - truth[hole]) / np.maximum(truth[hole], 1e-9)
        assert out.valid[hole].all()
        assert rel.max() < 0.05


class TestSuperpixels:
    def test_partition_and_centroids(self, moving):
        graph = bgflow.superpixels(moving["scene"].img1, cell=16)
        n = graph.centroids.shape[0]
        assert graph.labels.min() == 0 and graph.labels.max() == n - 1
        assert np.bincount(graph.labels.ravel(), minlength=n).min() > 0
        h, w = graph.labels.shape
        assert (graph.centroids[:, 0] >= 0).all() and (graph.centroids[:, 0] < w).all()
        assert 60 <= n <= 128

    def test_regions_connected(self, moving):
        import cv2

        graph = bgflow.superpixels(moving["scene"].img1, cell=16)
        for s in range(graph.centroids.shape[0]):
            m = (graph.labels == s).astype(np.uint8)
            n_comp, _ = cv2.connectedComponents(m, connectivity=4)
            assert n_comp == 2  # background plus one region

    def test_deterministic(self, moving):
        a = bgflow.superpixels(moving["scene"].img1, cell=16)
        b = bgflow.superpixels(moving["scene"].img1, cell=16)
        assert np.array_equal(a.labels, b.labels)
        assert np.array_equal(a.centroids, b.centroids)

    def test_boundaries_initialized_coplanar(self, moving):
        graph = bgflow.superpixels(moving["scene"].img1, cell=16)
        pairs = graph.adjacent_pairs()
        assert set(graph.boundary_type) == set(pairs)
        assert all(a < b for a, b in pairs)
        assert set(graph.boundary_type.values()) == {"coplanar"}

    def test_follows_intensity_edges(self):
        img = np.full((48, 48), 0.2)
        img[:, 24:] = 0.9  # hard vertical edge off the seed grid
        graph = bgflow.superpixels(Image(img), cell=16)
        crossing = np.count_nonzero(graph.labels[:, 23] == graph.labels[:, 24])
        assert crossing == 0

    def test_rejects_bad_cell(self):
        img = Image(np.zeros((32, 32)))
        with pytest.raises(ValueError):
            bgflow.superpixels(img, cell=1)
        with pytest.raises(ValueError):
            bgflow.superpixels(img, cell=64)


def two_region_graph(h, w):
    gx = np.arange(w, dtype=np.float64)[None, :] * np.ones((h, 1))
    gy = np.arange(h, dtype=np.float64)[:, None] * np.ones((1, w))
    labels = (gx >= w // 2).astype(np.int64)
    cents = np.array(
        [
            [gx[labels == 0].mean(), gy[labels == 0].mean()],
            [gx[labels == 1].mean(), gy[labels == 1].mean()],
        ]
    )
    return SuperpixelGraph(labels, cents)


class TestSlantedPlane:
    H, W = 24, 32

    def sample_mask(self, seed=0, keep=0.6):
        rng = np.random.default_rng(seed)
        return rng.random((self.H, self.W)) < keep

    def guide(self):
        return Image(np.full((self.H, self.W), 0.5))

    def grids(self):
        gx, gy = np.meshgrid(
            np.arange(self.W, dtype=np.float64), np.arange(self.H, dtype=np.float64)
        )
        return gx, gy

    def test_single_region_recovers_plane_exactly(self):
        gx, gy = self.grids()
        truth = 0.001 * gx + 0.0005 * gy + 0.02
        valid = self.sample_mask()
        graph = SuperpixelGraph(
            np.zeros((self.H, self.W), np.int64), np.array([[15.5, 11.5]])
        )
        res = bgflow.slanted_plane(
            VzRatioField(np.where(valid, truth, 0.0), valid),
            self.guide(), graph, label_step=0.002,
        )
        assert np.abs(res.field.omega - truth).max() < 1e-9
        a, b, c = res.planes.coeffs[0]
        assert a == pytest.approx(0.001, abs=1e-12)
        assert b == pytest.approx(0.0005, abs=1e-12)

    def test_shared_plane_classified_coplanar(self):
        gx, gy = self.grids()
        truth = 0.001 * gx + 0.0005 * gy + 0.02
        valid = self.sample_mask()
        res = bgflow.slanted_plane(
            VzRatioField(np.where(valid, truth, 0.0), valid),
            self.guide(), two_region_graph(self.H, self.W), label_step=0.002,
        )
        assert res.graph.boundary_type[(0, 1)] == "coplanar"
        assert np.abs(res.field.omega - truth).max() < 1e-6

    def test_step_classified_occlusion(self):
        gx, _ = self.grids()
        truth = np.where(gx < self.W // 2, 0.02, 0.08)
        valid = self.sample_mask()
        res = bgflow.slanted_plane(
            VzRatioField(np.where(valid, truth, 0.0), valid),
            self.guide(), two_region_graph(self.H, self.W), label_step=0.002,
        )
        assert res.graph.boundary_type[(0, 1)] == "occlusion"
        assert np.abs(res.field.omega - truth).max() < 1e-9

    def test_crease_classified_hinge(self):
        gx, _ = self.grids()
        truth = np.where(gx < self.W // 2, 0.004 * gx, 0.004 * (self.W - 1 - gx)) + 0.02
        valid = self.sample_mask()
        res = bgflow.slanted_plane(
            VzRatioField(np.where(valid, truth, 0.0), valid),
            self.guide(), two_region_graph(self.H, self.W), label_step=0.002,
        )
        assert res.graph.boundary_type[(0, 1)] == "hinge"
        assert np.abs(res.field.omega - truth).max() < 1e-9

    def test_constant_field_reproduced_with_flat_planes(self):
        valid = self.sample_mask()
        truth = np.full((self.H, self.W), 0.05)
        res = bgflow.slanted_plane(
            VzRatioField(np.where(valid, truth, 0.0), valid),
            self.guide(), two_region_graph(self.H, self.W), label_step=0.002,
        )
        assert np.abs(res.planes.coeffs[:, :2]).max() < 1e-12
        assert np.abs(res.field.omega - 0.05).max() < 1e-12

    def test_energy_never_increases(self):
        rng = np.random.default_rng(11)
        for seed in range(3):
            omega = rng.uniform(0.0, 0.3, (self.H, self.W))
            valid = rng.random((self.H, self.W)) < 0.7
            guide = Image(rng.random((self.H, self.W)))
            graph = bgflow.superpixels(guide, cell=8)
            res = bgflow.slanted_plane(
                VzRatioField(np.where(valid, omega, 0.0), valid),
                guide, graph, label_step=0.01,
            )
            assert (np.diff(res.energies) <= 1e-9).all()

    def test_unused_region_id_tolerated(self):
        # a centroid table longer than the labels actually used
        valid = self.sample_mask()
        truth = np.full((self.H, self.W), 0.05)
        graph = SuperpixelGraph(
            np.zeros((self.H, self.W), np.int64),
            np.array([[15.5, 11.5], [100.0, 100.0]]),
        )
        res = bgflow.slanted_plane(
            VzRatioField(np.where(valid, truth, 0.0), valid),
            self.guide(), graph, label_step=0.002,
        )
        assert np.isfinite(res.planes.coeffs).all()
        assert np.abs(res.field.omega - 0.05).max() < 1e-12

    def test_scene_energy_monotone(self, moving):
        assert (np.diff(moving["planes"].energies) <= 1e-9).all()


class TestBackgroundEndToEnd:
    def test_moving_scene_background_accuracy(self, moving):
        scene = moving["scene"]
        flow = moving["flow"]
        k = (scene.instances.labels == 0) & scene.noc
        epe = np.hypot(flow.u - scene.flow.u, flow.v - scene.flow.v)[k]
        assert (epe < 0.5).mean() >= 0.95
        assert np.median(epe) < 0.2

    def test_occluded_background_stays_reasonable(self, moving):
        scene = moving["scene"]
        flow = moving["flow"]
        k = (scene.instances.labels == 0) & scene.occluded
        epe = np.hypot(flow.u - scene.flow.u, flow.v - scene.flow.v)[k]
        assert (epe < 3.0).mean() >= 0.9

    def test_boundary_types_in_use(self, moving):
        kinds = set(moving["planes"].graph.boundary_type.values())
        assert len(kinds) >= 2
