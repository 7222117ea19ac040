import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rigidflow.imgproc import FlowField, Image
from rigidflow.matchnet import (
    CheckpointError,
    NetSpec,
    extract_features,
    forward_features,
    init_params,
    layers,
    load_checkpoint,
    match_score,
    save_checkpoint,
    training,
)
from rigidflow.matchnet.training import (
    HORIZONTAL,
    VERTICAL,
    TrainingConfig,
    loss_and_grads,
    make_shifted_patch_dataset,
    make_target,
    sample_training_pair,
    softmax,
    softmax_xent,
)


def numeric_grad(f, x, h=1e-6):
    """Central finite differences of scalar f w.r.t. array x, in place."""
    g = np.zeros_like(x)
    flat, gf = x.ravel(), g.ravel()
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, n):
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    return np.linalg.norm(a - n) / scale if scale > 0 else 0.0


class TestLayerGradients:
    def test_conv(self):
        for seed in range(3):
            rng = np.random.default_rng(seed)
            x = rng.standard_normal((2, 6, 7, 3))
            w = rng.standard_normal((3, 3, 3, 4))
            b = rng.standard_normal(4)
            proj = rng.standard_normal((2, 4, 5, 4))

            def loss():
                out, _ = layers.conv_forward(x, w, b)
                return float((out * proj).sum())

            out, cache = layers.conv_forward(x, w, b)
            dx, dw, db = layers.conv_backward(proj, cache)
            assert rel_err(dx, numeric_grad(loss, x)) < 1e-4
            assert rel_err(dw, numeric_grad(loss, w)) < 1e-4
            assert rel_err(db, numeric_grad(loss, b)) < 1e-4

    def test_batchnorm(self):
        for seed in range(3):
            rng = np.random.default_rng(seed)
            x = rng.standard_normal((3, 4, 5, 2))
            gamma = rng.uniform(0.5, 1.5, 2)
            beta = rng.standard_normal(2)
            proj = rng.standard_normal(x.shape)

            def loss():
                out, _, _, _ = layers.batchnorm_forward(x, gamma, beta)
                return float((out * proj).sum())

            _, cache, _, _ = layers.batchnorm_forward(x, gamma, beta)
            dx, dgamma, dbeta = layers.batchnorm_backward(proj, cache)
            assert rel_err(dx, numeric_grad(loss, x)) < 1e-4
            assert rel_err(dgamma, numeric_grad(loss, gamma)) < 1e-4
            assert rel_err(dbeta, numeric_grad(loss, beta)) < 1e-4

    def test_relu(self):
        rng = np.random.default_rng(0)
        # keep values away from the kink, where finite differences lie
        x = rng.standard_normal((2, 3, 3, 4))
        x[np.abs(x) < 1e-3] = 0.5
        proj = rng.standard_normal(x.shape)

        def loss():
            out, _ = layers.relu_forward(x)
            return float((out * proj).sum())

        _, cache = layers.relu_forward(x)
        dx = layers.relu_backward(proj, cache)
        assert rel_err(dx, numeric_grad(loss, x)) < 1e-4

    def test_softmax_xent_matches_finite_differences(self):
        for seed in range(3):
            rng = np.random.default_rng(seed)
            scores = rng.standard_normal((4, 7))
            targets = np.stack([make_target(7, int(g)) for g in rng.integers(0, 7, 4)])
            _, grad = softmax_xent(scores, targets)
            num = numeric_grad(lambda: softmax_xent(scores, targets)[0], scores)
            assert rel_err(grad, num) < 1e-4


class TestFullNetGradient:
    def test_siamese_net_gradients(self):
        # Sampled coordinates of every tensor, compared as one global vector:
        # conv biases feeding batch norm have exactly zero gradient, so a
        # per-tensor relative error is meaningless for them.
        for seed in range(2):
            rng = np.random.default_rng(seed)
            spec = NetSpec((8, 8))
            params = init_params(spec, seed=seed)
            rf, span = spec.receptive_field, 6
            target = make_target(span + 1, span // 2)
            batches = {
                HORIZONTAL: (
                    rng.uniform(0, 1, (3, rf, rf)),
                    rng.uniform(0, 1, (3, rf, rf + span)),
                    np.tile(target, (3, 1)),
                ),
                VERTICAL: (
                    rng.uniform(0, 1, (2, rf, rf)),
                    rng.uniform(0, 1, (2, rf + span, rf)),
                    np.tile(target, (2, 1)),
                ),
            }
            _, grads = loss_and_grads(params, batches)
            analytic, numeric = [], []
            for li, layer in enumerate(params.layers):
                for key in ("w", "b", "gamma", "beta"):
                    flat = layer[key].ravel()
                    idx = rng.permutation(flat.size)[: min(12, flat.size)]
                    num = np.empty(idx.size)
                    for j, i in enumerate(idx):
                        old = flat[i]
                        flat[i] = old + 1e-6
                        fp = loss_and_grads(params, batches)[0]
                        flat[i] = old - 1e-6
                        fm = loss_and_grads(params, batches)[0]
                        flat[i] = old
                        num[j] = (fp - fm) / 2e-6
                    analytic.append(grads[li][key].ravel()[idx])
                    numeric.append(num)
            err = rel_err(np.concatenate(analytic), np.concatenate(numeric))
            assert err < 1e-4


class TestFeatureExtraction:
    def test_shape_law_full_scale(self):
        spec = NetSpec.full_scale()
        assert spec.receptive_field == 19
        assert spec.feature_dim == 128
        params = init_params(spec, seed=0)
        rng = np.random.default_rng(0)
        fm = extract_features(rng.uniform(0, 1, (19, 19)), params)
        assert fm.data.shape == (1, 1, 128)
        fm = extract_features(rng.uniform(0, 1, (50, 100)), params)
        assert fm.data.shape == (32, 82, 128)
        assert fm.offset == 9

    def test_too_small_image_rejected(self):
        params = init_params(NetSpec((4, 4)), seed=0)
        with pytest.raises(ValueError):
            extract_features(np.zeros((4, 4)), params)

    def test_identity_kernel_crops_input(self):
        params = init_params(NetSpec((1,)), seed=0)
        params.layers[0]["w"][:] = 0.0
        params.layers[0]["w"][1, 1, 0, 0] = 1.0
        # inference batch norm divides by sqrt(run_var + eps); this gamma
        # cancels it so the layer is an exact pass-through
        params.layers[0]["gamma"][:] = np.sqrt(1.0 + layers.BN_EPS)
        img = np.random.default_rng(3).uniform(0, 1, (11, 14))
        fm = extract_features(img, params)
        np.testing.assert_allclose(fm.data[:, :, 0], img[1:-1, 1:-1], atol=1e-12)

    def test_patch_equals_full_image(self):
        rng = np.random.default_rng(7)
        spec = NetSpec((6, 8))
        params = init_params(spec, seed=1)
        for layer in params.layers:
            layer["run_mean"] = rng.normal(0, 0.2, layer["run_mean"].shape)
            layer["run_var"] = rng.uniform(0.5, 2.0, layer["run_var"].shape)
        img = rng.uniform(0, 1, (24, 31))
        full = extract_features(img, params)
        m = spec.margin
        for _ in range(10):
            y = int(rng.integers(m, 24 - m))
            x = int(rng.integers(m, 31 - m))
            patch = img[y - m : y + m + 1, x - m : x + m + 1]
            out, _ = forward_features(patch[None, :, :, None], params, train=False)
            assert np.abs(out[0, 0, 0] - full.data[y - m, x - m]).max() < 1e-5

    def test_match_score(self):
        assert match_score(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == 0.0
        assert match_score(np.array([1.0, 0.0]), np.array([1.0, 0.0])) == 1.0
        assert match_score(np.array([1.0, 2.0]), np.array([3.0, -1.0])) == 1.0


class TestTargets:
    def test_center_window(self):
        t = make_target(201, 100)
        np.testing.assert_allclose(t[98:103], [0.05, 0.2, 0.5, 0.2, 0.05], atol=1e-12)
        assert np.count_nonzero(t) == 5

    def test_border_renormalization(self):
        t = make_target(7, 0)
        # raw masses (0.5, 0.2, 0.05) over a sum of 0.75
        np.testing.assert_allclose(t[:3], [2 / 3, 4 / 15, 1 / 15], atol=1e-12)
        assert t[3:].max() == 0.0

    @given(st.integers(min_value=1, max_value=300), st.integers(min_value=0, max_value=10_000))
    @settings(max_examples=100, deadline=None)
    def test_sums_to_one(self, n, seed):
        gt = seed % n
        t = make_target(n, gt)
        assert abs(t.sum() - 1.0) < 1e-9
        assert np.count_nonzero(t) <= 5
        assert (t >= 0).all()

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            make_target(5, 5)
        with pytest.raises(ValueError):
            make_target(5, -1)


class TestLoss:
    def test_uniform_scores_delta_target(self):
        n = 13
        target = np.zeros((1, n))
        target[0, 4] = 1.0
        loss, _ = softmax_xent(np.zeros((1, n)), target)
        assert abs(loss - np.log(n)) < 1e-12

    def test_dominant_score_drives_loss_to_zero(self):
        scores = np.zeros((1, 9))
        scores[0, 3] = 60.0
        target = np.zeros((1, 9))
        target[0, 3] = 1.0
        loss, _ = softmax_xent(scores, target)
        assert 0.0 <= loss < 1e-9

    def test_non_finite_scores_rejected(self):
        with pytest.raises(ValueError):
            softmax_xent(np.array([[0.0, np.inf]]), np.array([[1.0, 0.0]]))

    @given(st.integers(min_value=0, max_value=10_000))
    @settings(max_examples=50, deadline=None)
    def test_softmax_normalized_and_loss_nonnegative(self, seed):
        rng = np.random.default_rng(seed)
        scores = rng.normal(0, 5, (3, 11))
        p = softmax(scores)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
        targets = np.stack([make_target(11, int(g)) for g in rng.integers(0, 11, 3)])
        loss, _ = softmax_xent(scores, targets)
        assert loss >= 0.0


def constant_flow(shape, u, v):
    return FlowField(
        np.full(shape, float(u)), np.full(shape, float(v)), np.ones(shape, dtype=bool)
    )


class TestSampling:
    def test_zero_flow_crops_same_center(self):
        rng = np.random.default_rng(0)
        img1 = Image(rng.uniform(0, 1, (20, 30)))
        img2 = Image(rng.uniform(0, 1, (20, 30)))
        flow = constant_flow((20, 30), 0, 0)
        s = sample_training_pair(img1, img2, flow, 14, 9, HORIZONTAL, 6, 5)
        assert s.axis == HORIZONTAL and s.gt_index == 3
        assert s.patch1.shape == (5, 5) and s.patch2.shape == (5, 11)
        np.testing.assert_array_equal(s.patch1, img1.data[7:12, 12:17])
        np.testing.assert_array_equal(s.patch2, img2.data[7:12, 9:20])
        s = sample_training_pair(img1, img2, flow, 14, 9, VERTICAL, 6, 5)
        assert s.patch2.shape == (11, 5)
        np.testing.assert_array_equal(s.patch2, img2.data[4:15, 12:17])

    def test_true_index_recovers_matching_patch(self):
        # img2 is img1 shifted by (+2, -1); the strip slot at gt_index must
        # be pixel-identical to the reference patch
        rng = np.random.default_rng(1)
        base = rng.uniform(0, 1, (22, 26))
        img1 = Image(base)
        img2 = Image(np.roll(base, (-1, 2), axis=(0, 1)))
        flow = constant_flow((22, 26), 2, -1)
        s = sample_training_pair(img1, img2, flow, 12, 11, HORIZONTAL, 6, 5)
        strip_slot = s.patch2[:, s.gt_index : s.gt_index + 5]
        np.testing.assert_array_equal(strip_slot, s.patch1)
        s = sample_training_pair(img1, img2, flow, 12, 11, VERTICAL, 6, 5)
        strip_slot = s.patch2[s.gt_index : s.gt_index + 5, :]
        np.testing.assert_array_equal(strip_slot, s.patch1)

    def test_rejections(self):
        rng = np.random.default_rng(2)
        img = Image(rng.uniform(0, 1, (16, 16)))
        flow = constant_flow((16, 16), 0, 0)
        assert sample_training_pair(img, img, flow, 1, 8, HORIZONTAL, 6, 5) is None
        assert sample_training_pair(img, img, flow, 8, 15, HORIZONTAL, 6, 5) is None
        # a large shift pushes the search strip out of bounds
        big = constant_flow((16, 16), 9, 0)
        assert sample_training_pair(img, img, big, 8, 8, HORIZONTAL, 6, 5) is None
        # invalid ground truth at the pixel
        holed = FlowField(
            np.zeros((16, 16)), np.zeros((16, 16)), np.zeros((16, 16), dtype=bool)
        )
        assert sample_training_pair(img, img, holed, 8, 8, HORIZONTAL, 6, 5) is None
        with pytest.raises(ValueError):
            sample_training_pair(img, img, flow, 8, 8, HORIZONTAL, 5, 5)
        with pytest.raises(ValueError):
            sample_training_pair(img, img, flow, 8, 8, 2, 6, 5)

    def test_shifted_patch_dataset_draws_both_axes(self):
        ds = make_shifted_patch_dataset(
            seed=0, n_pixels=40, span=6, receptive_field=5, image_size=48, n_textures=4
        )
        assert ds.size == 80
        assert set(ds.patches1) == {HORIZONTAL, VERTICAL}
        assert ds.patches2[HORIZONTAL].shape[1:] == (5, 11)
        assert ds.patches2[VERTICAL].shape[1:] == (11, 5)
        assert ds.gt_index == 3


class TestTraining:
    def test_zero_learning_rate_keeps_parameters(self):
        ds = make_shifted_patch_dataset(
            seed=1, n_pixels=30, span=6, receptive_field=5, image_size=48, n_textures=3
        )
        spec = NetSpec.desk_scale(width=4, n_layers=2)
        cfg = TrainingConfig(iterations=5, batch_size=16, learning_rate=0.0, seed=0)
        before = init_params(spec, seed=0)
        frozen = [{k: layer[k].copy() for k in ("w", "b", "gamma", "beta")} for layer in before.layers]
        after, _ = training.train(ds, spec, cfg, params=before)
        # running statistics still move; the trained tensors must not
        for layer, ref in zip(after.layers, frozen):
            for key, val in ref.items():
                np.testing.assert_array_equal(layer[key], val)

    def test_short_training_improves_heldout_loss(self):
        ds = make_shifted_patch_dataset(
            seed=0, n_pixels=120, span=6, receptive_field=5, image_size=64,
            n_textures=8, max_shift=3,
        )
        spec = NetSpec.desk_scale(width=8, n_layers=2)
        target = make_target(ds.span + 1, ds.gt_index)

        def heldout_loss(params):
            total, count = 0.0, 0
            for axis, p1 in ds.patches1.items():
                scores, _ = training.scores_for_batch(
                    params, p1, ds.patches2[axis], axis, train=False
                )
                loss, _ = softmax_xent(scores, np.tile(target, (len(p1), 1)))
                total += loss
                count += len(p1)
            return total / count

        initial = heldout_loss(init_params(spec, seed=0))
        cfg = TrainingConfig(iterations=200, batch_size=32, seed=0)
        trained, _ = training.train(ds, spec, cfg)
        final = heldout_loss(trained)
        assert final < initial
        assert training.argmax_accuracy(trained, ds) > 0.5

    def test_receptive_field_mismatch_rejected(self):
        ds = make_shifted_patch_dataset(
            seed=1, n_pixels=10, span=6, receptive_field=5, image_size=48, n_textures=2
        )
        with pytest.raises(ValueError):
            training.train(ds, NetSpec((4, 4, 4)), TrainingConfig(iterations=1))

    @pytest.mark.filterwarnings("ignore:overflow")
    def test_divergent_parameters_abort(self):
        ds = make_shifted_patch_dataset(
            seed=1, n_pixels=10, span=6, receptive_field=5, image_size=48, n_textures=2
        )
        spec = NetSpec.desk_scale(width=4, n_layers=2)
        bad = init_params(spec, seed=0)
        bad.layers[0]["w"][:] = 1e200
        with pytest.raises((ValueError, RuntimeError)):
            training.train(ds, spec, TrainingConfig(iterations=3, batch_size=8), params=bad)


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        params = init_params(NetSpec((4, 6), kernel=3), seed=5)
        rng = np.random.default_rng(0)
        for layer in params.layers:
            layer["run_mean"] = rng.normal(size=layer["run_mean"].shape)
            layer["run_var"] = rng.uniform(0.5, 2.0, layer["run_var"].shape)
        path = str(tmp_path / "net.npz")
        save_checkpoint(path, params)
        loaded = load_checkpoint(path)
        assert loaded.spec == params.spec
        for a, b in zip(loaded.layers, params.layers):
            for key in a:
                np.testing.assert_array_equal(a[key], b[key])

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(str(tmp_path / "absent.npz"))

    def test_version_and_shape_validation(self, tmp_path):
        params = init_params(NetSpec((4,)), seed=0)
        path = str(tmp_path / "net.npz")
        save_checkpoint(path, params)
        with np.load(path) as data:
            arrays = {k: data[k] for k in data.files}

        arrays_bad = dict(arrays, version=np.array(99))
        np.savez(str(tmp_path / "v.npz"), **arrays_bad)
        with pytest.raises(CheckpointError):
            load_checkpoint(str(tmp_path / "v.npz"))

        arrays_bad = dict(arrays, layer0_w=arrays["layer0_w"][:, :, :, :2])
        np.savez(str(tmp_path / "s.npz"), **arrays_bad)
        with pytest.raises(CheckpointError):
            load_checkpoint(str(tmp_path / "s.npz"))

        arrays_bad = dict(arrays)
        del arrays_bad["layer0_gamma"]
        np.savez(str(tmp_path / "m.npz"), **arrays_bad)
        with pytest.raises(CheckpointError):
            load_checkpoint(str(tmp_path / "m.npz"))


class TestNetSpec:
    def test_receptive_field_and_margin(self):
        assert NetSpec((8, 8)).receptive_field == 5
        assert NetSpec((8,) * 9).receptive_field == 19
        assert NetSpec((8, 8, 8)).margin == 3
        assert NetSpec.full_scale().filters == (32, 32, 64, 64, 64, 128, 128, 128, 128)

    def test_invalid_specs_rejected(self):
        with pytest.raises(ValueError):
            NetSpec(())
        with pytest.raises(ValueError):
            NetSpec((4, 0))
        with pytest.raises(ValueError):
            NetSpec((4,), kernel=4)
