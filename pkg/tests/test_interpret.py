import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from volsense import interpret as it
from volsense import model as md
from volsense import volcore as vc
from volsense.volcore import LayerParams

from _oracles import central_difference


def dense_sigmoid(w, b=0.0):
    """p = sigmoid(w . x + b) over a flattened (D, H, W) input."""
    params = LayerParams.from_arrays(w.reshape(1, -1), np.array([b]))
    return lambda x: vc.sigmoid(vc.dense(vc.flatten(x, 1), params))


def sigmoid(z):
    return 1 / (1 + np.exp(-z))


class TestClosedForm:
    def test_dense_sigmoid(self):
        rng = np.random.default_rng(0)
        w = rng.standard_normal((3, 4, 5)) * 0.3
        x = rng.standard_normal((3, 4, 5))
        s = sigmoid(np.sum(w * x))
        expected = (s * (1 - s) * w) ** 2
        got = it.sensitivity_map(dense_sigmoid(w), x, 1).voxels
        np.testing.assert_allclose(got, expected, rtol=0, atol=1e-10)

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=30, deadline=None)
    def test_target_symmetry(self, seed):
        rng = np.random.default_rng(seed)
        w = rng.standard_normal((2, 3, 4))
        x = rng.standard_normal((2, 3, 4))
        net = dense_sigmoid(w, rng.standard_normal())
        np.testing.assert_array_equal(it.sensitivity_map(net, x, 0).voxels, it.sensitivity_map(net, x, 1).voxels)

    def test_zero_weight_voxels_are_zero(self):
        w = np.zeros((2, 2, 2))
        w[0, 1, 1] = 2.0
        m = it.sensitivity_map(dense_sigmoid(w), np.ones((2, 2, 2)), 1).voxels
        assert np.count_nonzero(m) == 1 and m[0, 1, 1] > 0


def test_cnn_gradient_matches_finite_differences():
    c = md.CnnConfig(input_shape=(10, 10, 10), conv1=(2, 3), conv2=(2, 3))
    p = md.init_params(c, 1)
    rng = np.random.default_rng(1)
    x = rng.standard_normal((10, 10, 10))
    g = it.input_gradients(p, x[None], 1, c)[0]
    f = lambda: md.forward(p, x, c)
    for idx in [(5, 5, 5), (0, 0, 0), (9, 3, 7), (4, 6, 2)]:
        fd = central_difference(f, x, idx)
        assert g[idx] == pytest.approx(fd, rel=1e-5, abs=1e-10)


def test_batched_maps_match_single():
    c = md.CnnConfig(input_shape=(10, 10, 10), conv1=(2, 3), conv2=(2, 3), chunk_size=2)
    p = md.init_params(c, 2)
    X = np.random.default_rng(2).standard_normal((5, 10, 10, 10))
    batch = it.sensitivity_maps(p, X, 0, c)
    for i in range(5):
        np.testing.assert_allclose(batch[i], it.sensitivity_map(p, X[i], 0, c).voxels, rtol=1e-12, atol=0)


def test_shape_mismatch():
    c = md.CnnConfig(input_shape=(10, 10, 10), conv1=(2, 3), conv2=(2, 3))
    with pytest.raises(vc.ShapeError):
        it.sensitivity_map(md.init_params(c), np.zeros((10, 10, 9)), 1, c)


class TestAggregate:
    def test_mean_and_mask(self):
        maps = [it.SensitivityMap(np.full((4, 4, 4), v), "s", 0, 1) for v in (1.0, 3.0)]
        g = it.aggregate_group(maps, 1)
        np.testing.assert_array_equal(g.mean_map, 2.0)
        assert g.n_samples == 2
        assert g.region_mask.all()  # ties at the cut are kept

    def test_per_subject_first(self):
        stack = np.stack([np.full((2, 2, 2), v) for v in (0.0, 0.0, 0.0, 4.0)])
        g = it.aggregate_group(stack, 1, subject_ids=["a", "a", "a", "b"], per_subject_first=True)
        np.testing.assert_array_equal(g.mean_map, 2.0)
        g = it.aggregate_group(stack, 1)
        np.testing.assert_array_equal(g.mean_map, 1.0)

    @given(st.integers(0, 1000), st.floats(1, 98), st.floats(1, 98))
    @settings(max_examples=50, deadline=None)
    def test_threshold_monotone(self, seed, p1, p2):
        lo, hi = sorted((p1, p2))
        m = np.random.default_rng(seed).random((6, 6, 6))
        assert not (it.threshold_regions(m, hi) & ~it.threshold_regions(m, lo)).any()

    def test_percentile_fraction(self):
        m = np.random.default_rng(3).random((10, 10, 10))
        assert it.threshold_regions(m, 95).sum() == 50

    def test_dice(self):
        a = np.zeros(10, bool)
        a[:4] = True
        b = np.zeros(10, bool)
        b[2:6] = True
        assert it.dice(a, b) == 0.5
        assert it.dice(a, a) == 1.0


class TestExport:
    def test_constant_volume_is_mid_gray(self, tmp_path):
        paths = it.export_slices(np.zeros((43, 5, 6)), 0, tmp_path / "z")
        assert len(paths) == 43
        assert paths[0].name == "z_axis0_000.pgm"
        for p in paths:
            img = it.read_pnm(p)
            assert img.shape == (5, 6) and (img == 128).all()

    def test_round_trip_values(self, tmp_path):
        vol = np.random.default_rng(4).random((3, 4, 5))
        paths = it.export_slices(vol, 2, tmp_path / "v")
        scaled = it.scale_to_bytes(vol)
        for i, p in enumerate(paths):
            np.testing.assert_array_equal(it.read_pnm(p), scaled[:, :, i])
        assert scaled.min() == 0 and scaled.max() == 255

    def test_overlay(self, tmp_path):
        vol = np.zeros((2, 3, 3))
        mask = np.zeros((2, 3, 3), bool)
        mask[1, 1, 1] = True
        paths = it.export_slices(vol, 0, tmp_path / "o", overlay=mask)
        rgb = it.read_pnm(paths[1])
        assert rgb.shape == (3, 3, 3) and tuple(rgb[1, 1]) == (255, 0, 0) and tuple(rgb[0, 0]) == (128,) * 3
