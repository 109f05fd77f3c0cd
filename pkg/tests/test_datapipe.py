import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from volsense import datapipe as dp
from volsense.datapipe import PhantomSpec, Region, Series4D


def brute_window_count(T, m, s):
    return sum(1 for start in range(0, T, s) if start + m <= T)


def random_series(rng, shape=(5, 4, 4, 4), label=1, sid="s0"):
    return Series4D(sid, label, rng.standard_normal(shape).astype(np.float32).astype(np.float64))


class TestVol4:
    def test_round_trip_bit_exact(self, tmp_path):
        s = random_series(np.random.default_rng(0))
        dp.save_series(s, tmp_path / "a.vol4")
        back = dp.load_series(tmp_path / "a.vol4")
        assert back.subject_id == "s0" and back.label == 1
        assert back.frames.dtype == np.float64
        np.testing.assert_array_equal(back.frames, s.frames)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "a.vol4"
        dp.save_series(random_series(np.random.default_rng(0)), p)
        raw = bytearray(p.read_bytes())
        raw[0:4] = b"XXXX"
        p.write_bytes(bytes(raw))
        with pytest.raises(dp.BadMagicError):
            dp.load_series(p)

    def test_truncated_payload(self, tmp_path):
        p = tmp_path / "a.vol4"
        dp.save_series(random_series(np.random.default_rng(0)), p)
        p.write_bytes(p.read_bytes()[:-3])
        with pytest.raises(dp.TruncatedPayloadError):
            dp.load_series(p)

    def test_dimension_overflow(self, tmp_path):
        p = tmp_path / "a.vol4"
        header = dp._VOL4_HEADER.pack(1, 2**20, 2**10, 2**10, 2**10, 0, 1)
        p.write_bytes(dp.VOL4_MAGIC + header + b"x")
        with pytest.raises(dp.DimensionOverflowError):
            dp.load_series(p)

    def test_non_finite_rejected(self, tmp_path):
        frames = np.zeros((2, 2, 2, 2))
        frames[1, 0, 0, 0] = np.nan
        dp.write_vol4(tmp_path / "a.vol4", frames, 0, "x")
        with pytest.raises(dp.Vol4Error, match="non-finite"):
            dp.load_series(tmp_path / "a.vol4")

    def test_header_arithmetic(self):
        assert dp.expected_payload_bytes(360, 43, 51, 40) == 360 * 43 * 51 * 40 * 4 == 126316800

    def test_file_size_matches_header(self, tmp_path):
        s = random_series(np.random.default_rng(1), (3, 2, 5, 4), sid="abc")
        dp.save_series(s, tmp_path / "a.vol4")
        size = (tmp_path / "a.vol4").stat().st_size
        assert size == 4 + dp._VOL4_HEADER.size + 3 + dp.expected_payload_bytes(3, 2, 5, 4)


class TestWindows:
    def test_360_frame_count(self):
        assert dp.window_count(360, 2, 1) == 359

    @given(st.integers(1, 50), st.data())
    @settings(max_examples=200, deadline=None)
    def test_count_matches_enumeration(self, T, data):
        m = data.draw(st.integers(1, T))
        s = data.draw(st.integers(1, 5))
        assert dp.window_count(T, m, s) == brute_window_count(T, m, s)

    def test_full_window_is_temporal_mean(self):
        s = random_series(np.random.default_rng(2))
        out = dp.sliding_window_mean(s, m=5, s=1)
        assert len(out) == 1
        np.testing.assert_allclose(out[0].voxels, s.frames.mean(axis=0), atol=1e-15)

    def test_constant_series(self):
        frame = np.random.default_rng(3).standard_normal((4, 4, 4))
        s = Series4D("c", 0, np.repeat(frame[None], 6, axis=0))
        for w in dp.sliding_window_mean(s, 3, 2):
            np.testing.assert_allclose(w.voxels, frame, atol=1e-15)

    def test_window_values_and_indices(self):
        frames = np.arange(5, dtype=np.float64)[:, None, None, None] * np.ones((5, 2, 2, 2))
        out = dp.sliding_window_mean(Series4D("a", 0, frames), 2, 2)
        assert [w.window_index for w in out] == [0, 1]
        assert [w.voxels[0, 0, 0] for w in out] == [0.5, 2.5]

    def test_window_larger_than_series(self):
        with pytest.raises(dp.DataError):
            dp.sliding_window_mean(random_series(np.random.default_rng(0)), m=6)


class TestNormalizer:
    def samples(self, *values):
        return [dp.Sample3D("s", 0, i, np.full((2, 3, 2), v, dtype=np.float64)) for i, v in enumerate(values)]

    def test_hand_example(self):
        norm = dp.fit_normalizer(self.samples(1.0, 3.0))
        np.testing.assert_array_equal(norm.mean_image, 2.0)
        assert norm.max_abs == 1.0

    def test_single_sample_is_degenerate(self):
        with pytest.raises(dp.DataError, match="degenerate"):
            dp.fit_normalizer(self.samples(5.0))

    def test_empty(self):
        with pytest.raises(dp.DataError):
            dp.fit_normalizer([])

    def test_train_range(self):
        X = np.random.default_rng(4).standard_normal((20, 4, 4, 4)) * 7 + 3
        norm = dp.fit_normalizer(X)
        out = norm.apply(X)
        assert out.min() >= -1 and out.max() <= 1
        assert np.isclose(np.abs(out).max(), 1.0)

    def test_mean_maps_to_zero_and_no_clipping(self):
        norm = dp.fit_normalizer(self.samples(1.0, 3.0))
        s = dp.Sample3D("t", 1, 0, norm.mean_image.copy())
        np.testing.assert_array_equal(dp.apply_normalizer(norm, s).voxels, 0.0)
        probe = dp.Sample3D("t", 1, 0, np.full((2, 3, 2), 10.0))
        np.testing.assert_array_equal(dp.apply_normalizer(norm, probe).voxels, 8.0)

    def test_inverse(self):
        rng = np.random.default_rng(5)
        norm = dp.fit_normalizer(rng.standard_normal((6, 3, 3, 3)))
        x = rng.standard_normal((3, 3, 3))
        np.testing.assert_allclose(norm.apply(norm.invert(x)), x, atol=1e-12)

    @given(st.permutations(list(range(8))))
    @settings(max_examples=25, deadline=None)
    def test_order_invariant(self, perm):
        X = np.random.default_rng(6).standard_normal((8, 3, 3, 3))
        a, b = dp.fit_normalizer(X), dp.fit_normalizer(X[list(perm)])
        np.testing.assert_allclose(a.mean_image, b.mean_image, atol=1e-15)
        assert a.max_abs == pytest.approx(b.max_abs, abs=1e-15)


def cohort_ids(n0, n1):
    return [(f"y{i}", 0) for i in range(n0)] + [(f"o{i}", 1) for i in range(n1)]


class TestSplit:
    def test_30_45_cohort(self):
        m = dp.stratified_subject_split(cohort_ids(30, 45), seed=7)
        c = m.counts()
        assert [c[(0, s)] for s in dp.SPLITS] == [24, 3, 3]
        assert [c[(1, s)] for s in dp.SPLITS] == [36, 4, 5]

    def test_largest_remainder(self):
        assert dp.largest_remainder(30, (0.8, 0.1, 0.1)) == [24, 3, 3]
        assert dp.largest_remainder(45, (0.8, 0.1, 0.1)) == [36, 4, 5]
        assert dp.largest_remainder(10, (1, 1, 1)) == [3, 3, 4]

    def test_deterministic(self):
        a = dp.stratified_subject_split(cohort_ids(12, 9), seed=3)
        b = dp.stratified_subject_split(cohort_ids(12, 9), seed=3)
        assert a.to_text() == b.to_text()
        assert a.to_text() != dp.stratified_subject_split(cohort_ids(12, 9), seed=4).to_text()

    @given(st.integers(10, 60), st.integers(10, 60), st.integers(0, 2**32 - 1))
    @settings(max_examples=100, deadline=None)
    def test_partition_and_stratification(self, n0, n1, seed):
        subjects = cohort_ids(n0, n1)
        m = dp.stratified_subject_split(subjects, seed=seed)
        parts = [set(m.subjects(s)) for s in dp.SPLITS]
        assert set.union(*parts) == {s for s, _ in subjects}
        assert sum(len(p) for p in parts) == len(subjects)
        c = m.counts()
        for y, n in ((0, n0), (1, n1)):
            for split, r in zip(dp.SPLITS, (0.8, 0.1, 0.1)):
                assert abs(c[(y, split)] - n * r) <= 1

    def test_too_few(self):
        with pytest.raises(dp.DataError, match="too few"):
            dp.stratified_subject_split(cohort_ids(2, 10))

    def test_text_round_trip(self, tmp_path):
        m = dp.stratified_subject_split(cohort_ids(10, 10), seed=11)
        m.save(tmp_path / "m.csv")
        back = dp.SplitManifest.load(tmp_path / "m.csv")
        assert back.assignment == m.assignment and back.labels == m.labels and back.seed == 11
        assert (tmp_path / "m.csv").read_text().startswith("#seed=11\n")

    def test_leakage_detected(self):
        a = dp.SampleSet(np.zeros((1, 2, 2, 2)), np.array([0]), np.array(["x"]), np.array([0]))
        with pytest.raises(dp.LeakageError):
            dp.check_disjoint(a, a)


class TestPhantom:
    def spec(self, **kw):
        base = dict(n_young=3, n_old=3, T=4, shape=(10, 10, 10),
                    regions=[Region((5, 5, 5), 2.0, (0.0, 1.0))], noise_sigma=0.0, seed=1)
        base.update(kw)
        return PhantomSpec(**base)

    def test_noiseless_case(self):
        cohort, masks = dp.generate_phantom_cohort(self.spec())
        assert len(cohort) == 6
        for s in cohort:
            if s.label == 0:
                assert not s.frames.any()
            else:
                assert not s.frames[:, ~masks[0]].any()
                assert (s.frames[:, masks[0]] > 0).all()

    def test_deterministic(self):
        a, _ = dp.generate_phantom_cohort(self.spec(noise_sigma=0.3))
        b, _ = dp.generate_phantom_cohort(self.spec(noise_sigma=0.3))
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.frames, y.frames)

    def test_envelope_bounds(self):
        cohort, masks = dp.generate_phantom_cohort(self.spec(T=40))
        inside = cohort[-1].frames[:, masks[0]]
        assert inside.min() >= 0.5 - 1e-6 and inside.max() <= 1.5 + 1e-6
        assert inside.std() > 0

    def test_round_trips_through_vol4(self, tmp_path):
        cohort, _ = dp.generate_phantom_cohort(self.spec(noise_sigma=0.5))
        dp.save_series(cohort[0], tmp_path / "p.vol4")
        np.testing.assert_array_equal(dp.load_series(tmp_path / "p.vol4").frames, cohort[0].frames)

    def test_region_outside_volume(self):
        with pytest.raises(dp.DataError):
            self.spec(regions=[Region((1, 5, 5), 3.0, (0.0, 1.0))]).validate()

    def test_zero_subjects(self):
        with pytest.raises(dp.DataError):
            self.spec(n_young=0, n_old=0).validate()

    def test_windowed_set(self):
        cohort, _ = dp.generate_phantom_cohort(self.spec())
        s = dp.windowed_set(cohort, 2, 1, subjects={"young000", "old001"})
        assert len(s) == 6 and s.subjects() == {"young000", "old001"}
