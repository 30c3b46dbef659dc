import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jsmkit.errors import InputError
from jsmkit.volume import (
    BoundaryPolicy,
    Volume3D,
    contrast_stretch,
    downsample2x,
    nearest_rank_percentile,
    sample_points,
    trilinear_sample,
)


class TestVolume3D:
    def test_rejects_nonpositive_dims(self):
        with pytest.raises(InputError):
            Volume3D(np.zeros((0, 2, 2)))

    def test_rejects_nan(self):
        data = np.zeros((2, 2, 2))
        data[0, 0, 0] = np.nan
        with pytest.raises(InputError):
            Volume3D(data)

    def test_rejects_bad_spacing(self):
        with pytest.raises(InputError):
            Volume3D(np.zeros((2, 2, 2)), spacing=(1.0, 0.0, 1.0))


class TestTrilinearSample:
    def test_voxel_center_returns_stored_value(self, random_volume):
        vol = random_volume((4, 5, 3))
        assert trilinear_sample(vol, (2, 3, 1)) == vol.data[2, 3, 1]

    def test_midpoint_is_average(self):
        data = np.zeros((3, 2, 2))
        data[1] = 1.0
        vol = Volume3D(data)
        assert trilinear_sample(vol, (0.5, 0.0, 0.0)) == pytest.approx(0.5, abs=0)

    def test_clamp_outside_returns_boundary_value(self):
        data = np.full((2, 2, 2), 7.0)
        vol = Volume3D(data)
        assert trilinear_sample(vol, (-0.5, 0, 0), BoundaryPolicy("clamp")) == 7.0

    def test_zero_policy_blends_to_zero(self):
        vol = Volume3D(np.full((2, 2, 2), 4.0))
        assert trilinear_sample(vol, (-0.5, 0, 0), BoundaryPolicy("zero")) == 2.0

    def test_rejects_nonfinite_point(self, random_volume):
        with pytest.raises(InputError):
            trilinear_sample(random_volume(), (np.nan, 0, 0))

    @given(st.floats(0.0, 1.0), st.floats(0.0, 3.0), st.floats(0.0, 2.0))
    @settings(max_examples=40, deadline=None)
    def test_linear_fields_interpolate_exactly(self, fx, fy, fz):
        # a trilinear interpolant reproduces any linear field exactly
        dims = (4, 5, 4)
        g = np.stack(np.meshgrid(*(np.arange(n) for n in dims), indexing="ij"), axis=-1)
        vol = Volume3D(2.0 * g[..., 0] - 0.5 * g[..., 1] + 3.0 * g[..., 2] + 1.0)
        pt = np.array([1.0 + fx, fy, 1.0 + fz])
        expected = 2.0 * pt[0] - 0.5 * pt[1] + 3.0 * pt[2] + 1.0
        assert trilinear_sample(vol, tuple(pt)) == pytest.approx(expected, rel=1e-12)

    def test_vectorized_matches_scalar(self, rng, random_volume):
        vol = random_volume((4, 4, 4))
        pts = rng.uniform(-0.5, 3.5, size=(20, 3))
        batch = sample_points(vol, pts)
        singles = [trilinear_sample(vol, tuple(p)) for p in pts]
        np.testing.assert_allclose(batch, singles, rtol=0, atol=0)


class TestNearestRankPercentile:
    def test_matches_sorted_indexing(self):
        values = np.array([3.0, 1.0, 2.0, 5.0, 4.0])
        assert nearest_rank_percentile(values, 0) == 1.0
        assert nearest_rank_percentile(values, 100) == 5.0
        assert nearest_rank_percentile(values, 40) == 2.0
        assert nearest_rank_percentile(values, 41) == 3.0


class TestContrastStretch:
    def test_identity_on_full_range(self):
        data = np.linspace(0.0, 1.0, 27).reshape(3, 3, 3)
        out = contrast_stretch(Volume3D(data), 0, 100)
        np.testing.assert_allclose(out.data, data, atol=0)

    def test_two_values_map_to_endpoints(self):
        data = np.where(np.arange(8).reshape(2, 2, 2) % 2 == 0, 10.0, 20.0)
        out = contrast_stretch(Volume3D(data), 0, 100)
        assert set(np.unique(out.data)) == {0.0, 1.0}

    def test_constant_maps_to_zeros(self):
        out = contrast_stretch(Volume3D(np.full((2, 2, 2), 9.0)), 0, 100)
        assert np.all(out.data == 0.0)

    def test_ramp_against_sort_oracle(self):
        # 1000-voxel ramp, stretched at the 1st/99th percentiles
        data = np.arange(1000.0).reshape(10, 10, 10)
        out = contrast_stretch(Volume3D(data), 1.0, 99.0)

        flat = sorted(data.ravel().tolist())

        def oracle_percentile(p):
            rank = -(-p / 100.0 * len(flat) // 1)  # ceil
            return flat[max(int(rank), 1) - 1]

        lo, hi = oracle_percentile(1.0), oracle_percentile(99.0)
        assert (lo, hi) == (9.0, 989.0)
        expected = np.clip((data - lo) / (hi - lo), 0.0, 1.0)
        np.testing.assert_allclose(out.data, expected, rtol=0, atol=0)

    def test_monotone_and_bounded(self, rng):
        vol = Volume3D(rng.normal(size=(6, 6, 6)))
        out = contrast_stretch(vol, 5, 95)
        assert out.data.min() >= 0.0 and out.data.max() <= 1.0
        a, b = vol.data.ravel(), out.data.ravel()
        order = np.argsort(a)
        assert np.all(np.diff(b[order]) >= 0)

    def test_rejects_bad_percentiles(self, random_volume):
        with pytest.raises(InputError):
            contrast_stretch(random_volume(), 50, 50)


class TestDownsample2x:
    def test_constant_stays_constant(self):
        out = downsample2x(Volume3D(np.full((4, 4, 4), 3.25), spacing=(1, 1, 1)))
        assert out.dims == (2, 2, 2)
        assert np.all(out.data == 3.25)
        assert out.spacing == (2.0, 2.0, 2.0)

    def test_2x2x2_block_mean(self):
        vol = Volume3D(np.arange(8.0).reshape(2, 2, 2))
        out = downsample2x(vol)
        assert out.dims == (1, 1, 1)
        assert out.data[0, 0, 0] == 3.5

    def test_matches_block_mean_oracle(self, rng):
        data = rng.normal(size=(4, 4, 4))
        out = downsample2x(Volume3D(data))
        expected = np.empty((2, 2, 2))
        for i in range(2):
            for j in range(2):
                for k in range(2):
                    expected[i, j, k] = data[
                        2 * i : 2 * i + 2, 2 * j : 2 * j + 2, 2 * k : 2 * k + 2
                    ].mean()
        np.testing.assert_allclose(out.data, expected, rtol=0, atol=1e-15)

    def test_odd_trailing_voxels_use_partial_blocks(self, rng):
        data = rng.normal(size=(3, 4, 5))
        out = downsample2x(Volume3D(data))
        assert out.dims == (2, 2, 3)
        assert out.data[1, 0, 0] == pytest.approx(data[2, 0:2, 0:2].mean(), rel=1e-14)
        assert out.data[1, 1, 2] == pytest.approx(data[2, 2:4, 4].mean(), rel=1e-14)

    def test_preserves_global_mean_for_even_dims(self, rng):
        data = rng.normal(size=(6, 4, 8))
        out = downsample2x(Volume3D(data))
        assert out.data.mean() == pytest.approx(data.mean(), rel=1e-13)

    def test_rejects_tiny_dims(self):
        with pytest.raises(InputError):
            downsample2x(Volume3D(np.zeros((1, 4, 4))))
