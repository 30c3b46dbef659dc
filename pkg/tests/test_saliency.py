import numpy as np
import pytest

from jsmkit.errors import InputError
from jsmkit.fields import DisplacementField, zero_field
from jsmkit.saliency import (
    JacobianSaliencyMap,
    VolumeChange,
    class_counts,
    classify_voxels,
    compute_jsm,
    jacobian_at_voxel,
    weight_mask,
)
from conftest import grid_points


def linear_field(dims, matrix, offset=(0.0, 0.0, 0.0)):
    g = grid_points(dims)
    return DisplacementField(g @ np.asarray(matrix).T + np.asarray(offset))


class TestJacobianAtVoxel:
    def test_zero_field(self):
        field = zero_field((4, 4, 4))
        np.testing.assert_array_equal(jacobian_at_voxel(field, (1, 2, 1)), np.zeros((3, 3)))

    def test_uniform_scaling_field(self):
        field = linear_field((5, 5, 5), 0.1 * np.eye(3))
        np.testing.assert_allclose(
            jacobian_at_voxel(field, (2, 2, 2)), 0.1 * np.eye(3), atol=1e-14
        )

    def test_shear_field(self):
        shear = np.zeros((3, 3))
        shear[0, 1] = 0.2  # vx = 0.2 * y
        field = linear_field((5, 5, 5), shear)
        np.testing.assert_allclose(jacobian_at_voxel(field, (2, 2, 2)), shear, atol=1e-14)

    def test_one_sided_boundaries_exact_for_linear(self):
        field = linear_field((4, 4, 4), [[0.05, 0.2, 0], [0, -0.04, 0], [0.1, 0, 0.03]])
        np.testing.assert_allclose(
            jacobian_at_voxel(field, (0, 0, 3)),
            [[0.05, 0.2, 0], [0, -0.04, 0], [0.1, 0, 0.03]],
            atol=1e-13,
        )

    def test_out_of_bounds(self):
        with pytest.raises(InputError):
            jacobian_at_voxel(zero_field((3, 3, 3)), (3, 0, 0))


class TestComputeJsm:
    def test_zero_field_gives_exact_ones(self):
        jsm = compute_jsm(zero_field((5, 6, 4)))
        np.testing.assert_allclose(jsm.values, 1.0, atol=1e-12)

    def test_uniform_dilation(self):
        jsm = compute_jsm(linear_field((6, 6, 6), 0.1 * np.eye(3)))
        interior = jsm.values[1:-1, 1:-1, 1:-1]
        np.testing.assert_allclose(interior, 1.331, atol=1e-9)

    def test_rigid_rotation_preserves_volume(self):
        theta = np.deg2rad(10.0)
        rot = np.array(
            [
                [np.cos(theta), -np.sin(theta), 0],
                [np.sin(theta), np.cos(theta), 0],
                [0, 0, 1],
            ]
        )
        g = grid_points((9, 9, 9))
        center = np.array([4.0, 4.0, 4.0])
        field = DisplacementField((g - center) @ rot.T + center - g)
        interior = compute_jsm(field).values[2:-2, 2:-2, 2:-2]
        np.testing.assert_allclose(interior, 1.0, atol=1e-3)

    def test_linear_fields_are_exact_everywhere(self, rng):
        mat = rng.uniform(-0.1, 0.1, size=(3, 3))
        jsm = compute_jsm(linear_field((5, 5, 5), mat))
        np.testing.assert_allclose(jsm.values, np.linalg.det(np.eye(3) + mat), atol=1e-13)

    def test_commutes_with_axis_permutation(self, rng):
        vectors = rng.normal(0, 0.05, size=(5, 6, 7, 3))
        jsm = compute_jsm(DisplacementField(vectors))
        perm = (2, 0, 1)
        permuted = np.transpose(vectors, (*perm, 3))[..., list(perm)]
        jsm_p = compute_jsm(DisplacementField(permuted))
        np.testing.assert_allclose(jsm_p.values, np.transpose(jsm.values, perm), atol=1e-12)

    def test_needs_three_voxels_per_axis(self):
        with pytest.raises(InputError):
            compute_jsm(zero_field((2, 5, 5)))


class TestClassifyVoxels:
    def test_all_ones_is_no_change(self):
        jsm = JacobianSaliencyMap(np.ones((3, 3, 3)))
        assert np.all(classify_voxels(jsm, 0.02) == VolumeChange.NONE.value)

    def test_dilation_is_expansion(self):
        jsm = JacobianSaliencyMap(np.full((3, 3, 3), 1.331))
        assert np.all(classify_voxels(jsm, 0.02) == VolumeChange.EXPANSION.value)

    def test_threshold_definition(self):
        jsm = JacobianSaliencyMap(np.full((2, 2, 2), 1.015))
        assert np.all(classify_voxels(jsm, 0.02) == VolumeChange.NONE.value)
        assert np.all(classify_voxels(jsm, 0.01) == VolumeChange.EXPANSION.value)

    def test_boundary_value_belongs_to_no_change(self):
        for det in (1.02, 0.98):
            jsm = JacobianSaliencyMap(np.full((2, 2, 2), det))
            assert np.all(classify_voxels(jsm, 0.02) == VolumeChange.NONE.value)

    def test_partition_is_exhaustive(self, rng):
        jsm = JacobianSaliencyMap(rng.uniform(0.5, 1.5, size=(6, 6, 6)))
        counts = class_counts(classify_voxels(jsm))
        assert sum(counts.values()) == 6 * 6 * 6


class TestWeightMask:
    def test_flat_map_gets_uniform_debug_weight(self):
        mask = weight_mask(JacobianSaliencyMap(np.ones((3, 3, 3))))
        assert np.all(mask.weights == 0.2)

    def test_deformed_voxel_gets_feature_weight(self):
        values = np.ones((3, 3, 3))
        values[1, 1, 1] = 1.5
        mask = weight_mask(JacobianSaliencyMap(values))
        assert mask.weights[1, 1, 1] == 0.8
        assert mask.weights[0, 0, 0] == 0.2

    def test_band_boundary_is_debug_weighted(self):
        values = np.ones((2, 2, 2))
        values[0, 0, 0] = 1.02
        values[1, 1, 1] = 0.98
        mask = weight_mask(JacobianSaliencyMap(values), flat_tol=0.02)
        assert mask.weights[0, 0, 0] == 0.2
        assert mask.weights[1, 1, 1] == 0.2

    def test_mask_takes_exactly_two_values_and_stays_positive(self, rng):
        jsm = JacobianSaliencyMap(rng.uniform(0.5, 1.5, size=(5, 5, 5)))
        mask = weight_mask(jsm)
        assert set(np.unique(mask.weights)) <= {0.2, 0.8}
        assert mask.weights.min() > 0

    def test_rejects_bad_weight_ordering(self):
        jsm = JacobianSaliencyMap(np.ones((2, 2, 2)))
        with pytest.raises(InputError):
            weight_mask(jsm, feature_weight=0.2, debug_weight=0.8)
