"""Attribution: supervoxel partitions, GradCAM, and Shapley estimators."""

import itertools
import math

import numpy as np
import pytest

from voxelxai.attribution import (
    AttributionMap,
    SupervoxelPartition,
    gradcam3d,
    make_partition,
    shapley_exact,
    shapley_sampled,
    weighted_activation_map,
)
from voxelxai.errors import DimensionMismatchError, VoxelXaiError
from voxelxai.nn.network import NetworkSpec, build_model, class_logit_scorer
from voxelxai.volume import Volume3D


def flat_scorer(weights):
    """Linear model on flattened volumes: f(x) = x . weights."""
    weights = np.asarray(weights, dtype=np.float64)

    def f(batch):
        return batch.reshape(len(batch), -1) @ weights

    return f


def zero_vol(dims=(4, 4, 4)):
    w, h, d = dims
    return Volume3D(dims, np.zeros(w * h * d))


def brute_force_shapley(f, x, p, baseline):
    """Definition-level oracle: average marginal gain over all permutations."""
    d = p.n_segments
    seg_masks = p.masks().astype(np.float64)

    def value(subset):
        keep = np.zeros(d)
        keep[list(subset)] = 1.0
        masked = baseline.voxels + (keep @ seg_masks) * (x.voxels - baseline.voxels)
        return f(masked.reshape(1, *x.to_array().shape))[0]

    phi = np.zeros(d)
    for perm in itertools.permutations(range(d)):
        prev = value(())
        seen = []
        for i in perm:
            seen.append(i)
            cur = value(seen)
            phi[i] += cur - prev
            prev = cur
    return phi / math.factorial(d)


class TestPartition:
    def test_block_tiling_example(self):
        p = make_partition((4, 4, 4), 2)
        assert p.n_segments == 8
        lab = p.labels.reshape(4, 4, 4)  # (z, y, x)
        assert lab[0, 0, 0] == 0
        assert lab[0, 0, 3] == 1
        assert lab[0, 3, 0] == 2
        assert lab[3, 0, 0] == 4
        # every voxel in a block shares its label
        assert len(np.unique(lab[:2, :2, :2])) == 1

    def test_block_covering_volume_is_single_segment(self):
        p = make_partition((4, 4, 4), 8)
        assert p.n_segments == 1
        np.testing.assert_array_equal(p.labels, np.zeros(64, dtype=np.int64))

    def test_odd_dims_against_counting_oracle(self):
        p = make_partition((5, 5, 5), 2)
        assert p.n_segments == 27
        assert np.bincount(p.labels, minlength=27).sum() == 125

    def test_boundary_blocks_allowed(self):
        p = make_partition((5, 4, 3), 2)
        assert p.n_segments == math.ceil(5 / 2) * math.ceil(4 / 2) * math.ceil(3 / 2)
        counts = np.bincount(p.labels)
        assert counts.sum() == 5 * 4 * 3 and (counts > 0).all()

    def test_masks_partition_the_volume(self):
        p = make_partition((4, 4, 4), 3)
        m = p.masks()
        np.testing.assert_array_equal(m.sum(axis=0), np.ones(64))

    def test_segment_sums_match_masks(self):
        rng = np.random.default_rng(0)
        p = make_partition((4, 4, 4), 2)
        v = rng.normal(size=64)
        np.testing.assert_allclose(
            p.segment_sums(v), p.masks() @ v, atol=1e-12
        )

    def test_invalid_partitions_rejected(self):
        with pytest.raises(VoxelXaiError):
            make_partition((4, 4, 4), 0)
        with pytest.raises(DimensionMismatchError):
            SupervoxelPartition(np.zeros(10, dtype=np.int64), 1, (4, 4, 4))
        with pytest.raises(VoxelXaiError):
            # declared segment 1 is empty
            SupervoxelPartition(np.zeros(8, dtype=np.int64), 2, (2, 2, 2))

    def test_attribution_map_method_validated(self):
        with pytest.raises(VoxelXaiError):
            AttributionMap(zero_vol(), "lime", 0)


class TestWeightedActivationMap:
    def test_single_channel_positive_gradient(self):
        acts = np.arange(8.0).reshape(1, 2, 2, 2) - 3.0
        grads = np.full((1, 2, 2, 2), 2.0)
        # alpha = 2, cam = relu(2 * A)
        np.testing.assert_array_equal(
            weighted_activation_map(acts, grads), np.maximum(2.0 * acts[0], 0.0)
        )

    def test_channels_combine_by_mean_gradient(self):
        rng = np.random.default_rng(1)
        acts = rng.normal(size=(3, 2, 2, 2))
        grads = rng.normal(size=(3, 2, 2, 2))
        alpha = grads.mean(axis=(1, 2, 3))
        expect = np.maximum(np.tensordot(alpha, acts, axes=1), 0.0)
        np.testing.assert_allclose(
            weighted_activation_map(acts, grads), expect, atol=1e-12
        )

    def test_negative_evidence_clipped_to_zero(self):
        acts = np.ones((1, 2, 2, 2))
        grads = -np.ones((1, 2, 2, 2))
        np.testing.assert_array_equal(
            weighted_activation_map(acts, grads), np.zeros((2, 2, 2))
        )

    def test_shape_mismatch_rejected(self):
        with pytest.raises(DimensionMismatchError):
            weighted_activation_map(np.zeros((1, 2, 2, 2)), np.zeros((2, 2, 2, 2)))


class TestGradCam:
    def _model(self, dims=(8, 8, 8)):
        spec = NetworkSpec(
            dims, (2, 3), use_batchnorm=False, head="mlp", mlp_widths=(6, 5)
        )
        return build_model(spec, np.random.default_rng(2))

    def test_map_is_normalized_and_input_sized(self):
        model = self._model()
        x = Volume3D.from_array(np.random.default_rng(3).normal(size=(8, 8, 8)))
        am = gradcam3d(model, x, class_index=1, subject_id="s1")
        assert am.method == "gradcam" and am.subject_id == "s1"
        assert am.map.dims == x.dims
        assert am.map.voxels.min() >= 0.0 and am.map.voxels.max() <= 1.0

    def test_deterministic(self):
        model = self._model()
        x = Volume3D.from_array(np.random.default_rng(4).normal(size=(8, 8, 8)))
        a = gradcam3d(model, x, 0)
        b = gradcam3d(model, x, 0)
        np.testing.assert_array_equal(a.map.voxels, b.map.voxels)


class TestShapleyExact:
    def test_linear_model_gives_segment_sums(self):
        # spec example fixture: linear scorer, zero baseline
        rng = np.random.default_rng(5)
        weights = rng.normal(size=64)
        x = Volume3D.from_array(rng.normal(size=(4, 4, 4)))
        p = make_partition((4, 4, 4), 2)
        am = shapley_exact(flat_scorer(weights), x, p, zero_vol())
        expect = p.segment_sums(weights * x.voxels)
        np.testing.assert_allclose(am.segment_values, expect, atol=1e-10)

    def test_efficiency_axiom(self):
        rng = np.random.default_rng(6)
        x = Volume3D.from_array(rng.normal(size=(4, 4, 4)))
        p = make_partition((4, 4, 4), 2)
        base = zero_vol()

        def f(batch):  # nonlinear scorer
            flat = batch.reshape(len(batch), -1)
            return np.tanh(flat.sum(axis=1)) + (flat**2).sum(axis=1) * 0.01

        am = shapley_exact(f, x, p, base)
        total = f(x.to_array()[None])[0] - f(base.to_array()[None])[0]
        assert abs(am.segment_values.sum() - total) < 1e-9

    def test_dummy_axiom(self):
        rng = np.random.default_rng(7)
        weights = rng.normal(size=64)
        p = make_partition((4, 4, 4), 2)
        weights[p.labels == 3] = 0.0  # segment 3 never affects the score
        x = Volume3D.from_array(rng.normal(size=(4, 4, 4)))
        am = shapley_exact(flat_scorer(weights), x, p, zero_vol())
        assert abs(am.segment_values[3]) < 1e-12

    def test_symmetry_axiom(self):
        # two interchangeable segments get equal credit
        p = make_partition((2, 1, 1), 1)  # two one-voxel segments

        def f(batch):
            flat = batch.reshape(len(batch), -1)
            return flat[:, 0] * flat[:, 1] + flat[:, 0] + flat[:, 1]

        x = Volume3D((2, 1, 1), np.array([3.0, 3.0]))
        am = shapley_exact(f, x, p, Volume3D((2, 1, 1), np.zeros(2)))
        assert abs(am.segment_values[0] - am.segment_values[1]) < 1e-12

    def test_matches_permutation_definition_oracle(self):
        rng = np.random.default_rng(8)
        p = make_partition((2, 2, 2), 1)  # 8 one-voxel segments
        x = Volume3D.from_array(rng.normal(size=(2, 2, 2)))
        base = Volume3D.from_array(rng.normal(size=(2, 2, 2)) * 0.1)
        rng_w = rng.normal(size=8)

        def f(batch):
            flat = batch.reshape(len(batch), -1)
            return np.sin(flat @ rng_w) + 0.5 * (flat @ rng_w) ** 2
        am = shapley_exact(f, x, p, base)
        oracle = brute_force_shapley(f, x, p, base)
        np.testing.assert_allclose(am.segment_values, oracle, atol=1e-10)

    def test_voxel_map_broadcasts_segment_values(self):
        rng = np.random.default_rng(9)
        weights = rng.normal(size=64)
        x = Volume3D.from_array(rng.normal(size=(4, 4, 4)))
        p = make_partition((4, 4, 4), 2)
        am = shapley_exact(flat_scorer(weights), x, p, zero_vol())
        np.testing.assert_array_equal(am.map.voxels, am.segment_values[p.labels])

    def test_input_checks(self):
        p = make_partition((4, 4, 4), 1)  # 64 segments
        x = zero_vol()
        with pytest.raises(VoxelXaiError):
            shapley_exact(flat_scorer(np.zeros(64)), x, p, zero_vol())
        with pytest.raises(DimensionMismatchError):
            shapley_exact(
                flat_scorer(np.zeros(64)), x, make_partition((4, 4, 4), 2),
                zero_vol((2, 4, 8)),
            )

    def test_non_finite_scorer_rejected(self):
        p = make_partition((2, 2, 2), 2)

        def f(batch):
            return np.full(len(batch), np.nan)

        with pytest.raises(VoxelXaiError):
            shapley_exact(f, zero_vol((2, 2, 2)), p, zero_vol((2, 2, 2)))


class TestShapleySampled:
    def test_exact_for_linear_model_with_one_permutation(self):
        # each marginal gain of a linear model equals the Shapley value
        rng = np.random.default_rng(10)
        weights = rng.normal(size=64)
        x = Volume3D.from_array(rng.normal(size=(4, 4, 4)))
        p = make_partition((4, 4, 4), 2)
        am = shapley_sampled(flat_scorer(weights), x, p, zero_vol(), 1, seed=0)
        expect = p.segment_sums(weights * x.voxels)
        np.testing.assert_allclose(am.segment_values, expect, atol=1e-10)

    def test_converges_to_exact_values(self):
        rng = np.random.default_rng(11)
        p = make_partition((4, 4, 2), 2)  # 2x2x1 = 4 segments
        x = Volume3D.from_array(rng.normal(size=(2, 4, 4)))
        w = rng.normal(size=32)

        def f(batch):
            flat = batch.reshape(len(batch), -1)
            s = flat @ w
            return s + 0.3 * s**2

        exact = shapley_exact(f, x, p, zero_vol((4, 4, 2))).segment_values
        est = shapley_sampled(f, x, p, zero_vol((4, 4, 2)), 2000, seed=1).segment_values
        scale = np.abs(exact).max()
        assert np.abs(est - exact).max() < 0.05 * scale

    def test_deterministic_per_seed(self):
        rng = np.random.default_rng(12)
        x = Volume3D.from_array(rng.normal(size=(4, 4, 4)))
        p = make_partition((4, 4, 4), 2)
        f = flat_scorer(rng.normal(size=64))
        a = shapley_sampled(f, x, p, zero_vol(), 16, seed=5)
        b = shapley_sampled(f, x, p, zero_vol(), 16, seed=5)
        c = shapley_sampled(f, x, p, zero_vol(), 16, seed=6)
        np.testing.assert_array_equal(a.segment_values, b.segment_values)
        assert (a.segment_values != c.segment_values).any()

    def test_chunking_does_not_change_result(self):
        rng = np.random.default_rng(13)
        x = Volume3D.from_array(rng.normal(size=(4, 4, 4)))
        p = make_partition((4, 4, 4), 2)
        f = flat_scorer(rng.normal(size=64))
        a = shapley_sampled(f, x, p, zero_vol(), 10, seed=2, chunk_permutations=3)
        b = shapley_sampled(f, x, p, zero_vol(), 10, seed=2, chunk_permutations=256)
        # different chunking consumes the RNG identically per permutation
        np.testing.assert_allclose(a.segment_values, b.segment_values, atol=1e-12)

    def test_error_shrinks_as_permutations_double(self):
        # estimator consistency: median error over seeds roughly halves when
        # the permutation budget quadruples (variance scales as 1/n)
        rng = np.random.default_rng(14)
        p = make_partition((8, 1, 1), 1)  # 8 one-voxel segments
        w = rng.normal(size=8)
        q = rng.normal(size=(8, 8))
        q = (q + q.T) / 2

        def f(batch):
            flat = batch.reshape(len(batch), -1)
            return flat @ w + np.einsum("ni,ij,nj->n", flat, q, flat)

        x = Volume3D((8, 1, 1), rng.normal(size=8))
        base = Volume3D((8, 1, 1), np.zeros(8))
        exact = shapley_exact(f, x, p, base).segment_values

        def median_err(n_perm):
            errs = []
            for seed in range(15):
                est = shapley_sampled(f, x, p, base, n_perm, seed=seed).segment_values
                errs.append(np.abs(est - exact).max())
            return np.median(errs)

        assert median_err(64) <= 1.6 * median_err(16) / 2.0

    def test_rejects_zero_permutations(self):
        p = make_partition((2, 2, 2), 2)
        with pytest.raises(VoxelXaiError):
            shapley_sampled(
                flat_scorer(np.zeros(8)), zero_vol((2, 2, 2)), p,
                zero_vol((2, 2, 2)), 0, seed=0,
            )


class TestWithRealModel:
    def test_shapley_on_model_margin_scorer(self):
        spec = NetworkSpec(
            (4, 4, 4), (2,), use_batchnorm=False, head="mlp", mlp_widths=(4, 4)
        )
        model = build_model(spec, np.random.default_rng(14))
        x = Volume3D.from_array(np.random.default_rng(15).normal(size=(4, 4, 4)))
        p = make_partition((4, 4, 4), 2)
        f = class_logit_scorer(model, 1)
        am = shapley_exact(f, x, p, zero_vol())
        total = f(x.to_array()[None])[0] - f(np.zeros((1, 4, 4, 4)))[0]
        assert abs(am.segment_values.sum() - total) < 1e-8
