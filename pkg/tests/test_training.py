"""Training loop: schedule, early stopping, splits, loss, augmentation."""

import numpy as np
import pytest

from voxelxai.dataio import generate_cohort_arrays, split_subjects
from voxelxai.errors import VoxelXaiError
from voxelxai.nn.augment import AugmentConfig, ZCAWhitener, augment, shift_volume
from voxelxai.nn.network import NetworkSpec
from voxelxai.nn.training import (
    Adam,
    LabeledCohort,
    TrainConfig,
    cross_entropy,
    evaluate,
    train,
)
from voxelxai.volume import Volume3D


def tiny_cohort(n=24, dims=(6, 6, 6), seed=0, noise=0.2):
    vols, labels, _ = generate_cohort_arrays(n, dims, noise_level=noise, seed=seed)
    split = split_subjects(labels, (0.70, 0.20, 0.10), seed)
    return LabeledCohort(vols.astype(np.float64), labels, split)


def tiny_spec(dims=(6, 6, 6)):
    return NetworkSpec(dims, (2,), use_batchnorm=False, head="mlp", mlp_widths=(4, 4))


class TestTrainConfig:
    def test_lr_halves_then_freezes(self):
        cfg = TrainConfig(learning_rate=0.1, lr_decay_half_life=10, max_epochs=40)
        assert cfg.lr_at(0) == 0.1
        assert abs(cfg.lr_at(10) - 0.05) < 1e-15
        assert abs(cfg.lr_at(20) - 0.025) < 1e-15
        # decay stops at the midpoint of the budget
        assert cfg.lr_at(25) == cfg.lr_at(20)
        assert cfg.lr_at(39) == cfg.lr_at(20)

    def test_validation(self):
        with pytest.raises(VoxelXaiError):
            TrainConfig(split_fractions=(0.5, 0.2, 0.2))
        with pytest.raises(VoxelXaiError):
            TrainConfig(patience=0)


class TestSplits:
    def test_fractions_and_stratification(self):
        labels = np.arange(100) % 2
        split = split_subjects(labels, (0.70, 0.20, 0.10), seed=0)
        counts = {name: (split == name).sum() for name in ("train", "val", "test")}
        assert counts == {"train": 70, "val": 20, "test": 10}
        for name in counts:
            sel = labels[split == name]
            assert abs((sel == 1).sum() - (sel == 0).sum()) <= 1

    def test_deterministic_per_seed(self):
        labels = np.arange(40) % 2
        a = split_subjects(labels, (0.70, 0.20, 0.10), seed=3)
        b = split_subjects(labels, (0.70, 0.20, 0.10), seed=3)
        c = split_subjects(labels, (0.70, 0.20, 0.10), seed=4)
        assert (a == b).all()
        assert (a != c).any()

    def test_bad_fractions_rejected(self):
        with pytest.raises(VoxelXaiError):
            split_subjects(np.arange(40) % 2, (0.6, 0.2, 0.1), seed=0)

    def test_degenerate_split_rejected(self):
        # too few subjects to give every split both classes
        with pytest.raises(VoxelXaiError):
            split_subjects(np.arange(6) % 2, (0.70, 0.20, 0.10), seed=0)


class TestCrossEntropy:
    def test_uniform_logits_give_log_k(self):
        loss, _ = cross_entropy(np.zeros((4, 2)), np.array([0, 1, 0, 1]))
        assert abs(loss - np.log(2.0)) < 1e-11

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        logits = rng.normal(size=(3, 2))
        labels = np.array([0, 1, 1])
        _, grad = cross_entropy(logits, labels)
        eps = 1e-6
        for i in range(3):
            for j in range(2):
                hi = logits.copy(); hi[i, j] += eps
                lo = logits.copy(); lo[i, j] -= eps
                fd = (cross_entropy(hi, labels)[0] - cross_entropy(lo, labels)[0]) / (2 * eps)
                assert abs(grad[i, j] - fd) < 1e-8

    def test_confident_correct_prediction_has_near_zero_loss(self):
        logits = np.array([[30.0, 0.0]])
        loss, _ = cross_entropy(logits, np.array([0]))
        assert loss < 1e-9


class TestAdam:
    def test_first_step_moves_by_lr_in_gradient_direction(self):
        p = {"w": np.array([1.0, -2.0])}
        opt = Adam(dict(p))
        g = {"w": np.array([0.3, -0.7])}
        before = p["w"].copy()
        opt.params["w"] = p["w"]
        opt.step(g, lr=0.1)
        # bias-corrected first step is lr * sign(g) up to eps
        np.testing.assert_allclose(p["w"], before - 0.1 * np.sign(g["w"]), atol=1e-7)

    def test_converges_on_quadratic(self):
        p = {"w": np.array([5.0])}
        opt = Adam(p)
        for _ in range(500):
            opt.step({"w": 2.0 * p["w"]}, lr=0.05)
        assert abs(p["w"][0]) < 1e-2


class TestTrainLoop:
    def test_early_stopping_contract_with_frozen_weights(self):
        # lr = 0 means validation loss never improves after epoch 0, so
        # training must stop exactly at epoch == patience
        cohort = tiny_cohort()
        cfg = TrainConfig(learning_rate=0.0, max_epochs=30, patience=3, seed=0)
        _, report = train(cohort, tiny_spec(), cfg)
        assert report.best_epoch == 0
        assert report.stopped_epoch == 3
        assert len(report.epochs) == 4

    def test_patience_one_stops_at_second_epoch(self):
        cohort = tiny_cohort()
        cfg = TrainConfig(learning_rate=0.0, max_epochs=10, patience=1, seed=0)
        _, report = train(cohort, tiny_spec(), cfg)
        assert report.stopped_epoch == 1  # second epoch, zero-indexed
        assert len(report.epochs) == 2

    def test_runs_full_budget_without_stop(self):
        cohort = tiny_cohort()
        cfg = TrainConfig(learning_rate=0.0, max_epochs=2, patience=5, seed=0)
        _, report = train(cohort, tiny_spec(), cfg)
        assert report.stopped_epoch == 1
        assert len(report.epochs) == 2

    def test_deterministic_for_fixed_seed(self):
        cohort = tiny_cohort()
        cfg = TrainConfig(learning_rate=0.01, max_epochs=2, patience=5, seed=7)
        m1, r1 = train(cohort, tiny_spec(), cfg)
        m2, r2 = train(cohort, tiny_spec(), cfg)
        assert r1.epochs == r2.epochs
        for k, v in m1.param_dict().items():
            np.testing.assert_array_equal(v, m2.param_dict()[k])

    def test_report_covers_all_splits_and_csv(self, tmp_path):
        cohort = tiny_cohort()
        cfg = TrainConfig(learning_rate=0.01, max_epochs=2, patience=5, seed=0)
        _, report = train(cohort, tiny_spec(), cfg)
        assert set(report.accuracy) == {"train", "val", "test"}
        path = tmp_path / "log.csv"
        report.write_csv(path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "epoch,lr,train_loss,val_loss,val_acc"
        assert len(lines) == 1 + len(report.epochs)

    def test_degenerate_split_rejected(self):
        cohort = tiny_cohort()
        cohort.split[cohort.split == "test"] = "train"
        with pytest.raises(VoxelXaiError):
            train(cohort, tiny_spec(), TrainConfig(max_epochs=1))


class TestEvaluate:
    def test_accuracy_counts(self):
        cohort = tiny_cohort()
        cfg = TrainConfig(learning_rate=0.0, max_epochs=1, patience=5)
        model, _ = train(cohort, tiny_spec(), cfg)
        X, y = cohort.subset("train")
        _, acc = evaluate(model, X, y)
        preds = model.forward_batch(X).argmax(axis=1)
        assert acc == (preds == y).mean()


class TestAugment:
    def test_zero_magnitude_config_is_identity(self):
        rng = np.random.default_rng(1)
        v = Volume3D.from_array(rng.normal(size=(5, 5, 5)))
        cfg = AugmentConfig(rotate_deg=0.0, max_shift=0)
        out = augment(v, cfg, np.random.default_rng(0))
        np.testing.assert_array_equal(out.voxels, v.voxels)

    def test_shift_volume_matches_slicing(self):
        rng = np.random.default_rng(2)
        arr = rng.normal(size=(4, 4, 4))
        out = shift_volume(arr, sx=1, sy=-2)
        expect = np.zeros_like(arr)
        expect[:, : 4 - 2, 1:] = arr[:, 2:, : 4 - 1]
        np.testing.assert_array_equal(out, expect)

    def test_shift_beyond_extent_is_all_zero(self):
        arr = np.ones((3, 3, 3))
        np.testing.assert_array_equal(shift_volume(arr, 5, 0), np.zeros_like(arr))

    def test_deterministic_given_rng_state(self):
        rng = np.random.default_rng(3)
        v = Volume3D.from_array(np.random.default_rng(4).normal(size=(6, 6, 6)))
        cfg = AugmentConfig(rotate_deg=10.0, max_shift=2)
        a = augment(v, cfg, np.random.default_rng(5))
        b = augment(v, cfg, np.random.default_rng(5))
        np.testing.assert_array_equal(a.voxels, b.voxels)
        c = augment(v, cfg, rng)
        assert (a.voxels != c.voxels).any()

    def test_for_dims_scales_reference_shift(self):
        assert AugmentConfig.for_dims((128, 128, 128)).max_shift == 20
        assert AugmentConfig.for_dims((16, 16, 16)).max_shift == max(1, round(16 * 20 / 128))

    def test_zca_whitens_covariance(self):
        rng = np.random.default_rng(6)
        # low-dimensional data so the sample covariance is well conditioned
        X = rng.normal(size=(200, 5)) @ np.diag([3.0, 2.0, 1.0, 0.5, 0.2])
        wh = ZCAWhitener(eps=1e-6).fit(X)
        Z = np.stack([wh.transform(x) for x in X])
        cov = np.cov(Z, rowvar=False)
        np.testing.assert_allclose(cov, np.eye(5), atol=0.05)

    def test_zca_near_identity_with_large_eps(self):
        rng = np.random.default_rng(7)
        X = rng.normal(size=(20, 8))
        wh = ZCAWhitener(eps=1e6).fit(X)
        z = wh.transform(X[0])
        np.testing.assert_allclose(z, (X[0] - wh.mean) / np.sqrt(1e6), atol=1e-6)
