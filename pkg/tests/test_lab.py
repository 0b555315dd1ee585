import numpy as np
import pytest

from freqmerge import Checkpoint, ShapeMismatchError, TrainingDivergedError
from freqmerge.lab import (
    Dataset,
    LabConfig,
    MLPSpec,
    TaskSpec,
    TrainConfig,
    build_datasets,
    build_lab,
    evaluate,
    finetune,
    forward,
    gen_task,
    generalization_matrix,
    init_mlp,
    pretrain,
)


def tiny_spec(**overrides):
    base = dict(
        task_id="t",
        centers=((2.0, 0.0), (-1.0, 1.7), (-1.0, -1.7)),
        sigma=0.3,
        n_train=64,
        n_test=64,
        seed=5,
    )
    base.update(overrides)
    return TaskSpec(**base)


class TestSpecs:
    def test_task_spec_validation(self):
        with pytest.raises(ValueError):
            tiny_spec(sigma=0.0)
        with pytest.raises(ValueError):
            tiny_spec(centers=((1.0, 0.0), (1.0, 0.0), (0.0, 1.0)))
        with pytest.raises(ValueError):
            tiny_spec(n_classes=1, centers=((0.0, 0.0),))

    def test_mlp_spec_validation(self):
        with pytest.raises(ValueError):
            MLPSpec(widths=(4,))
        with pytest.raises(ValueError):
            MLPSpec(widths=(2, 0, 3))
        with pytest.raises(ValueError):
            MLPSpec(activation="tanh")

    def test_train_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(lr=0.1, epochs=0)
        with pytest.raises(ValueError):
            TrainConfig(lr=-0.1, epochs=1)
        TrainConfig(lr=0.0, epochs=1)  # zero lr is a valid no-op schedule


class TestGenTask:
    def test_near_zero_noise_is_nearest_center_separable(self):
        ds = gen_task(tiny_spec(sigma=1e-6))
        centers = np.asarray(tiny_spec().centers)
        dists = ((ds.test_x[:, None, :] - centers[None]) ** 2).sum(axis=2)
        assert (dists.argmin(axis=1) == ds.test_y).mean() == 1.0

    def test_seeded_reproducibility(self):
        a = gen_task(tiny_spec())
        b = gen_task(tiny_spec())
        np.testing.assert_array_equal(a.train_x, b.train_x)
        np.testing.assert_array_equal(a.test_y, b.test_y)

    def test_class_priors_uniform(self):
        ds = gen_task(tiny_spec(n_train=10_000, n_test=0))
        freqs = np.bincount(ds.train_y, minlength=3) / 10_000
        np.testing.assert_allclose(freqs, 1 / 3, atol=0.02)

    def test_rotation_moves_centers(self):
        plain = gen_task(tiny_spec())
        turned = gen_task(tiny_spec(rotation=0.5))
        assert not np.allclose(plain.train_x, turned.train_x)

    def test_offsets_shift_global_labels(self):
        ds = gen_task(tiny_spec(), class_offset=3)
        np.testing.assert_array_equal(ds.test_labels_global, ds.test_y + 3)


class TestTraining:
    def _setup(self):
        specs = [tiny_spec(task_id="a", seed=11), tiny_spec(task_id="b", seed=12, rotation=0.6)]
        mlp = MLPSpec(widths=(2, 16, 6), seed=3)
        return specs, mlp

    def test_pretrain_reduces_loss_and_is_reproducible(self):
        specs, mlp = self._setup()
        cfg = TrainConfig(lr=0.1, epochs=5, seed=7)
        a = pretrain(specs, mlp, cfg)
        b = pretrain(specs, mlp, cfg)
        for name, arr in a.items():
            np.testing.assert_array_equal(arr, b[name])
        assert a.origin_tag == "pretrained"

    def test_zero_lr_pretrain_diverges_check(self):
        specs, mlp = self._setup()
        with pytest.raises(TrainingDivergedError):
            pretrain(specs, mlp, TrainConfig(lr=0.0, epochs=1))

    def test_finetune_zero_lr_returns_ancestor(self):
        specs, mlp = self._setup()
        pre = pretrain(specs, mlp, TrainConfig(lr=0.1, epochs=3, seed=1))
        ds = build_datasets(specs)[0]
        tuned = finetune(pre, ds, TrainConfig(lr=0.0, epochs=2))
        for name, arr in pre.items():
            np.testing.assert_array_equal(arr, tuned[name])

    def test_finetune_improves_own_task(self):
        specs, mlp = self._setup()
        pre = pretrain(specs, mlp, TrainConfig(lr=0.05, epochs=2, seed=1))
        ds = build_datasets(specs)[0]
        tuned = finetune(pre, ds, TrainConfig(lr=0.1, epochs=20, seed=2))
        assert evaluate(tuned, ds) >= evaluate(pre, ds)
        assert tuned.origin_tag == "task:a"

    def test_finetune_seeded_reproducibility(self):
        specs, mlp = self._setup()
        pre = pretrain(specs, mlp, TrainConfig(lr=0.05, epochs=2, seed=1))
        ds = build_datasets(specs)[1]
        cfg = TrainConfig(lr=0.1, epochs=4, seed=9)
        a = finetune(pre, ds, cfg)
        b = finetune(pre, ds, cfg)
        for name, arr in a.items():
            np.testing.assert_array_equal(arr, b[name])


class TestEvaluate:
    def test_perfect_predictor_on_degenerate_noise(self):
        spec = tiny_spec(sigma=1e-6, n_train=256, n_test=256)
        ds = gen_task(spec)
        mlp = MLPSpec(widths=(2, 16, 3), seed=0)
        pre = pretrain([spec], mlp, TrainConfig(lr=0.2, epochs=30, seed=0))
        assert evaluate(pre, ds) == 1.0

    def test_constant_predictor_hits_chance(self):
        ds = gen_task(tiny_spec(n_train=0, n_test=4096, seed=77))
        model = Checkpoint(
            {
                "layer0.weight": np.zeros((2, 3), dtype=np.float32),
                "layer0.bias": np.zeros(3, dtype=np.float32),
            }
        )
        # all-zero logits: argmax picks class 0 everywhere
        assert evaluate(model, ds) == pytest.approx(1 / 3, abs=0.05)

    def test_matches_naive_loop(self):
        ds = gen_task(tiny_spec())
        model = init_mlp(MLPSpec(widths=(2, 8, 3), seed=2))
        fast = evaluate(model, ds)
        hits = 0
        for row, label in zip(ds.test_x, ds.test_labels_global):
            logits = forward(model, row[None, :])[0]
            hits += int(np.argmax(logits) == label)
        assert fast == hits / ds.test_x.shape[0]

    def test_shuffle_invariance(self):
        ds = gen_task(tiny_spec())
        model = init_mlp(MLPSpec(widths=(2, 8, 3), seed=2))
        perm = np.random.default_rng(0).permutation(ds.test_x.shape[0])
        shuffled = Dataset(
            ds.task_id, ds.class_offset, ds.n_classes,
            ds.train_x, ds.train_y, ds.test_x[perm], ds.test_y[perm],
        )
        assert evaluate(model, ds) == evaluate(model, shuffled)

    def test_dimension_mismatch(self):
        ds = gen_task(tiny_spec())
        model = init_mlp(MLPSpec(widths=(5, 4, 3), seed=0))
        with pytest.raises(ShapeMismatchError):
            evaluate(model, ds)


class TestGeneralizationMatrix:
    def test_rho_zero_matrices_identical(self):
        lab = build_lab(LabConfig(n_train=96, n_test=96,
                                  pretrain=TrainConfig(lr=0.05, epochs=4),
                                  finetune=TrainConfig(lr=0.05, epochs=6)), seed=0)
        filt, raw = generalization_matrix(lab.pretrained, lab.task_vectors, lab.datasets, rho=0.0)
        np.testing.assert_allclose(filt, raw, atol=1e-12)
        assert filt.shape == (3, 3)

    def test_output_range(self):
        lab = build_lab(LabConfig(n_train=96, n_test=96,
                                  pretrain=TrainConfig(lr=0.05, epochs=4),
                                  finetune=TrainConfig(lr=0.05, epochs=6)), seed=1)
        filt, raw = generalization_matrix(lab.pretrained, lab.task_vectors, lab.datasets, rho=0.2)
        for mat in (filt, raw):
            assert np.all(mat >= 0.0) and np.all(mat <= 1.0)


class TestLabConfig:
    def test_default_shapes(self):
        cfg = LabConfig()
        assert cfg.widths() == (2, 32, 32, 9)
        specs = cfg.task_specs(seed=0)
        assert [s.task_id for s in specs] == ["task0", "task1", "task2"]
        assert specs[1].rotation == pytest.approx(cfg.rotation_step)

    def test_parameter_count_near_advertised(self):
        model = init_mlp(MLPSpec(widths=LabConfig().widths(), seed=0))
        assert model.num_params == 2 * 32 + 32 + 32 * 32 + 32 + 32 * 9 + 9

    def test_build_lab_reproducible(self):
        cfg = LabConfig(n_train=64, n_test=64,
                        pretrain=TrainConfig(lr=0.05, epochs=2),
                        finetune=TrainConfig(lr=0.05, epochs=2))
        a = build_lab(cfg, seed=4)
        b = build_lab(cfg, seed=4)
        for ck_a, ck_b in zip(a.finetuned, b.finetuned):
            for name, arr in ck_a.items():
                np.testing.assert_array_equal(arr, ck_b[name])
