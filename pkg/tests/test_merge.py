import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from freqmerge import Checkpoint, TaskVector, ZeroTaskVectorError, mean_abs, task_vector
from freqmerge.merge import (
    MergeWeights,
    dare_drop,
    filtered_merge,
    fr_merge,
    merging_coefficients,
    task_arithmetic,
    ties_merge,
    weight_average,
)
from freqmerge.spectral import FilterSpec, SpectrumGrid, dft_oracle, removal_mask


def make_tv(values_by_name, task_id="t"):
    return TaskVector({k: np.asarray(v, dtype=np.float32) for k, v in values_by_name.items()}, task_id)


def random_pair(seed, shape=(4, 4)):
    rng = np.random.default_rng(seed)
    pre = Checkpoint({"w": rng.standard_normal(shape).astype(np.float32)})
    tv = TaskVector({"w": rng.standard_normal(shape).astype(np.float32)}, f"task{seed}")
    return pre, tv


class TestMergingCoefficients:
    def test_single_task(self):
        assert merging_coefficients([make_tv({"w": [1.0, -2.0]})]).lambdas == (1.0,)

    def test_hand_evaluated_shares(self):
        # mean magnitudes 1.0 and 3.0 -> shares 0.25 and 0.75
        a = make_tv({"w": [1.0, -1.0]}, "a")
        b = make_tv({"w": [3.0, -3.0]}, "b")
        lambdas = merging_coefficients([a, b]).lambdas
        assert lambdas[0] == pytest.approx(0.25, abs=1e-9)
        assert lambdas[1] == pytest.approx(0.75, abs=1e-9)

    def test_equal_tasks_uniform(self):
        tvs = [make_tv({"w": [2.0, -2.0]}, str(i)) for i in range(5)]
        for lam in merging_coefficients(tvs).lambdas:
            assert lam == pytest.approx(0.2, abs=1e-12)

    def test_all_zero_rejected(self):
        with pytest.raises(ZeroTaskVectorError):
            merging_coefficients([make_tv({"w": [0.0, 0.0]})])

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            merging_coefficients([])

    @given(seed=st.integers(0, 10_000))
    @settings(max_examples=30, deadline=None)
    def test_permutation_equivariance(self, seed):
        rng = np.random.default_rng(seed)
        tvs = [
            make_tv({"w": rng.standard_normal(6).astype(np.float32)}, str(i)) for i in range(3)
        ]
        forward = merging_coefficients(tvs).lambdas
        reverse = merging_coefficients(tvs[::-1]).lambdas
        assert forward == pytest.approx(reverse[::-1], rel=1e-12)

    @given(seed=st.integers(0, 10_000), alpha=st.floats(0.1, 50.0))
    @settings(max_examples=30, deadline=None)
    def test_scale_covariance(self, seed, alpha):
        rng = np.random.default_rng(seed)
        raw = [rng.standard_normal(8).astype(np.float64) for _ in range(3)]
        plain = merging_coefficients([make_tv({"w": r}, str(i)) for i, r in enumerate(raw)])
        scaled = merging_coefficients(
            [make_tv({"w": alpha * r}, str(i)) for i, r in enumerate(raw)]
        )
        assert plain.lambdas == pytest.approx(scaled.lambdas, rel=1e-4)

    def test_weights_validate(self):
        with pytest.raises(ValueError):
            MergeWeights((0.5, 0.4))
        with pytest.raises(ValueError):
            MergeWeights((-0.1, 1.1))


class TestFrMerge:
    def test_single_task_rho_zero_recovers_finetuned(self):
        pre, tv = random_pair(0)
        fine = Checkpoint({"w": pre["w"] + tv["w"]})
        merged, report = fr_merge(pre, [tv], rho=0.0)
        np.testing.assert_allclose(merged["w"], fine["w"], rtol=1e-6, atol=1e-7)
        assert report.lambdas == [1.0]
        assert report.task_count == 1
        assert report.param_count == 16

    def test_identical_tasks_rho_zero(self):
        pre, tv = random_pair(1)
        twin = TaskVector(dict(tv.tensors), task_id="twin")
        merged, _ = fr_merge(pre, [tv, twin], rho=0.0)
        np.testing.assert_allclose(
            merged["w"], pre["w"].astype(np.float64) + tv["w"], rtol=1e-6, atol=1e-7
        )

    def test_matches_oracle_pipeline(self):
        rng = np.random.default_rng(2)
        pre = Checkpoint({"w": rng.standard_normal((4, 4)).astype(np.float32)})
        tvs = [
            TaskVector({"w": rng.standard_normal((4, 4)).astype(np.float32)}, "a"),
            TaskVector({"w": rng.standard_normal((4, 4)).astype(np.float32)}, "b"),
        ]
        rho = 0.1
        merged, _ = fr_merge(pre, tvs, rho)

        # independent pipeline: naive transform, same mask, weighted sum
        lams = merging_coefficients(tvs).lambdas
        mask = removal_mask((4, 4), FilterSpec.high_pass(rho)).reshape(4, 4)
        acc = pre["w"].astype(np.float64).copy()
        for tv, lam in zip(tvs, lams):
            coeffs = dft_oracle(tv["w"].astype(np.float64)).coefficients.copy()
            coeffs[mask] = 0.0
            acc += lam * dft_oracle(SpectrumGrid((4, 4), coeffs), inverse=True).real
        np.testing.assert_allclose(merged["w"], acc, atol=1e-4)

    def test_report_energy_ratios_finite_and_below_one(self):
        pre, tv = random_pair(3)
        _, report = fr_merge(pre, [tv], rho=0.4)
        ratio = report.energy_ratios["w"]
        assert 0.0 <= ratio <= 1.0 + 1e-12
        report.to_dict()  # must not raise


class TestWeightAverage:
    def test_identical_inputs_idempotent(self):
        pre, _ = random_pair(4)
        out = weight_average([pre, pre, pre])
        np.testing.assert_allclose(out["w"], pre["w"], atol=1e-7)

    def test_forced_mean(self):
        a = Checkpoint({"w": [0.0]})
        b = Checkpoint({"w": [2.0]})
        np.testing.assert_allclose(weight_average([a, b])["w"], [1.0])

    def test_matches_naive_loop(self):
        rng = np.random.default_rng(5)
        cks = [Checkpoint({"w": rng.standard_normal(10).astype(np.float32)}) for _ in range(3)]
        out = weight_average(cks)
        naive = np.zeros(10)
        for ck in cks:
            for i, x in enumerate(ck["w"].tolist()):
                naive[i] += x / 3
        np.testing.assert_allclose(out["w"], naive, atol=1e-7)


class TestTaskArithmetic:
    def test_lam_zero_returns_pre(self):
        pre, tv = random_pair(6)
        out = task_arithmetic(pre, [tv], 0.0)
        np.testing.assert_allclose(out["w"], pre["w"], atol=0.0)

    def test_single_vector_full_scale(self):
        pre, tv = random_pair(7)
        out = task_arithmetic(pre, [tv], 1.0)
        np.testing.assert_allclose(
            out["w"], pre["w"].astype(np.float64) + tv["w"], rtol=1e-6, atol=1e-7
        )

    def test_two_vectors_half_scale_by_hand(self):
        pre = Checkpoint({"w": [1.0, 1.0]})
        a = make_tv({"w": [2.0, 0.0]}, "a")
        b = make_tv({"w": [0.0, 4.0]}, "b")
        out = task_arithmetic(pre, [a, b], 0.5)
        np.testing.assert_allclose(out["w"], [2.0, 3.0])


class TestTiesMerge:
    def test_hand_trace_sign_election(self):
        pre = Checkpoint({"w": [0.0]})
        a = make_tv({"w": [1.0]}, "a")
        b = make_tv({"w": [-2.0]}, "b")
        out = ties_merge(pre, [a, b], keep_frac=1.0)
        # sum = -1 -> elected sign negative -> mean of agreeing = -2.0
        np.testing.assert_allclose(out["w"], [-2.0])

    def test_identical_vectors_recovered_on_support(self):
        pre, tv = random_pair(8)
        out = ties_merge(pre, [tv, TaskVector(dict(tv.tensors), "b")], keep_frac=1.0)
        np.testing.assert_allclose(
            out["w"], pre["w"].astype(np.float64) + tv["w"], rtol=1e-6, atol=1e-7
        )

    def test_single_vector_equals_task_addition(self):
        pre, tv = random_pair(9)
        out = ties_merge(pre, [tv], keep_frac=1.0)
        np.testing.assert_allclose(
            out["w"], pre["w"].astype(np.float64) + tv["w"], rtol=1e-6, atol=1e-7
        )

    def test_trimming_keeps_top_fraction(self):
        pre = Checkpoint({"w": [0.0, 0.0, 0.0, 0.0]})
        tv = make_tv({"w": [0.1, -0.9, 0.5, 0.05]})
        out = ties_merge(pre, [tv], keep_frac=0.5)
        np.testing.assert_allclose(out["w"], [0.0, -0.9, 0.5, 0.0], atol=1e-7)

    def test_zero_sum_elects_positive(self):
        pre = Checkpoint({"w": [0.0]})
        a = make_tv({"w": [1.0]}, "a")
        b = make_tv({"w": [-1.0]}, "b")
        out = ties_merge(pre, [a, b], keep_frac=1.0)
        np.testing.assert_allclose(out["w"], [1.0])

    def test_keep_frac_range(self):
        pre, tv = random_pair(10)
        with pytest.raises(ValueError):
            ties_merge(pre, [tv], keep_frac=0.0)
        with pytest.raises(ValueError):
            ties_merge(pre, [tv], keep_frac=1.5)


class TestDareDrop:
    def test_p_zero_identity(self):
        _, tv = random_pair(11)
        out = dare_drop(tv, 0.0, seed=3)
        np.testing.assert_array_equal(out["w"], tv["w"])

    def test_seed_reproducibility(self):
        _, tv = random_pair(12)
        a = dare_drop(tv, 0.5, seed=42)
        b = dare_drop(tv, 0.5, seed=42)
        np.testing.assert_array_equal(a["w"], b["w"])
        c = dare_drop(tv, 0.5, seed=43)
        assert not np.array_equal(a["w"], c["w"])

    def test_unbiased_in_expectation(self):
        tv = make_tv({"w": [2.0]})
        p = 0.4
        draws = np.array([dare_drop(tv, p, seed)["w"][0] for seed in range(10_000)])
        se = draws.std(ddof=1) / np.sqrt(draws.size)
        assert abs(draws.mean() - 2.0) <= 3 * se

    def test_p_one_rejected(self):
        _, tv = random_pair(13)
        with pytest.raises(ValueError):
            dare_drop(tv, 1.0, seed=0)


class TestFilteredMergeReportDeterminism:
    def test_same_inputs_same_tensors(self):
        pre, tv = random_pair(14)
        first, _ = filtered_merge(pre, [tv], FilterSpec.high_pass(0.3))
        second, _ = filtered_merge(pre, [tv], FilterSpec.high_pass(0.3))
        np.testing.assert_array_equal(first["w"], second["w"])
