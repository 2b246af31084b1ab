"""Scores, quantiles, prediction sets, Mondrian cells, and metrics."""

import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geocp.conformal import (
    Partitioner,
    ScoreFunction,
    WeightVector,
    calibrate,
    conformal_quantile,
    evaluate,
    kernel_weights,
    mondrian_calibrate,
    predict_set,
    quantiles_for,
    set_matrix,
    weighted_quantile,
)


def rank_oracle(scores, alpha):
    """Linear scan over sorted scores with exact rational rank comparison."""
    ordered = sorted(scores)
    n = len(ordered)
    target = (n + 1) * (1 - Fraction(alpha))
    for j in range(1, n + 1):
        if j >= target:
            return ordered[j - 1]
    return math.inf


class TestScores:
    def test_thr_example(self):
        sf = ScoreFunction("thr")
        assert sf.score([0.5, 0.3, 0.2], 1) == pytest.approx(0.7)

    def test_aps_example(self):
        sf = ScoreFunction("aps")
        assert sf.score([0.5, 0.3, 0.2], 1) == pytest.approx(0.8)

    def test_aps_argmax_equals_max_prob(self):
        sf = ScoreFunction("aps")
        assert sf.score([0.5, 0.3, 0.2], 0) == pytest.approx(0.5)

    def test_aps_ties_all_count(self):
        sf = ScoreFunction("aps")
        # both tied classes contribute before/with the candidate
        assert sf.score([0.4, 0.4, 0.2], 0) == pytest.approx(0.8)
        assert sf.score([0.4, 0.4, 0.2], 1) == pytest.approx(0.8)

    def test_score_matrix_matches_scalar(self):
        sf = ScoreFunction("aps")
        rng = np.random.default_rng(3)
        probs = rng.dirichlet(np.ones(5), size=20)
        matrix = sf.score_matrix(probs)
        for i in range(20):
            for y in range(5):
                assert matrix[i, y] == pytest.approx(sf.score(probs[i], y))

    def test_scores_for_matches_scalar(self):
        sf = ScoreFunction("thr")
        rng = np.random.default_rng(4)
        probs = rng.dirichlet(np.ones(4), size=10)
        labels = rng.integers(0, 4, size=10)
        got = sf.scores_for(probs, labels)
        for i in range(10):
            assert got[i] == pytest.approx(sf.score(probs[i], labels[i]))

    def test_aps_bounds(self):
        sf = ScoreFunction("aps")
        rng = np.random.default_rng(5)
        probs = rng.dirichlet(np.ones(6), size=50)
        matrix = sf.score_matrix(probs)
        assert matrix.min() >= 0.0
        assert matrix.max() <= 1.0 + 1e-6

    def test_randomized_reproducible_and_bounded(self):
        a = ScoreFunction("aps", randomized=True, seed=7)
        b = ScoreFunction("aps", randomized=True, seed=7)
        probs = [0.5, 0.3, 0.2]
        assert a.score(probs, 1) == b.score(probs, 1)
        sf = ScoreFunction("aps", randomized=True, seed=8)
        base = ScoreFunction("aps").score(probs, 1)
        for _ in range(20):
            value = sf.score(probs, 1)
            assert base - 0.3 <= value <= base

    def test_invalid_inputs(self):
        sf = ScoreFunction("aps")
        with pytest.raises(ValueError):
            sf.score([0.5, 0.6], 0)  # not a distribution
        with pytest.raises(ValueError):
            sf.score([0.5, 0.5], 2)  # label out of range
        with pytest.raises(ValueError):
            ScoreFunction("residual")


class TestConformalQuantile:
    def test_ten_scores_example(self):
        scores = np.arange(1, 11) / 10.0
        assert conformal_quantile(scores, 0.1) == pytest.approx(1.0)

    def test_small_sample_saturates(self):
        assert conformal_quantile(np.arange(5), 0.1) == math.inf

    def test_alpha_half_example(self):
        assert conformal_quantile([1.0, 2.0, 3.0], 0.5) == pytest.approx(2.0)

    def test_duplicates_kept(self):
        assert conformal_quantile([1.0, 1.0, 1.0, 5.0], 0.5) == pytest.approx(1.0)

    def test_matches_rank_oracle_on_random_instances(self):
        rng = np.random.default_rng(11)
        for _ in range(1000):
            n = int(rng.integers(1, 200))
            alpha = float(rng.uniform(0.01, 0.5))
            scores = rng.standard_normal(n)
            assert conformal_quantile(scores, alpha) == rank_oracle(scores, alpha)

    def test_validation(self):
        with pytest.raises(ValueError):
            conformal_quantile([], 0.1)
        with pytest.raises(ValueError):
            conformal_quantile([1.0], 0.0)
        with pytest.raises(ValueError):
            conformal_quantile([1.0], 1.0)

    @given(
        st.lists(st.floats(-100, 100), min_size=1, max_size=60),
        st.floats(0.01, 0.6),
        st.floats(0.01, 0.6),
    )
    @settings(max_examples=200, deadline=None)
    def test_monotone_in_confidence(self, scores, a_small, a_big):
        lo, hi = sorted((a_small, a_big))
        assert conformal_quantile(scores, hi) <= conformal_quantile(scores, lo)

    @given(st.lists(st.floats(-100, 100), min_size=2, max_size=60), st.floats(0.05, 0.5))
    @settings(max_examples=200, deadline=None)
    def test_adding_high_score_never_decreases(self, scores, alpha):
        q = conformal_quantile(scores, alpha)
        bigger = scores + [max(scores) + 1.0]
        assert conformal_quantile(bigger, alpha) >= min(q, max(scores) + 1.0)


class TestWeightedQuantile:
    def test_uniform_weights_match_plain_quantile(self):
        rng = np.random.default_rng(12)
        for _ in range(1000):
            n = int(rng.integers(1, 120))
            alpha = float(rng.uniform(0.01, 0.5))
            scores = rng.standard_normal(n)
            assert weighted_quantile(scores, WeightVector.uniform(n), alpha) == (
                conformal_quantile(scores, alpha)
            )

    def test_all_mass_on_one_score(self):
        # dyadic alpha keeps "exactly 1 - alpha" exact in floating point
        alpha = 0.25
        weights = WeightVector(np.array([0.75, 0.05]), 0.2)
        assert weighted_quantile([3.0, 9.0], weights, alpha) == pytest.approx(3.0)

    def test_insufficient_finite_mass_saturates(self):
        weights = WeightVector(np.array([0.5, 0.1]), 0.4)
        assert weighted_quantile([1.0, 2.0], weights, 0.1) == math.inf

    def test_tied_scores_aggregate(self):
        weights = WeightVector(np.array([0.3, 0.3, 0.2]), 0.2)
        assert weighted_quantile([1.0, 1.0, 2.0], weights, 0.45) == pytest.approx(1.0)

    def test_length_mismatch(self):
        with pytest.raises(ValueError, match="weights"):
            weighted_quantile([1.0, 2.0, 3.0], WeightVector.uniform(2), 0.1)

    def test_weight_vector_validation(self):
        with pytest.raises(ValueError, match="non-negative"):
            WeightVector(np.array([-0.1, 0.6]), 0.5)
        with pytest.raises(ValueError, match="sum to 1"):
            WeightVector(np.array([0.5, 0.5]), 0.5)
        uniform = WeightVector.uniform(4)
        assert uniform.calibration.sum() + uniform.test == pytest.approx(1.0)


class TestCalibrate:
    def test_split_result(self):
        scores = np.arange(1, 11) / 10.0
        result = calibrate(scores, 0.1)
        assert result.quantile == conformal_quantile(scores, 0.1)
        assert result.n == 10 and result.alpha == 0.1
        assert result.per_partition is None and result.weights is None

    def test_mondrian_result(self):
        scores = np.array([0.1, 0.2, 5.1, 5.2])
        result = calibrate(scores, 0.5, partitions=np.array([0, 0, 1, 1]))
        assert result.per_partition == mondrian_calibrate(scores, [0, 0, 1, 1], 0.5)

    def test_weighted_result(self):
        scores = np.array([1.0, 2.0, 3.0])
        w = WeightVector.uniform(3)
        result = calibrate(scores, 0.5, weights=w)
        assert result.quantile == weighted_quantile(scores, w, 0.5)
        assert result.weights is w

    def test_exclusive_modes(self):
        with pytest.raises(ValueError, match="not both"):
            calibrate([1.0], 0.5, partitions=[0], weights=WeightVector.uniform(1))


class TestPredictionSets:
    def test_infinite_quantile_gives_full_set(self):
        sf = ScoreFunction("aps")
        probs = np.full(10, 0.1)
        assert predict_set(sf, probs, math.inf).tolist() == list(range(10))

    def test_thr_example_set(self):
        sf = ScoreFunction("thr")
        got = predict_set(sf, [0.5, 0.3, 0.2], 0.7)
        assert got.tolist() == [0, 1]

    def test_quantile_below_min_gives_empty_set(self):
        sf = ScoreFunction("thr")
        assert predict_set(sf, [0.5, 0.3, 0.2], 0.2).size == 0

    @given(
        st.lists(st.floats(0.01, 1.0), min_size=2, max_size=8),
        st.floats(0.0, 1.0),
    )
    @settings(max_examples=200, deadline=None)
    def test_thr_sets_are_probability_thresholds(self, raw, q):
        probs = np.array(raw) / np.sum(raw)
        sf = ScoreFunction("thr")
        got = set(predict_set(sf, probs, q).tolist())
        expected = {i for i, p in enumerate(probs) if p >= 1.0 - q - 1e-15}
        assert got == expected or got == {i for i, p in enumerate(probs) if p >= 1.0 - q}

    @given(
        st.lists(st.floats(0.01, 1.0), min_size=2, max_size=8),
        st.floats(0.0, 1.1),
        st.floats(0.0, 1.1),
    )
    @settings(max_examples=200, deadline=None)
    def test_set_size_monotone_in_quantile(self, raw, q_lo, q_hi):
        lo, hi = sorted((q_lo, q_hi))
        probs = np.array(raw) / np.sum(raw)
        sf = ScoreFunction("aps")
        assert predict_set(sf, probs, lo).size <= predict_set(sf, probs, hi).size

    def test_set_matrix_scalar_and_vector_quantiles(self):
        sf = ScoreFunction("thr")
        probs = np.array([[0.5, 0.3, 0.2], [0.8, 0.1, 0.1]])
        flat = set_matrix(sf, probs, 0.7)
        assert flat.tolist() == [[True, True, False], [True, False, False]]
        per_sample = set_matrix(sf, probs, np.array([0.7, math.inf]))
        assert per_sample.tolist() == [[True, True, False], [True, True, True]]


class TestMondrian:
    def test_disjoint_ranges(self):
        scores = np.array([0.1, 0.2, 0.3, 5.1, 5.2, 5.3])
        partitions = np.array([0, 0, 0, 1, 1, 1])
        qs = mondrian_calibrate(scores, partitions, 0.5)
        assert qs[0] == pytest.approx(0.2) and qs[1] == pytest.approx(5.2)

    def test_single_partition_equals_split(self):
        rng = np.random.default_rng(13)
        scores = rng.random(40)
        qs = mondrian_calibrate(scores, np.zeros(40, dtype=int), 0.2)
        assert qs[0] == conformal_quantile(scores, 0.2)

    def test_small_partition_saturates(self):
        scores = np.array([0.1, 0.2, 0.3, 0.5])
        partitions = np.array([0, 0, 0, 1])
        qs = mondrian_calibrate(scores, partitions, 0.1)
        assert qs[0] == math.inf and qs[1] == math.inf

    def test_unseen_partition_lookup_is_infinite(self):
        qs = {0: 1.5}
        np.testing.assert_array_equal(
            quantiles_for(qs, [0, 3]), np.array([1.5, math.inf])
        )

    def test_per_partition_coverage_monte_carlo(self):
        # within-partition exchangeability implies per-partition coverage at
        # the nominal level, up to 3 binomial sigmas of the pooled test count
        rng = np.random.default_rng(14)
        alpha = 0.1
        trials, n_cal, n_test = 40, 120, 120
        hits = np.zeros(3)
        totals = np.zeros(3)
        for _ in range(trials):
            offsets = np.array([0.0, 4.0, 9.0])
            cal_parts = rng.integers(0, 3, n_cal)
            test_parts = rng.integers(0, 3, n_test)
            cal_scores = rng.standard_normal(n_cal) + offsets[cal_parts]
            test_scores = rng.standard_normal(n_test) + offsets[test_parts]
            qs = mondrian_calibrate(cal_scores, cal_parts, alpha)
            covered = test_scores <= quantiles_for(qs, test_parts)
            for k in range(3):
                mask = test_parts == k
                hits[k] += covered[mask].sum()
                totals[k] += mask.sum()
        for k in range(3):
            sigma = math.sqrt(alpha * (1 - alpha) / totals[k])
            assert hits[k] / totals[k] >= 1 - alpha - 3 * sigma


class TestExchangeableCoverage:
    @pytest.mark.parametrize("alpha", [0.05, 0.1])
    def test_mean_coverage_within_band(self, alpha):
        rng = np.random.default_rng(99)
        trials, n_cal, n_test = 100, 500, 500
        coverages = []
        for _ in range(trials):
            cal = rng.standard_normal(n_cal)
            test = rng.standard_normal(n_test)
            q = conformal_quantile(cal, alpha)
            coverages.append(float(np.mean(test <= q)))
        assert abs(np.mean(coverages) - (1 - alpha)) <= 0.01


class TestEvaluate:
    def test_full_sets(self):
        sets = np.ones((5, 4), dtype=bool)
        m = evaluate(sets, np.array([0, 1, 2, 3, 0]))
        assert m.coverage == 1.0 and m.mean_set_size == 4.0

    def test_empty_sets_count_as_misses(self):
        sets = np.zeros((3, 4), dtype=bool)
        m = evaluate(sets, np.array([0, 1, 2]))
        assert m.coverage == 0.0 and m.mean_set_size == 0.0

    def test_hand_built_three_quarters(self):
        sets = np.array(
            [
                [True, False, False],
                [False, True, False],
                [True, True, False],
                [False, False, False],
            ]
        )
        m = evaluate(sets, np.array([0, 1, 1, 2]))
        assert m.coverage == pytest.approx(0.75)

    def test_accuracy_and_partitions(self):
        sets = np.array([[True, False], [True, True], [False, True], [True, False]])
        m = evaluate(
            sets,
            np.array([0, 0, 1, 1]),
            partitions=np.array([0, 0, 1, 1]),
            point_predictions=np.array([0, 1, 1, 1]),
        )
        assert m.accuracy == pytest.approx(0.75)
        assert m.per_partition_coverage == {0: 1.0, 1: 0.5}

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            evaluate(np.ones((2, 3), dtype=bool), np.array([0, 1, 2]))


class TestKernelWeights:
    def test_identical_points_uniform(self):
        x = np.ones((5, 3))
        w = kernel_weights(x, np.ones(3), bandwidth=2.0)
        np.testing.assert_allclose(w.calibration, w.test, atol=1e-12)

    def test_tiny_bandwidth_near_uniform(self):
        rng = np.random.default_rng(15)
        x = rng.random((6, 4))
        w = kernel_weights(x, rng.random(4), bandwidth=1e-9)
        np.testing.assert_allclose(w.calibration, w.calibration[0], rtol=1e-6)

    def test_distance_decay(self):
        x = np.array([[0.0, 0.0], [100.0, 100.0]])
        w = kernel_weights(x, np.zeros(2), bandwidth=1.0)
        assert w.calibration[0] > 1000 * w.calibration[1]
        assert w.calibration[0] == pytest.approx(w.test)

    def test_bad_bandwidth(self):
        with pytest.raises(ValueError):
            kernel_weights(np.ones((2, 2)), np.ones(2), bandwidth=0.0)


class TestPartitioner:
    def test_by_label_and_field(self, held_dataset):
        assert np.array_equal(
            Partitioner("by-label").assign(held_dataset), held_dataset.labels()
        )
        assert np.array_equal(
            Partitioner("by-partition-field").assign(held_dataset),
            held_dataset.partitions(),
        )

    def test_by_group_argmax(self, cn4, held_dataset):
        ids = Partitioner("by-group-argmax", canonicalizer=cn4).assign(held_dataset)
        assert ids.shape == (len(held_dataset),)
        assert ids.min() >= 0 and ids.max() < 4

    def test_by_entropy_bins(self, classifier, held_dataset):
        p = Partitioner(
            "by-entropy-bins", classifier=classifier, entropy_edges=(0.05, 0.2, 0.8)
        )
        ids = p.assign(held_dataset)
        assert ids.min() >= 0 and ids.max() <= 3

    def test_validation(self):
        with pytest.raises(ValueError):
            Partitioner("by-group-argmax")
        with pytest.raises(ValueError):
            Partitioner("by-entropy-bins")
        with pytest.raises(ValueError):
            Partitioner("by-color")
