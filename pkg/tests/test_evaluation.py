import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metric_cases import CASES
from ordinal_coral.errors import InvalidConfigError, ShapeError
from ordinal_coral.evaluation import (
    ExperimentConfig,
    aggregate,
    binary_from_counts,
    collapse_confusion,
    confusion_matrix,
    evaluate_binary_highrisk,
    evaluate_multilevel,
    metric_names,
    metrics_document,
    permutation_importance,
    run_experiment,
    stratified_kfold,
)
from ordinal_coral.synth import SynthConfig, generate_cohort
from ordinal_coral.training import TrainConfig


def same(a, b, tol=1e-12):
    if math.isnan(b):
        return math.isnan(a)
    return abs(a - b) <= tol


class TestKfold:
    def test_uniform_single_class(self):
        folds = stratified_kfold(np.zeros(100, dtype=int), 10, 0)
        np.testing.assert_array_equal(np.bincount(folds), [10] * 10)

    def test_five_member_class(self):
        grades = np.array([0] * 5 + [1] * 95)
        folds = stratified_kfold(grades, 10, 3)
        per_fold = np.bincount(folds[grades == 0], minlength=10)
        assert (per_fold == 1).sum() == 5 and (per_fold == 0).sum() == 5

    def test_partition_and_balance(self):
        grades = np.repeat(np.arange(5), [5, 331, 270, 50, 10])
        folds = stratified_kfold(grades, 10, 1)
        assert folds.min() == 0 and folds.max() == 9 and folds.size == grades.size
        for g in range(5):
            counts = np.bincount(folds[grades == g], minlength=10)
            assert counts.max() - counts.min() <= 1
        sizes = np.bincount(folds)
        assert sizes.max() - sizes.min() <= 1

    def test_deterministic(self):
        g = np.random.default_rng(0).integers(0, 5, 80)
        np.testing.assert_array_equal(stratified_kfold(g, 10, 4), stratified_kfold(g, 10, 4))
        assert not np.array_equal(stratified_kfold(g, 10, 4), stratified_kfold(g, 10, 5))

    def test_invalid(self):
        with pytest.raises(InvalidConfigError):
            stratified_kfold([0, 1, 2], 10, 0)
        with pytest.raises(InvalidConfigError):
            stratified_kfold([0, 1, 2], 1, 0)


class TestMetrics:
    @pytest.mark.parametrize("case", CASES, ids=[c["name"] for c in CASES])
    def test_hand_computed(self, case):
        ml = evaluate_multilevel(case["true"], case["pred"], case["K"])
        for got, want in zip(ml.per_level, case["per_level"]):
            assert same(got, want)
        assert same(ml.correct_rate, case["correct"])
        assert same(ml.balanced_accuracy, case["balanced"])
        assert ml.confusion.sum() == len(case["true"])
        b = evaluate_binary_highrisk(case["true"], case["pred"], case["threshold"])
        for k, want in case["binary"].items():
            assert same(b[k], want), k

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            evaluate_multilevel([0, 1], [0])
        with pytest.raises(ShapeError):
            evaluate_binary_highrisk([0, 1], [0])

    @given(st.lists(st.integers(0, 4), min_size=1, max_size=40), st.integers(0, 4))
    def test_constant_predictor_balanced(self, true, c):
        present = len(set(true))
        ba = evaluate_multilevel(true, [c] * len(true)).balanced_accuracy
        assert ba == pytest.approx((1.0 if c in true else 0.0) / present)

    @given(st.lists(st.tuples(st.integers(0, 4), st.integers(0, 4)), min_size=1, max_size=60))
    def test_binary_agrees_with_collapsed_confusion(self, pairs):
        t, p = zip(*pairs)
        direct = evaluate_binary_highrisk(t, p)
        collapsed = binary_from_counts(*collapse_confusion(confusion_matrix(t, p)))
        for k in direct:
            assert same(direct[k], collapsed[k])

    def test_aggregate_skips_missing(self):
        mean, std = aggregate([{"a": 1.0}, {"a": float("nan")}, {"a": 0.0}], ["a"])
        assert mean["a"] == 0.5 and std["a"] == 0.5


class _FirstFeatureModel:
    """Ranks driven entirely by column 0."""

    def predict_logits(self, x):
        return 20.0 * (4.0 * x[:, :1] - np.array([[0.5, 1.5, 2.5, 3.5]]))


class TestImportance:
    def data(self):
        rng = np.random.default_rng(0)
        grades = rng.integers(0, 5, 200)
        x = rng.random((200, 4))
        x[:, 0] = (grades + 0.5) / 5
        x[:, 3] = 0.0
        return x, grades

    def test_shape_and_zero_column(self):
        x, g = self.data()
        rep = permutation_importance(_FirstFeatureModel(), x, g)
        assert rep.delta_balanced_accuracy.shape == (4,)
        assert len(rep.feature_names) == 4
        assert rep.delta_balanced_accuracy[3] == 0 and rep.delta_sensitivity[3] == 0
        assert rep.baseline_balanced_accuracy == 1.0

    def test_informative_beats_noise(self):
        x, g = self.data()
        rep = permutation_importance(_FirstFeatureModel(), x, g)
        assert rep.delta_balanced_accuracy[0] > rep.delta_balanced_accuracy[1:].max()

    def test_shuffle_variant(self):
        x, g = self.data()
        rep = permutation_importance(_FirstFeatureModel(), x, g, method="shuffle", rng=1)
        assert rep.delta_balanced_accuracy[0] > 0.5
        np.testing.assert_array_equal(rep.delta_balanced_accuracy[1:], 0)


TINY = ExperimentConfig(n_folds=3, train=TrainConfig(max_epochs=15, patience=5, batch_size=16))


@pytest.fixture(scope="module")
def small_cohort():
    cohort, _ = generate_cohort(SynthConfig(n_subjects=120, prevalence=(3, 50, 40, 17, 10),
                                            missing_rate=0.03, seed=2))
    return cohort


class TestRunExperiment:
    @pytest.mark.parametrize("kind", ["pca", "pretraining", "retraining"])
    def test_structure(self, small_cohort, kind):
        res = run_experiment(small_cohort, kind, TINY, seed=1)
        assert len(res.fold_results) == 3
        assert res.projections.shape == (120, 3) and np.all(np.isfinite(res.projections))
        total = sum(fr.confusion for fr in res.fold_results)
        np.testing.assert_array_equal(total, res.confusion)
        assert res.confusion.sum() == 120
        doc = metrics_document(res)
        assert all(len(v) == 3 for v in doc["per_fold"].values())
        assert set(doc["mean"]) == set(metric_names())
        table = res.importance_table()
        assert len(table["feature"]) == 33
        if kind == "pca":
            assert "dae" not in res.fold_results[0].hashes

    def test_deterministic(self, small_cohort):
        a = metrics_document(run_experiment(small_cohort, "retraining", TINY, seed=4))
        b = metrics_document(run_experiment(small_cohort, "retraining", TINY, seed=4))
        assert a == b

    def test_threads_do_not_change_results(self, small_cohort):
        a = run_experiment(small_cohort, "pca", TINY, seed=4, threads=1)
        b = run_experiment(small_cohort, "pca", TINY, seed=4, threads=3)
        assert metrics_document(a) == metrics_document(b)

    def test_bad_kind(self, small_cohort):
        with pytest.raises(InvalidConfigError):
            run_experiment(small_cohort, "svm", TINY)
