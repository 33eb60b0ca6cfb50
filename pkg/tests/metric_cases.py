"""Hand-counted confusion tables with their expected metric values.

Each case lists true and predicted grades, the level count K, the binary
threshold, and the values worked out by hand from the 2x2 / KxK tables.
``nan`` marks an undefined (empty-denominator) metric.
"""

nan = float("nan")

CASES = [
    dict(name="two_level_example", true=[0, 0, 1, 1], pred=[0, 1, 1, 1], K=2, threshold=1,
         per_level=[0.5, 1.0], correct=0.75, balanced=0.75,
         binary=dict(sensitivity=1.0, specificity=0.5, precision=2 / 3, f1=0.8,
                     binary_correct_rate=0.75, binary_balanced_accuracy=0.75)),
    dict(name="constant_predictor_90_10", true=[0] * 90 + [1] * 10, pred=[0] * 100, K=2, threshold=1,
         per_level=[1.0, 0.0], correct=0.9, balanced=0.5,
         binary=dict(sensitivity=0.0, specificity=1.0, precision=nan, f1=0.0,
                     binary_correct_rate=0.9, binary_balanced_accuracy=0.5)),
    dict(name="perfect", true=[0, 1, 2, 3, 4], pred=[0, 1, 2, 3, 4], K=5, threshold=3,
         per_level=[1.0] * 5, correct=1.0, balanced=1.0,
         binary=dict(sensitivity=1.0, specificity=1.0, precision=1.0, f1=1.0,
                     binary_correct_rate=1.0, binary_balanced_accuracy=1.0)),
    # TP=2, FN=2, TN=9, FP=1
    dict(name="tp2_fn2_tn9_fp1", true=[3, 3, 4, 4] + [1] * 10, pred=[3, 4, 1, 2] + [1] * 9 + [3],
         K=5, threshold=3,
         per_level=[nan, 0.9, nan, 0.5, 0.0], correct=10 / 14, balanced=1.4 / 3,
         binary=dict(sensitivity=0.5, specificity=0.9, precision=2 / 3, f1=4 / 7,
                     binary_correct_rate=11 / 14, binary_balanced_accuracy=0.7)),
    dict(name="no_predicted_positives", true=[3, 1, 1], pred=[1, 1, 1], K=5, threshold=3,
         per_level=[nan, 1.0, nan, 0.0, nan], correct=2 / 3, balanced=0.5,
         binary=dict(sensitivity=0.0, specificity=1.0, precision=nan, f1=0.0,
                     binary_correct_rate=2 / 3, binary_balanced_accuracy=0.5)),
    dict(name="no_true_positives", true=[0, 1, 2], pred=[0, 3, 2], K=5, threshold=3,
         per_level=[1.0, 0.0, 1.0, nan, nan], correct=2 / 3, balanced=2 / 3,
         binary=dict(sensitivity=nan, specificity=2 / 3, precision=0.0, f1=0.0,
                     binary_correct_rate=2 / 3, binary_balanced_accuracy=nan)),
    dict(name="constant_on_three_levels", true=[0, 0, 1, 2, 2, 2], pred=[2] * 6, K=3, threshold=2,
         per_level=[0.0, 0.0, 1.0], correct=0.5, balanced=1 / 3,
         binary=dict(sensitivity=1.0, specificity=0.0, precision=0.5, f1=2 / 3,
                     binary_correct_rate=0.5, binary_balanced_accuracy=0.5)),
    dict(name="off_by_one", true=[0, 1, 2, 3, 4], pred=[1, 2, 3, 4, 3], K=5, threshold=3,
         per_level=[0.0] * 5, correct=0.0, balanced=0.0,
         binary=dict(sensitivity=1.0, specificity=2 / 3, precision=2 / 3, f1=0.8,
                     binary_correct_rate=0.8, binary_balanced_accuracy=5 / 6)),
    dict(name="three_level_mixed", true=[0, 0, 0, 1, 1, 2], pred=[0, 1, 2, 1, 1, 0], K=3, threshold=2,
         per_level=[1 / 3, 1.0, 0.0], correct=0.5, balanced=4 / 9,
         binary=dict(sensitivity=0.0, specificity=0.8, precision=0.0, f1=0.0,
                     binary_correct_rate=4 / 6, binary_balanced_accuracy=0.4)),
    dict(name="imbalanced_five_level",
         true=[0] + [1] * 6 + [2] * 4 + [3] * 2 + [4],
         pred=[1] + [1, 1, 1, 1, 2, 2] + [2, 2, 1, 3] + [3, 2] + [3], K=5, threshold=3,
         per_level=[0.0, 4 / 6, 0.5, 0.5, 0.0], correct=0.5, balanced=1 / 3,
         binary=dict(sensitivity=2 / 3, specificity=10 / 11, precision=2 / 3, f1=2 / 3,
                     binary_correct_rate=12 / 14, binary_balanced_accuracy=(2 / 3 + 10 / 11) / 2)),
    dict(name="all_wrong_extremes", true=[4, 4, 0, 0], pred=[0, 0, 4, 4], K=5, threshold=3,
         per_level=[0.0, nan, nan, nan, 0.0], correct=0.0, balanced=0.0,
         binary=dict(sensitivity=0.0, specificity=0.0, precision=0.0, f1=0.0,
                     binary_correct_rate=0.0, binary_balanced_accuracy=0.0)),
]
