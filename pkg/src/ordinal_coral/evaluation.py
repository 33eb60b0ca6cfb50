"""Cross-validated evaluation of the PCA, pretraining and retraining models.

Every fitted quantity (imputation donors, scaler, PCA, autoencoder,
regressor) is estimated on the training part of a fold only; the held-out
part is imputed from training donors, scaled with the training range and
then scored.
"""

from __future__ import annotations

import hashlib
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .dataio import N_LEVELS, apply_minmax, filter_subjects, fit_minmax, knn_impute
from .errors import FoldError, InvalidConfigError, OrdinalCoralError, ShapeError
from .models import (
    CoralRegressor,
    DenoisingAutoencoder,
    PcaCoralModel,
    parameter_hash,
    pca_fit,
    pca_project,
    predict_rank,
)
from .training import TrainConfig, build_composite, train_composite, train_dae, train_regressor

log = logging.getLogger(__name__)

MODEL_KINDS = ("pca", "pretraining", "retraining")
HIGH_RISK_THRESHOLD = 3
THREADS_ENV = "ORDINAL_CORAL_THREADS"


def multilevel_metric_names(n_levels=N_LEVELS):
    return [f"level_{k}_accuracy" for k in range(n_levels)] + ["correct_rate", "balanced_accuracy"]


BINARY_METRICS = ["binary_correct_rate", "sensitivity", "specificity", "precision", "f1",
                  "binary_balanced_accuracy"]


def metric_names(n_levels=N_LEVELS):
    return multilevel_metric_names(n_levels) + BINARY_METRICS


# --------------------------------------------------------------------------
# folds
# --------------------------------------------------------------------------


def stratified_kfold(grades, k=10, seed=0):
    """Assign each subject a fold in ``0..k-1``, balancing every grade.

    Members of each grade are shuffled and dealt round-robin; the dealing
    position carries over from one grade to the next so fold sizes stay
    within one of each other overall.
    """
    grades = np.asarray(grades)
    n = grades.size
    if k < 2:
        raise InvalidConfigError("k must be >= 2")
    if n == 0:
        raise InvalidConfigError("cohort is empty")
    if k > n:
        raise InvalidConfigError(f"k={k} exceeds cohort size {n}")
    rng = np.random.default_rng(seed)
    folds = np.empty(n, dtype=np.int64)
    start = 0
    for g in np.unique(grades):
        members = rng.permutation(np.flatnonzero(grades == g))
        folds[members] = (start + np.arange(members.size)) % k
        start = (start + members.size) % k
    return folds


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------


def _ratio(num, den):
    return float(num) / float(den) if den > 0 else float("nan")


def confusion_matrix(true_grades, predicted_grades, n_levels=N_LEVELS):
    t = np.asarray(true_grades, dtype=np.int64)
    p = np.asarray(predicted_grades, dtype=np.int64)
    if t.shape != p.shape:
        raise ShapeError("true and predicted grades differ in length")
    cm = np.zeros((n_levels, n_levels), dtype=np.int64)
    np.add.at(cm, (t, p), 1)
    return cm


@dataclass
class MultilevelMetrics:
    confusion: np.ndarray
    per_level: np.ndarray
    correct_rate: float
    balanced_accuracy: float


def multilevel_from_confusion(cm):
    cm = np.asarray(cm)
    support = cm.sum(axis=1)
    per_level = np.array([_ratio(cm[k, k], support[k]) for k in range(cm.shape[0])])
    present = support > 0
    balanced = float(np.mean(per_level[present])) if present.any() else float("nan")
    return MultilevelMetrics(cm, per_level, _ratio(np.trace(cm), cm.sum()), balanced)


def evaluate_multilevel(true_grades, predicted_grades, n_levels=N_LEVELS):
    """Confusion matrix, per-level accuracy, correct rate and balanced accuracy.

    Levels without support are NaN in ``per_level`` and left out of the
    balanced accuracy.
    """
    return multilevel_from_confusion(confusion_matrix(true_grades, predicted_grades, n_levels))


def binary_from_counts(tp, fn, tn, fp):
    sens = _ratio(tp, tp + fn)
    spec = _ratio(tn, tn + fp)
    return {
        "binary_correct_rate": _ratio(tp + tn, tp + tn + fp + fn),
        "sensitivity": sens,
        "specificity": spec,
        "precision": _ratio(tp, tp + fp),
        "f1": _ratio(2 * tp, 2 * tp + fp + fn),
        "binary_balanced_accuracy": (sens + spec) / 2,
    }


def collapse_confusion(cm, threshold=HIGH_RISK_THRESHOLD):
    """2x2 counts ``(tp, fn, tn, fp)`` for the grade >= threshold task."""
    cm = np.asarray(cm)
    pos = np.arange(cm.shape[0]) >= threshold
    tp = cm[np.ix_(pos, pos)].sum()
    fn = cm[np.ix_(pos, ~pos)].sum()
    tn = cm[np.ix_(~pos, ~pos)].sum()
    fp = cm[np.ix_(~pos, pos)].sum()
    return int(tp), int(fn), int(tn), int(fp)


def evaluate_binary_highrisk(true_grades, predicted_grades, threshold=HIGH_RISK_THRESHOLD):
    """Sensitivity, specificity, precision, F1 and friends for grade >= threshold.

    Empty denominators give NaN (recorded as missing, not zero).
    """
    t = np.asarray(true_grades) >= threshold
    p = np.asarray(predicted_grades) >= threshold
    if t.shape != p.shape:
        raise ShapeError("true and predicted grades differ in length")
    tp = int(np.sum(t & p))
    fn = int(np.sum(t & ~p))
    tn = int(np.sum(~t & ~p))
    fp = int(np.sum(~t & p))
    return binary_from_counts(tp, fn, tn, fp)


def fold_metrics(true_grades, predicted_grades, n_levels=N_LEVELS, threshold=HIGH_RISK_THRESHOLD):
    ml = evaluate_multilevel(true_grades, predicted_grades, n_levels)
    out = {f"level_{k}_accuracy": float(v) for k, v in enumerate(ml.per_level)}
    out["correct_rate"] = ml.correct_rate
    out["balanced_accuracy"] = ml.balanced_accuracy
    out.update(evaluate_binary_highrisk(true_grades, predicted_grades, threshold))
    return out


def aggregate(per_fold, names):
    """Mean and population STD per metric, skipping missing fold values."""
    mean, std = {}, {}
    for name in names:
        vals = np.array([f[name] for f in per_fold], dtype=np.float64)
        vals = vals[np.isfinite(vals)]
        mean[name] = float(vals.mean()) if vals.size else float("nan")
        std[name] = float(vals.std()) if vals.size else float("nan")
    return mean, std


# --------------------------------------------------------------------------
# importance
# --------------------------------------------------------------------------


@dataclass
class ImportanceReport:
    feature_names: list
    baseline_balanced_accuracy: float
    baseline_sensitivity: float
    delta_balanced_accuracy: np.ndarray
    delta_sensitivity: np.ndarray


def permutation_importance(model, features, grades, feature_names=None, n_levels=N_LEVELS,
                           threshold=HIGH_RISK_THRESHOLD, method="zero", rng=None):
    """Drop in balanced accuracy and high-risk sensitivity per ablated feature.

    ``method='zero'`` sets the column to 0 (the training minimum after
    scaling); ``method='shuffle'`` permutes it instead. The model is not
    refitted.
    """
    if method not in ("zero", "shuffle"):
        raise InvalidConfigError("method must be 'zero' or 'shuffle'")
    x = np.asarray(features, dtype=np.float64)
    grades = np.asarray(grades)
    rng = np.random.default_rng(rng)

    def score(mat):
        pred = predict_rank(model.predict_logits(mat))
        return (evaluate_multilevel(grades, pred, n_levels).balanced_accuracy,
                evaluate_binary_highrisk(grades, pred, threshold)["sensitivity"])

    base_ba, base_sens = score(x)
    d = x.shape[1]
    dba, dsens = np.empty(d), np.empty(d)
    for j in range(d):
        ablated = x.copy()
        if method == "zero":
            ablated[:, j] = 0.0
        else:
            ablated[:, j] = rng.permutation(ablated[:, j])
        ba, sens = score(ablated)
        dba[j] = base_ba - ba
        dsens[j] = base_sens - sens
    names = list(feature_names) if feature_names is not None else [str(j) for j in range(d)]
    return ImportanceReport(names, base_ba, base_sens, dba, dsens)


# --------------------------------------------------------------------------
# experiment
# --------------------------------------------------------------------------


@dataclass
class ExperimentConfig:
    n_folds: int = 10
    n_levels: int = N_LEVELS
    max_missing: int = 5
    k_neighbors: int = 2
    pca_components: int = 3
    latent_dim: int = 3
    dae_hidden: int = 64
    regressor_hidden: tuple = (32, 16)
    importance: bool = True
    importance_method: str = "zero"
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.n_folds < 2:
            raise InvalidConfigError("n_folds must be >= 2")
        if self.importance_method not in ("zero", "shuffle"):
            raise InvalidConfigError("importance_method must be 'zero' or 'shuffle'")
        self.regressor_hidden = tuple(self.regressor_hidden)


@dataclass
class FoldResult:
    fold_index: int
    test_rows: np.ndarray
    predictions: np.ndarray
    projections: np.ndarray
    metrics: dict
    confusion: np.ndarray
    hashes: dict
    reports: dict
    importance: ImportanceReport = None
    model: object = None
    scaler: object = None


@dataclass
class ExperimentResult:
    model_kind: str
    subject_ids: list
    feature_names: list
    grades: np.ndarray
    folds: np.ndarray
    fold_results: list
    mean: dict
    std: dict
    confusion: np.ndarray
    predictions: np.ndarray
    projections: np.ndarray
    n_levels: int = N_LEVELS

    @property
    def per_fold(self):
        return [fr.metrics for fr in self.fold_results]

    def importance_table(self):
        """Per-feature fold means plus the per-fold matrices."""
        reps = [fr.importance for fr in self.fold_results if fr.importance is not None]
        if not reps:
            return None
        dba = np.vstack([r.delta_balanced_accuracy for r in reps])
        dsens = np.vstack([r.delta_sensitivity for r in reps])
        with np.errstate(invalid="ignore"):
            sens_mean = np.array([np.nanmean(c) if np.isfinite(c).any() else np.nan
                                  for c in dsens.T])
        return {
            "feature": list(self.feature_names),
            "delta_balanced_acc_mean": dba.mean(axis=0),
            "delta_sensitivity_mean": sens_mean,
            "delta_balanced_acc_folds": dba,
            "delta_sensitivity_folds": dsens,
        }


def fold_seed(seed, fold_index, stream=0):
    return int(np.random.SeedSequence([seed, fold_index, stream]).generate_state(1)[0])


def preprocess_fold(features, mask, train_rows, test_rows, k_neighbors=2,
                    subject_ids=None, feature_names=None):
    """Impute (training donors only) and min-max scale one fold."""
    x_tr_raw, m_tr = features[train_rows], mask[train_rows]
    ids_tr = None if subject_ids is None else [subject_ids[i] for i in train_rows]
    ids_te = None if subject_ids is None else [subject_ids[i] for i in test_rows]
    x_tr = knn_impute(x_tr_raw, m_tr, k_neighbors, subject_ids=ids_tr, feature_names=feature_names)
    x_te = knn_impute(features[test_rows], mask[test_rows], k_neighbors,
                      reference=x_tr_raw, reference_mask=m_tr,
                      subject_ids=ids_te, feature_names=feature_names)
    scaler = fit_minmax(x_tr)
    return apply_minmax(scaler, x_tr), apply_minmax(scaler, x_te), scaler, x_tr


def _digest(arr):
    return hashlib.sha256(np.ascontiguousarray(arr, dtype=np.float64).tobytes()).hexdigest()


def fit_model(model_kind, x_train, g_train, config, seed):
    """Fit one of the three compared models on a training matrix.

    Returns ``(predictor, train_reports, component_hashes)``.
    """
    tc = config.train
    n_features = x_train.shape[1]
    init = np.random.default_rng(seed).spawn(2)
    reports, hashes = {}, {}
    if model_kind == "pca":
        pca = pca_fit(x_train, config.pca_components)
        reg = CoralRegressor(pca.n_components, config.regressor_hidden, config.n_levels, rng=init[1])
        reg, reports["regressor"] = train_regressor(reg, pca_project(pca, x_train), g_train, tc)
        model = PcaCoralModel(pca, reg)
        hashes["pca"] = parameter_hash(pca)
    elif model_kind in ("pretraining", "retraining"):
        dae = DenoisingAutoencoder(n_features, config.dae_hidden, config.latent_dim,
                                   tc.noise_level, rng=init[0])
        dae, reports["dae"] = train_dae(dae, x_train, tc, grades=g_train)
        hashes["dae"] = parameter_hash(dae)
        model = build_composite(dae, config.n_levels, config.regressor_hidden, rng=init[1])
        regime = "pretrain_frozen" if model_kind == "pretraining" else "retrain_joint"
        model, reports["composite"] = train_composite(model, x_train, g_train, tc, regime)
    else:
        raise InvalidConfigError(f"model_kind must be one of {MODEL_KINDS}")
    hashes["model"] = parameter_hash(model)
    return model, reports, hashes


def _run_fold(fold_index, cohort, folds, model_kind, config, seed):
    train_rows = np.flatnonzero(folds != fold_index)
    test_rows = np.flatnonzero(folds == fold_index)
    x_tr, x_te, scaler, imputed = preprocess_fold(
        cohort.features, cohort.mask, train_rows, test_rows, config.k_neighbors,
        cohort.subject_ids, cohort.feature_names)
    g_tr, g_te = cohort.grades[train_rows], cohort.grades[test_rows]

    tc = config.train
    fold_tc = TrainConfig(**{**tc.__dict__, "seed": fold_seed(seed, fold_index, 1)})
    fold_cfg = ExperimentConfig(**{**config.__dict__, "train": fold_tc})
    model, reports, hashes = fit_model(model_kind, x_tr, g_tr, fold_cfg, fold_seed(seed, fold_index, 2))
    hashes["scaler"] = parameter_hash(scaler)
    hashes["imputed_train"] = _digest(imputed)

    pred = predict_rank(model.predict_logits(x_te))
    metrics = fold_metrics(g_te, pred, config.n_levels)
    importance = None
    if config.importance:
        importance = permutation_importance(
            model, x_te, g_te, cohort.feature_names, config.n_levels,
            method=config.importance_method, rng=fold_seed(seed, fold_index, 3))
    return FoldResult(
        fold_index, test_rows, pred, model.project(x_te), metrics,
        confusion_matrix(g_te, pred, config.n_levels), hashes, reports, importance,
        model, scaler)


def n_threads(default=1):
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return default
    try:
        return max(1, int(raw))
    except ValueError:
        raise InvalidConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None


def run_experiment(cohort, model_kind, config=None, seed=0, threads=None):
    """Stratified k-fold evaluation of one model kind on a graded cohort.

    ``cohort`` is a :class:`~ordinal_coral.dataio.RawCohort` with grades;
    subjects over the missing-test budget are dropped first, imputation and
    scaling happen inside each fold.
    """
    if model_kind not in MODEL_KINDS:
        raise InvalidConfigError(f"model_kind must be one of {MODEL_KINDS}")
    config = config or ExperimentConfig()
    if cohort.grades is None:
        raise InvalidConfigError("cohort has no risk grades")
    cohort = filter_subjects(cohort, config.max_missing)
    folds = stratified_kfold(cohort.grades, config.n_folds, seed)
    threads = threads or n_threads()

    def work(f):
        try:
            return _run_fold(f, cohort, folds, model_kind, config, seed)
        except OrdinalCoralError as exc:
            if isinstance(exc, FoldError):
                raise
            raise FoldError(f, exc) from exc
        except FloatingPointError as exc:
            raise FoldError(f, exc) from exc

    if threads > 1:
        with ThreadPoolExecutor(max_workers=min(threads, config.n_folds)) as pool:
            results = list(pool.map(work, range(config.n_folds)))
    else:
        results = [work(f) for f in range(config.n_folds)]
    results.sort(key=lambda r: r.fold_index)

    n = cohort.n_subjects
    predictions = np.full(n, -1, dtype=np.int64)
    projections = np.full((n, results[0].projections.shape[1]), np.nan)
    confusion = np.zeros((config.n_levels, config.n_levels), dtype=np.int64)
    for r in results:
        predictions[r.test_rows] = r.predictions
        projections[r.test_rows] = r.projections
        confusion += r.confusion
    mean, std = aggregate([r.metrics for r in results], metric_names(config.n_levels))
    return ExperimentResult(model_kind, list(cohort.subject_ids), list(cohort.feature_names),
                            cohort.grades.copy(), folds, results, mean, std, confusion,
                            predictions, projections, config.n_levels)


def metrics_document(result):
    """JSON-ready metrics: per-fold arrays, means and STDs (NaN -> None)."""
    names = metric_names(result.n_levels)

    def clean(v):
        return None if v is None or not np.isfinite(v) else float(v)

    return {
        "model_kind": result.model_kind,
        "n_folds": len(result.fold_results),
        "n_subjects": len(result.subject_ids),
        "metrics": names,
        "per_fold": {n: [clean(m[n]) for m in result.per_fold] for n in names},
        "mean": {n: clean(result.mean[n]) for n in names},
        "std": {n: clean(result.std[n]) for n in names},
    }
