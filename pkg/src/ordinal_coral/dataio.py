"""Cohort ingestion and preprocessing.

Covers CSV I/O, the missing-test filter, KNN imputation, train-only min-max
scaling, percentile abnormality grades, risk-grade intervals and the K-1 bit
label extension used by the ordinal head.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    EmptyCohortError,
    ImputationError,
    InconsistentLabelError,
    InvalidInputError,
    InvalidLabelError,
    ParseError,
    ShapeError,
)

log = logging.getLogger(__name__)

N_LEVELS = 5
MISSING_MARKERS = ("", "NA")
ABNORMALITY_THRESHOLDS = (30.0, 20.0, 10.0)
RISK_BOUNDARIES = (0.0, 0.5, 1.5, 2.5)
CATEGORIES = ("phonological_route", "visual_route", "text_fluidity", "text_comprehension")


@dataclass
class RawCohort:
    """Subjects x tests with a missingness mask (True = missing).

    Missing cells in ``features`` hold NaN. ``grades`` is optional.
    """

    subject_ids: list
    feature_names: list
    features: np.ndarray
    mask: np.ndarray = None
    grades: np.ndarray = None
    assessment_scores: dict = None

    def __post_init__(self):
        self.subject_ids = [str(s) for s in self.subject_ids]
        self.feature_names = [str(f) for f in self.feature_names]
        self.features = np.array(self.features, dtype=np.float64).reshape(len(self.subject_ids), -1)
        if self.mask is None:
            self.mask = np.isnan(self.features)
        self.mask = np.array(self.mask, dtype=bool)
        if self.mask.shape != self.features.shape:
            raise ShapeError("mask shape must equal features shape")
        if self.features.shape[1] != len(self.feature_names):
            raise ShapeError("feature_names length must match feature columns")
        if len(set(self.subject_ids)) != len(self.subject_ids):
            raise InvalidInputError("subject ids must be unique")
        if len(set(self.feature_names)) != len(self.feature_names):
            raise InvalidInputError("feature names must be unique")
        self.features[self.mask] = np.nan
        if self.grades is not None:
            self.grades = np.array(self.grades, dtype=np.int64).reshape(-1)
            if self.grades.shape[0] != len(self.subject_ids):
                raise ShapeError("one grade per subject required")

    @property
    def n_subjects(self):
        return len(self.subject_ids)

    @property
    def n_features(self):
        return len(self.feature_names)

    def missing_counts(self):
        return self.mask.sum(axis=1)

    def take(self, rows):
        rows = np.asarray(rows, dtype=np.int64)
        return RawCohort(
            [self.subject_ids[i] for i in rows],
            list(self.feature_names),
            self.features[rows].copy(),
            self.mask[rows].copy(),
            None if self.grades is None else self.grades[rows].copy(),
        )


@dataclass
class CleanCohort:
    subject_ids: list
    feature_names: list
    features: np.ndarray
    grades: np.ndarray


@dataclass
class ScalerParams:
    minimum: np.ndarray
    maximum: np.ndarray
    constant_features: list = field(default_factory=list)

    def to_dict(self):
        return {
            "minimum": self.minimum.tolist(),
            "maximum": self.maximum.tolist(),
            "constant_features": list(self.constant_features),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["minimum"], dtype=np.float64),
                   np.array(d["maximum"], dtype=np.float64),
                   list(d.get("constant_features", [])))


# --------------------------------------------------------------------------
# filtering and imputation
# --------------------------------------------------------------------------


def filter_subjects(cohort, max_missing=5):
    """Keep subjects with at most ``max_missing`` missing tests, in order."""
    keep = np.flatnonzero(cohort.missing_counts() <= max_missing)
    if keep.size == 0:
        raise EmptyCohortError(f"no subject has <= {max_missing} missing values")
    return cohort.take(keep)


def knn_impute(features, mask=None, k=2, reference=None, reference_mask=None,
               subject_ids=None, feature_names=None):
    """Fill missing cells with the mean of the ``k`` nearest donors.

    Distance between two subjects is the root mean squared difference over
    the features both observe. A donor must observe the target feature and
    share at least one observed feature with the recipient; ties go to the
    lower donor index. Donors are drawn from ``reference`` (default: the
    matrix itself, excluding the recipient row).

    If fewer than ``k`` eligible donors exist the available ones are used;
    zero eligible donors raises :class:`ImputationError`.
    """
    x = np.array(features, dtype=np.float64)
    if mask is None:
        mask = np.isnan(x)
    mask = np.asarray(mask, dtype=bool)
    self_reference = reference is None
    if self_reference:
        ref, ref_mask = x, mask
    else:
        ref = np.asarray(reference, dtype=np.float64)
        ref_mask = np.isnan(ref) if reference_mask is None else np.asarray(reference_mask, dtype=bool)
    if ref.shape[1] != x.shape[1]:
        raise ShapeError("reference must have the same feature columns")

    obs = (~mask).astype(np.float64)
    ref_obs = (~ref_mask).astype(np.float64)
    xz = np.where(mask, 0.0, x)
    rz = np.where(ref_mask, 0.0, ref)
    out = x.copy()

    for i in np.flatnonzero(mask.any(axis=1)):
        shared = ref_obs @ obs[i]
        diff = (rz - xz[i]) * ref_obs * obs[i]
        ssq = np.einsum("ij,ij->i", diff, diff)
        with np.errstate(divide="ignore", invalid="ignore"):
            dist = np.sqrt(ssq / shared)
        dist[shared == 0] = np.inf
        if self_reference:
            dist[i] = np.inf
        for j in np.flatnonzero(mask[i]):
            cand = np.flatnonzero(~ref_mask[:, j] & np.isfinite(dist))
            if cand.size == 0:
                sid = subject_ids[i] if subject_ids is not None else i
                fid = feature_names[j] if feature_names is not None else j
                raise ImputationError(sid, fid)
            order = np.lexsort((cand, dist[cand]))[:k]
            donors = cand[order]
            out[i, j] = ref[donors, j].sum() / donors.size
    return out


# --------------------------------------------------------------------------
# scaling
# --------------------------------------------------------------------------


def fit_minmax(features):
    x = np.asarray(features, dtype=np.float64)
    lo = x.min(axis=0)
    hi = x.max(axis=0)
    constant = [int(j) for j in np.flatnonzero(hi <= lo)]
    if constant:
        log.warning("constant feature columns %s map to 0", constant)
    return ScalerParams(lo, hi, constant)


def apply_minmax(params, features):
    """Scale to [0, 1] on the fitted range. Out-of-range values are kept."""
    x = np.asarray(features, dtype=np.float64)
    span = params.maximum - params.minimum
    safe = np.where(span > 0, span, 1.0)
    out = (x - params.minimum) / safe
    out[:, span <= 0] = 0.0
    return out


# --------------------------------------------------------------------------
# grades and labels
# --------------------------------------------------------------------------


def derive_abnormality_grade(p, thresholds=ABNORMALITY_THRESHOLDS):
    """Map a percentile to an abnormality grade 0..3.

    ``thresholds`` are (T1, T2, T3) for grades 1, 2, 3; lower percentile
    means a more abnormal result.
    """
    if not (isinstance(p, (int, float, np.integer, np.floating)) and 0 <= p <= 100):
        raise InvalidInputError(f"percentile must be within [0, 100], got {p!r}")
    t1, t2, t3 = thresholds
    if p < t3:
        return 3
    if p < t2:
        return 2
    if p < t1:
        return 1
    return 0


def derive_risk_grade(mean_abnormality, boundaries=RISK_BOUNDARIES):
    """Risk level 0..4 from the averaged abnormality grade.

    Intervals are half-open, ``[lo, hi)``; a value on a boundary takes the
    upper grade.
    """
    v = float(mean_abnormality)
    if not math.isfinite(v):
        raise InvalidInputError("mean abnormality must be finite")
    grade = 0
    for b in boundaries:
        if v >= b:
            grade += 1
    return grade


def risk_grade_from_percentiles(scores, thresholds=ABNORMALITY_THRESHOLDS):
    """Average abnormality over every assessment in every category, then grade.

    ``scores`` maps a category name to an iterable of percentiles.
    """
    grades = [derive_abnormality_grade(p, thresholds) for ps in scores.values() for p in ps]
    if not grades:
        raise InvalidInputError("no assessment scores given")
    return derive_risk_grade(sum(grades) / len(grades))


def extend_labels(grades, n_levels=N_LEVELS):
    """Expand grades to K-1 bits: bit j is 1 iff grade > j."""
    g = np.asarray(grades, dtype=np.int64)
    scalar = g.ndim == 0
    g = g.reshape(-1)
    if np.any((g < 0) | (g > n_levels - 1)):
        raise InvalidLabelError(f"grades must lie in [0, {n_levels - 1}]")
    bits = (g[:, None] > np.arange(n_levels - 1)[None, :]).astype(np.float64)
    return bits[0] if scalar else bits


def collapse_labels(bits):
    b = np.asarray(bits, dtype=np.float64)
    scalar = b.ndim == 1
    b = b.reshape(1, -1) if scalar else b
    if not np.all((b == 0) | (b == 1)):
        raise InvalidLabelError("label bits must be 0 or 1")
    if b.shape[1] > 1 and np.any(np.diff(b, axis=1) > 0):
        raise InconsistentLabelError("label bits must be non-increasing")
    out = b.sum(axis=1).astype(np.int64)
    return int(out[0]) if scalar else out


# --------------------------------------------------------------------------
# CSV
# --------------------------------------------------------------------------


def load_csv(path, n_levels=N_LEVELS):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError("empty file", line=1)
    header = [h.strip() for h in rows[0]]
    if len(header) < 2 or header[0] != "subject_id":
        raise ParseError("first column must be 'subject_id'", line=1)
    has_grade = header[-1] == "risk_grade"
    names = header[1:-1] if has_grade else header[1:]
    if not names:
        raise ParseError("no feature columns", line=1)
    if len(set(names)) != len(names) or "" in names:
        raise ParseError("feature column names must be unique and non-empty", line=1)

    ids, values, grades, seen = [], [], [], set()
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(c.strip() == "" for c in row):
            continue
        if len(row) != len(header):
            raise ParseError(f"expected {len(header)} fields, got {len(row)}", line=lineno)
        sid = row[0].strip()
        if not sid:
            raise ParseError("empty subject_id", line=lineno)
        if sid in seen:
            raise ParseError(f"duplicate subject_id {sid!r}", line=lineno)
        seen.add(sid)
        cells = row[1:-1] if has_grade else row[1:]
        vals = []
        for name, cell in zip(names, cells):
            cell = cell.strip()
            if cell in MISSING_MARKERS:
                vals.append(np.nan)
                continue
            try:
                v = float(cell)
            except ValueError:
                raise ParseError(f"non-numeric value {cell!r} in column {name!r}", line=lineno) from None
            if not math.isfinite(v):
                raise ParseError(f"non-finite value {cell!r} in column {name!r}", line=lineno)
            vals.append(v)
        if has_grade:
            cell = row[-1].strip()
            try:
                g = int(cell)
            except ValueError:
                raise ParseError(f"risk_grade {cell!r} is not an integer", line=lineno) from None
            if not 0 <= g < n_levels:
                raise ParseError(f"risk_grade {g} outside 0..{n_levels - 1}", line=lineno)
            grades.append(g)
        ids.append(sid)
        values.append(vals)
    if not ids:
        raise ParseError("no data rows", line=2)
    feats = np.array(values, dtype=np.float64)
    return RawCohort(ids, names, feats, np.isnan(feats), np.array(grades) if has_grade else None)


def cohort_to_csv_text(cohort):
    import io

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = ["subject_id", *cohort.feature_names]
    if cohort.grades is not None:
        header.append("risk_grade")
    w.writerow(header)
    for i, sid in enumerate(cohort.subject_ids):
        row = [sid]
        for j in range(cohort.n_features):
            row.append("" if cohort.mask[i, j] else repr(float(cohort.features[i, j])))
        if cohort.grades is not None:
            row.append(str(int(cohort.grades[i])))
        w.writerow(row)
    return buf.getvalue()


def save_csv(cohort, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(cohort_to_csv_text(cohort))


def with_grades(cohort, grades):
    return replace(cohort, grades=np.asarray(grades, dtype=np.int64))
