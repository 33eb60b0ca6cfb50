"""Synthetic cohorts with known ground truth.

Each subject gets a latent severity ``u`` on the averaged-abnormality scale,
drawn inside the interval that maps to its risk grade and then jittered by
``noise_sd``. Informative tests respond to ``u`` through a decreasing
function (logistic with a per-test location for ``monotone-curved``, a
straight line for ``linear``) plus Gaussian noise; the remaining tests are
noise with respect to risk. Curved tests whose location sits at high
severity behave like tests with a ceiling effect: only the few high-risk
subjects move them.

Non-informative tests are split into ``n_nuisance`` groups that share a
latent nuisance factor (think general ability or attention on the day of
testing) with loading ``nuisance_strength``; with ``n_nuisance=0`` they are
independent noise. Nuisance factors are independent of risk.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .dataio import RISK_BOUNDARIES, RawCohort
from .errors import InvalidConfigError

REPORTED_PREVALENCE = (5, 331, 270, 50, 10)
NONLINEARITIES = ("linear", "monotone-curved")

# outer edges for the open-ended lowest and highest grades
_LATENT_EDGES = (-0.5,) + RISK_BOUNDARIES + (3.5,)


@dataclass
class SynthConfig:
    n_subjects: int = 666
    n_features: int = 33
    prevalence: tuple = REPORTED_PREVALENCE
    n_informative: int = 12
    noise_sd: float = 0.25
    missing_rate: float = 0.0
    nonlinearity: str = "monotone-curved"
    n_nuisance: int = 2
    nuisance_strength: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.prevalence = tuple(int(c) for c in self.prevalence)
        if any(c < 0 for c in self.prevalence) or len(self.prevalence) < 2:
            raise InvalidConfigError("prevalence needs >= 2 non-negative counts")
        if sum(self.prevalence) != self.n_subjects:
            raise InvalidConfigError(
                f"prevalence sums to {sum(self.prevalence)}, expected n_subjects={self.n_subjects}")
        if len(self.prevalence) != len(_LATENT_EDGES) - 1:
            raise InvalidConfigError(f"prevalence must have {len(_LATENT_EDGES) - 1} entries")
        if not 0 <= self.n_informative <= self.n_features or self.n_features < 1:
            raise InvalidConfigError("need 0 <= n_informative <= n_features")
        if self.noise_sd < 0:
            raise InvalidConfigError("noise_sd must be non-negative")
        if not 0 <= self.missing_rate < 1:
            raise InvalidConfigError("missing_rate must be in [0, 1)")
        if self.n_nuisance < 0 or self.nuisance_strength < 0:
            raise InvalidConfigError("n_nuisance and nuisance_strength must be non-negative")
        if self.nonlinearity not in NONLINEARITIES:
            raise InvalidConfigError(f"nonlinearity must be one of {NONLINEARITIES}")

    def to_dict(self):
        d = asdict(self)
        d["prevalence"] = list(self.prevalence)
        return d


def scale_prevalence(counts, total):
    """Rescale counts to ``total`` by largest remainder."""
    counts = np.asarray(counts, dtype=np.float64)
    quota = counts * total / counts.sum()
    out = np.floor(quota).astype(int)
    for i in np.argsort(-(quota - out), kind="stable")[: total - out.sum()]:
        out[i] += 1
    return tuple(int(c) for c in out)


PRESETS = {
    # grade counts as reported
    "reported": dict(n_subjects=666, prevalence=REPORTED_PREVALENCE),
    # same proportions at the retained-subject count
    "retained572": dict(n_subjects=572, prevalence=scale_prevalence(REPORTED_PREVALENCE, 572)),
    "easy": dict(n_subjects=666, prevalence=REPORTED_PREVALENCE, noise_sd=0.05),
}


def preset(name, **overrides):
    if name not in PRESETS:
        raise InvalidConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return SynthConfig(**{**PRESETS[name], **overrides})


@dataclass
class SynthTruth:
    informative: list
    severity: np.ndarray
    locations: list = field(default_factory=list)

    def to_json(self):
        return json.dumps({
            "informative": [int(i) for i in self.informative],
            "locations": [float(v) for v in self.locations],
            "severity": [float(v) for v in self.severity],
        }, indent=1)


def _response(u, location, nonlinearity):
    if nonlinearity == "linear":
        # spans roughly [0, 1] over the latent range
        return 0.5 - (u - location) / 4.0
    return 1.0 / (1.0 + np.exp(4.0 * (u - location)))


def generate_cohort(config=None):
    """Draw a cohort; returns ``(RawCohort with grades, SynthTruth)``."""
    config = config or SynthConfig()
    rng = np.random.default_rng(config.seed)
    grades = np.repeat(np.arange(len(config.prevalence)), config.prevalence)
    grades = grades[rng.permutation(grades.size)]

    lo = np.array(_LATENT_EDGES[:-1])[grades]
    hi = np.array(_LATENT_EDGES[1:])[grades]
    u = rng.uniform(lo, hi)
    u = u + config.noise_sd * rng.standard_normal(u.size)

    n, d = config.n_subjects, config.n_features
    informative = np.sort(rng.choice(d, size=config.n_informative, replace=False))
    locations = np.linspace(0.0, 3.0, config.n_informative) if config.n_informative > 1 \
        else np.array([1.0] * config.n_informative)

    x = rng.normal(0.5, 0.2, size=(n, d))
    others = np.setdiff1d(np.arange(d), informative)
    if config.n_nuisance > 0 and others.size:
        factors = rng.standard_normal((n, config.n_nuisance))
        groups = np.arange(others.size) % config.n_nuisance
        x[:, others] += 0.2 * config.nuisance_strength * factors[:, groups]
    for j, loc in zip(informative, locations):
        x[:, j] = _response(u, loc, config.nonlinearity) + config.noise_sd * rng.standard_normal(n)

    ids = [f"S{i:04d}" for i in range(n)]
    names = [f"test_{j:02d}" for j in range(d)]
    cohort = RawCohort(ids, names, x, np.zeros_like(x, dtype=bool), grades)
    if config.missing_rate > 0:
        cohort = inject_missingness(cohort, config.missing_rate, rng)
    return cohort, SynthTruth(informative.tolist(), u, locations.tolist())


def inject_missingness(cohort, rate, seed=None):
    """Independently hide each cell with probability ``rate``."""
    if not 0 <= rate < 1:
        raise InvalidConfigError("rate must be in [0, 1)")
    rng = np.random.default_rng(seed)
    hide = rng.random(cohort.features.shape) < rate
    mask = cohort.mask | hide
    return RawCohort(list(cohort.subject_ids), list(cohort.feature_names),
                     np.where(mask, np.nan, cohort.features), mask,
                     None if cohort.grades is None else cohort.grades.copy())
