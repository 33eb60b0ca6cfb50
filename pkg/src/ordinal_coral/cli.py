"""Command-line front end.

Every command computes all of its outputs in memory first and only then
writes them, each through a temporary file renamed into place, so a failed
invocation leaves no partial artifacts behind. Settings come from an
optional flat JSON config file; command-line flags override it.

Exit codes: 0 success, 2 usage or schema problem, 3 runtime failure.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
import sys
import tempfile
from dataclasses import fields
from pathlib import Path

import click
import numpy as np

from . import svg
from .dataio import (
    apply_minmax,
    cohort_to_csv_text,
    filter_subjects,
    fit_minmax,
    knn_impute,
    load_csv,
)
from .errors import (
    EmptyCohortError,
    FoldError,
    InsufficientDataError,
    InvalidConfigError,
    InvalidInputError,
    OrdinalCoralError,
    ParseError,
    ShapeError,
)
from .evaluation import (
    MODEL_KINDS,
    ExperimentConfig,
    fit_model,
    fold_seed,
    metrics_document,
    permutation_importance,
    run_experiment,
)
from .models import load_model, predict_rank, save_model
from .synth import PRESETS, SynthConfig, generate_cohort
from .training import TrainConfig

log = logging.getLogger(__name__)

EXIT_USAGE, EXIT_RUNTIME = 2, 3
# errors that mean "your input or settings are wrong" rather than "the run broke"
USAGE_ERRORS = (ParseError, EmptyCohortError, InvalidConfigError, InvalidInputError, ShapeError, InsufficientDataError)

TRAIN_KEYS = tuple(f.name for f in fields(TrainConfig) if f.name != "seed")
EXPERIMENT_KEYS = tuple(f.name for f in fields(ExperimentConfig)
                        if f.name not in ("train", "n_folds"))
SYNTH_KEYS = tuple(f.name for f in fields(SynthConfig)) + ("preset", "outdir")
RUN_KEYS = ("input", "outdir", "model", "folds", "seed", "threads", "save_model") \
    + EXPERIMENT_KEYS + TRAIN_KEYS
IMPORTANCE_KEYS = ("input", "outdir", "model_file", "seed", "importance_method", "max_missing",
                   "k_neighbors")
PROJECT_KEYS = ("input", "outdir", "model_file", "max_missing", "k_neighbors")

RUN_DEFAULTS = {"model": "retraining", "folds": 10, "seed": 0, "threads": None, "save_model": False}


class CliError(Exception):
    def __init__(self, message, code=EXIT_USAGE):
        super().__init__(message)
        self.code = code


# --------------------------------------------------------------------------
# config resolution and output writing
# --------------------------------------------------------------------------


def read_config_file(path):
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(f"cannot read config {path}: {exc}") from None
    if not isinstance(data, dict):
        raise CliError("config file must hold a flat JSON object")
    return data


def resolve_config(allowed, file_values, flag_values, defaults=None):
    """Merge defaults < config file < flags, rejecting unknown keys."""
    unknown = sorted(set(file_values) - set(allowed))
    if unknown:
        raise CliError(f"unknown config keys: {', '.join(unknown)}")
    nested = [k for k, v in file_values.items() if isinstance(v, dict)]
    if nested:
        raise CliError(f"config must be flat; nested values for: {', '.join(nested)}")
    out = dict(defaults or {})
    out.update(file_values)
    out.update({k: v for k, v in flag_values.items() if v is not None})
    return out


def experiment_config(cfg):
    train = TrainConfig(**{k: cfg[k] for k in TRAIN_KEYS if k in cfg})
    exp = {k: cfg[k] for k in EXPERIMENT_KEYS if k in cfg}
    return ExperimentConfig(n_folds=int(cfg.get("folds", 10)), train=train, **exp)


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_outputs(outdir, files):
    """Atomically write ``{name: str | bytes}`` into ``outdir``.

    All contents are staged as temporary files first; they are renamed
    into place only once every one of them has been written.
    """
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    staged = []
    try:
        for name, content in files.items():
            data = content.encode("utf-8") if isinstance(content, str) else content
            fd, tmp = tempfile.mkstemp(dir=outdir, prefix=f".{name}.", suffix=".tmp")
            staged.append((tmp, outdir / name))
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
        for tmp, final in staged:
            os.replace(tmp, final)
    finally:
        for tmp, _ in staged:
            if os.path.exists(tmp):
                os.unlink(tmp)
    return [outdir / n for n in files]


def to_json(obj):
    return json.dumps(obj, indent=2, default=_json_default) + "\n"


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return None if not np.isfinite(o) else float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def _csv_text(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _num(v):
    return "" if v is None or not np.isfinite(v) else repr(float(v))


def confusion_csv(cm):
    k = cm.shape[0]
    return _csv_text(["true_grade", *[f"pred_{j}" for j in range(k)]],
                     [[i, *map(int, cm[i])] for i in range(k)])


def projections_csv(subject_ids, coords, true_grades=None, predicted=None):
    dims = coords.shape[1]
    header = ["subject_id", *[f"dim{d}" for d in range(dims)], "true_grade", "predicted_grade"]
    rows = []
    for i, sid in enumerate(subject_ids):
        t = "" if true_grades is None else int(true_grades[i])
        p = "" if predicted is None else int(predicted[i])
        rows.append([sid, *[_num(c) for c in coords[i]], t, p])
    return _csv_text(header, rows)


def importance_csv(table):
    n_folds = table["delta_balanced_acc_folds"].shape[0]
    header = ["feature", "delta_balanced_acc_mean", "delta_sensitivity_mean",
              *[f"delta_balanced_acc_fold{f}" for f in range(n_folds)],
              *[f"delta_sensitivity_fold{f}" for f in range(n_folds)]]
    rows = []
    for j, name in enumerate(table["feature"]):
        rows.append([name, _num(table["delta_balanced_acc_mean"][j]),
                     _num(table["delta_sensitivity_mean"][j]),
                     *[_num(v) for v in table["delta_balanced_acc_folds"][:, j]],
                     *[_num(v) for v in table["delta_sensitivity_folds"][:, j]]])
    return _csv_text(header, rows)


def _load_cohort(path, need_grades=True):
    if path is None:
        raise CliError("--input is required")
    try:
        cohort = load_csv(path)
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc}") from None
    if need_grades and cohort.grades is None:
        raise CliError(f"{path}: a 'risk_grade' column is required")
    return cohort


def _guard(fn):
    """Translate package errors into messages and exit codes."""
    import functools

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except CliError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(exc.code)
        except FoldError as exc:
            click.echo(f"error: fold {exc.fold_index} failed: {exc.cause}", err=True)
            sys.exit(EXIT_USAGE if isinstance(exc.cause, USAGE_ERRORS) else EXIT_RUNTIME)
        except USAGE_ERRORS as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_USAGE)
        except (OrdinalCoralError, FloatingPointError, OSError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_RUNTIME)
    return wrapper


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def main(verbose):
    """Ordinal dyslexia-risk grading pipeline."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")


def _int_list(ctx, param, value):
    if value is None:
        return None
    try:
        return [int(v) for v in value.split(",")]
    except ValueError:
        raise click.BadParameter("expected comma-separated integers") from None


@main.command()
@click.option("--outdir", type=click.Path(file_okay=False))
@click.option("--preset", type=click.Choice(sorted(PRESETS)))
@click.option("--seed", type=int)
@click.option("--n-subjects", type=int)
@click.option("--prevalence", callback=_int_list, help="Grade counts, e.g. 5,331,270,50,10.")
@click.option("--noise-sd", type=float)
@click.option("--missing-rate", type=float)
@click.option("--config", "config_path", type=click.Path(dir_okay=False))
@_guard
def synth(outdir, preset, seed, n_subjects, prevalence, noise_sd, missing_rate, config_path):
    """Write a synthetic cohort (cohort.csv) and its ground truth (truth.json)."""
    flags = dict(outdir=outdir, preset=preset, seed=seed, n_subjects=n_subjects,
                 prevalence=prevalence, noise_sd=noise_sd, missing_rate=missing_rate)
    cfg = resolve_config(SYNTH_KEYS, read_config_file(config_path), flags, {"preset": "reported"})
    if cfg.get("outdir") is None:
        raise CliError("--outdir is required")
    synth_values = {k: v for k, v in cfg.items() if k not in ("preset", "outdir")}
    if "n_subjects" in synth_values and "prevalence" not in synth_values:
        raise CliError("--n-subjects needs a matching --prevalence")
    if "prevalence" in synth_values and "n_subjects" not in synth_values:
        synth_values["n_subjects"] = sum(synth_values["prevalence"])
    params = {**PRESETS[cfg["preset"]], **synth_values}
    try:
        config = SynthConfig(**params)
    except TypeError as exc:
        raise CliError(str(exc)) from None
    cohort, truth = generate_cohort(config)
    echo = {"command": "synth", "preset": cfg["preset"], **config.to_dict()}
    write_outputs(cfg["outdir"], {
        "cohort.csv": cohort_to_csv_text(cohort),
        "truth.json": truth.to_json() + "\n",
        "config.json": to_json(echo),
    })
    click.echo(f"wrote {cohort.n_subjects} subjects to {Path(cfg['outdir']) / 'cohort.csv'}")


@main.command()
@click.argument("paths", nargs=-1, required=True, type=click.Path(dir_okay=False))
@click.option("--max-missing", type=int, default=5, show_default=True,
              help="Missing-test budget per subject.")
@click.option("--strict", is_flag=True, help="Treat budget violations as schema failures.")
def validate(paths, max_missing, strict):
    """Check cohort CSVs: schema, grade range and missing-test budget."""
    worst = 0
    for path in paths:
        try:
            cohort = load_csv(path)
        except (ParseError, OSError) as exc:
            click.echo(f"{path}: INVALID: {exc}")
            worst = EXIT_USAGE
            continue
        counts = cohort.missing_counts()
        over = [(sid, int(c)) for sid, c in zip(cohort.subject_ids, counts) if c > max_missing]
        graded = "with" if cohort.grades is not None else "without"
        click.echo(f"{path}: {cohort.n_subjects} subjects, {cohort.n_features} tests, "
                   f"{graded} risk grades, {int(cohort.mask.sum())} missing values")
        if cohort.grades is not None:
            dist = np.bincount(cohort.grades, minlength=5)
            click.echo(f"  grade counts: {', '.join(map(str, dist))}")
        if over:
            click.echo(f"  {len(over)} subjects lack more than {max_missing} tests:")
            for sid, c in over:
                click.echo(f"    {sid}: {c} missing")
            if strict:
                worst = EXIT_USAGE
        else:
            click.echo("  all subjects within the missing-test budget")
    sys.exit(worst)


def fit_final_model(cohort, kind, config, seed):
    """Fit one model on every retained subject, for later ``importance``/``project``."""
    cohort = filter_subjects(cohort, config.max_missing)
    x = knn_impute(cohort.features, cohort.mask, config.k_neighbors,
                   subject_ids=cohort.subject_ids, feature_names=cohort.feature_names)
    scaler = fit_minmax(x)
    tc = TrainConfig(**{**config.train.__dict__, "seed": fold_seed(seed, config.n_folds, 1)})
    fcfg = ExperimentConfig(**{**config.__dict__, "train": tc})
    model, _, _ = fit_model(kind, apply_minmax(scaler, x), cohort.grades, fcfg,
                            fold_seed(seed, config.n_folds, 2))
    return model, scaler


@main.command()
@click.option("--input", "input_path", type=click.Path(dir_okay=False))
@click.option("--outdir", type=click.Path(file_okay=False))
@click.option("--model", type=click.Choice(MODEL_KINDS))
@click.option("--folds", type=int)
@click.option("--seed", type=int)
@click.option("--threads", type=int, help="Parallel folds (default: $ORDINAL_CORAL_THREADS or 1).")
@click.option("--save-model/--no-save-model", "keep_model", default=None,
              help="Also fit on all subjects and write model.npz.")
@click.option("--config", "config_path", type=click.Path(dir_okay=False))
@_guard
def run(input_path, outdir, model, folds, seed, threads, keep_model, config_path):
    """Cross-validate one model kind and write metrics, tables and figures."""
    flags = dict(input=input_path, outdir=outdir, model=model, folds=folds, seed=seed,
                 threads=threads, save_model=keep_model)
    cfg = resolve_config(RUN_KEYS, read_config_file(config_path), flags, RUN_DEFAULTS)
    if cfg.get("outdir") is None:
        raise CliError("--outdir is required")
    if cfg["model"] not in MODEL_KINDS:
        raise CliError(f"model must be one of {', '.join(MODEL_KINDS)}")
    try:
        exp = experiment_config(cfg)
    except TypeError as exc:
        raise CliError(str(exc)) from None
    cohort = _load_cohort(cfg["input"])
    seed = int(cfg["seed"])

    result = run_experiment(cohort, cfg["model"], exp, seed, cfg["threads"])
    files = {
        "config.json": to_json({"command": "run", **cfg, "input_sha256": sha256_file(cfg["input"]),
                                "resolved": _resolved(exp)}),
        "metrics.json": to_json(metrics_document(result)),
        "confusion.csv": confusion_csv(result.confusion),
        "projections.csv": projections_csv(result.subject_ids, result.projections,
                                           result.grades, result.predictions),
        "train_reports.json": to_json({
            f"fold{fr.fold_index}": {k: r.to_dict() for k, r in fr.reports.items()}
            for fr in result.fold_results}),
        "latent.svg": svg.latent_scatter(result.projections, result.grades,
                                         f"Out-of-fold latent coordinates ({result.model_kind})"),
        "confusion.svg": svg.confusion_heatmap(result.confusion,
                                               f"Confusion matrix ({result.model_kind})"),
    }
    table = result.importance_table()
    if table is not None:
        files["importance.csv"] = importance_csv(table)
        files["importance.svg"] = svg.importance_bars(table["feature"], table["delta_balanced_acc_mean"])
    if cfg["save_model"]:
        final, scaler = fit_final_model(cohort, cfg["model"], exp, seed)
        buf = io.BytesIO()
        save_model(buf, final, scaler, {"model": cfg["model"], "seed": seed,
                                        "max_missing": exp.max_missing,
                                        "k_neighbors": exp.k_neighbors,
                                        "n_levels": exp.n_levels})
        files["model.npz"] = buf.getvalue()
    write_outputs(cfg["outdir"], files)
    m = result.mean
    click.echo(f"{result.model_kind}: balanced accuracy {m['balanced_accuracy']:.3f}, "
               f"sensitivity {m['sensitivity']:.3f}, specificity {m['specificity']:.3f}")


def _resolved(exp):
    d = {k: v for k, v in exp.__dict__.items() if k != "train"}
    d["train"] = exp.train.__dict__
    return d


def _prepare_for_model(cohort, scaler, cfg, saved):
    max_missing = int(cfg.get("max_missing", saved.get("max_missing", 5)))
    k = int(cfg.get("k_neighbors", saved.get("k_neighbors", 2)))
    cohort = filter_subjects(cohort, max_missing)
    x = knn_impute(cohort.features, cohort.mask, k, subject_ids=cohort.subject_ids,
                   feature_names=cohort.feature_names)
    if scaler is not None:
        if scaler.minimum.size != cohort.n_features:
            raise CliError(f"model expects {scaler.minimum.size} tests, input has {cohort.n_features}")
        x = apply_minmax(scaler, x)
    return cohort, x


def _load_saved(path):
    if path is None:
        raise CliError("--model-file is required")
    try:
        return load_model(path)
    except (OSError, ValueError, KeyError) as exc:
        raise CliError(f"cannot load model {path}: {exc}") from None


@main.command()
@click.option("--input", "input_path", type=click.Path(dir_okay=False))
@click.option("--outdir", type=click.Path(file_okay=False))
@click.option("--model-file", type=click.Path(dir_okay=False))
@click.option("--seed", type=int)
@click.option("--method", "importance_method", type=click.Choice(["zero", "shuffle"]))
@click.option("--config", "config_path", type=click.Path(dir_okay=False))
@_guard
def importance(input_path, outdir, model_file, seed, importance_method, config_path):
    """Ablation importance of each test under a saved model."""
    flags = dict(input=input_path, outdir=outdir, model_file=model_file, seed=seed,
                 importance_method=importance_method)
    cfg = resolve_config(IMPORTANCE_KEYS, read_config_file(config_path), flags,
                         {"seed": 0, "importance_method": "zero"})
    if cfg.get("outdir") is None:
        raise CliError("--outdir is required")
    model, scaler, saved = _load_saved(cfg.get("model_file"))
    cohort, x = _prepare_for_model(_load_cohort(cfg.get("input")), scaler, cfg, saved)
    rep = permutation_importance(model, x, cohort.grades, cohort.feature_names,
                                 int(saved.get("n_levels", 5)), method=cfg["importance_method"],
                                 rng=int(cfg["seed"]))
    table = {"feature": rep.feature_names,
             "delta_balanced_acc_mean": rep.delta_balanced_accuracy,
             "delta_sensitivity_mean": rep.delta_sensitivity,
             "delta_balanced_acc_folds": rep.delta_balanced_accuracy[None, :],
             "delta_sensitivity_folds": rep.delta_sensitivity[None, :]}
    write_outputs(cfg["outdir"], {
        "importance.csv": importance_csv(table),
        "importance.svg": svg.importance_bars(rep.feature_names, rep.delta_balanced_accuracy),
        "config.json": to_json({"command": "importance", **cfg,
                                "input_sha256": sha256_file(cfg["input"]),
                                "baseline_balanced_accuracy": rep.baseline_balanced_accuracy,
                                "baseline_sensitivity": rep.baseline_sensitivity}),
    })
    click.echo(f"baseline balanced accuracy {rep.baseline_balanced_accuracy:.3f}")


@main.command()
@click.option("--input", "input_path", type=click.Path(dir_okay=False))
@click.option("--outdir", type=click.Path(file_okay=False))
@click.option("--model-file", type=click.Path(dir_okay=False))
@click.option("--config", "config_path", type=click.Path(dir_okay=False))
@_guard
def project(input_path, outdir, model_file, config_path):
    """Latent coordinates and predicted grades for a cohort under a saved model."""
    flags = dict(input=input_path, outdir=outdir, model_file=model_file)
    cfg = resolve_config(PROJECT_KEYS, read_config_file(config_path), flags)
    if cfg.get("outdir") is None:
        raise CliError("--outdir is required")
    model, scaler, saved = _load_saved(cfg.get("model_file"))
    cohort, x = _prepare_for_model(_load_cohort(cfg.get("input"), need_grades=False),
                                   scaler, cfg, saved)
    coords = model.project(x)
    pred = predict_rank(model.predict_logits(x))
    write_outputs(cfg["outdir"], {
        "projections.csv": projections_csv(cohort.subject_ids, coords, cohort.grades, pred),
        "latent.svg": svg.latent_scatter(coords, cohort.grades if cohort.grades is not None else pred),
        "config.json": to_json({"command": "project", **cfg,
                                "input_sha256": sha256_file(cfg["input"])}),
    })
    click.echo(f"projected {cohort.n_subjects} subjects")


if __name__ == "__main__":
    main()
