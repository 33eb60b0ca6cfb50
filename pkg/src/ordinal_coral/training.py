"""Training loops: DAE pre-training and the two composite regimes.

Both loops shuffle mini-batches every epoch, evaluate a held-out validation
split after each epoch, stop once ``patience`` epochs pass without
improvement and restore the parameters of the best epoch.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .dataio import extend_labels
from .errors import InsufficientDataError, InvalidConfigError, TrainingError
from .models import CompositeModel, CoralRegressor, corrupt
from .numerics import Adam, Adamax, coral_loss, mse_loss

log = logging.getLogger(__name__)

REGIMES = ("pretrain_frozen", "retrain_joint")


@dataclass
class TrainConfig:
    max_epochs: int = 2000
    patience: int = 150
    batch_size: int = 32
    adamax_lr: float = 0.002
    adam_lr: float = 0.01
    noise_level: float = 0.1
    validation_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.validation_fraction < 0.5:
            raise InvalidConfigError("validation_fraction must be in (0, 0.5)")
        if self.patience < 1:
            raise InvalidConfigError("patience must be >= 1")
        if self.batch_size < 2:
            raise InvalidConfigError("batch_size must be >= 2 for batch normalisation")
        if self.max_epochs < 1:
            raise InvalidConfigError("max_epochs must be >= 1")
        if self.adam_lr <= 0 or self.adamax_lr <= 0:
            raise InvalidConfigError("learning rates must be positive")
        if self.noise_level < 0:
            raise InvalidConfigError("noise_level must be non-negative")


@dataclass
class TrainReport:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    stopped_epoch: int = -1
    best_epoch: int = -1
    wall_time: float = 0.0

    @property
    def best_val_loss(self):
        return self.val_loss[self.best_epoch]

    def to_dict(self):
        return asdict(self)

    def same_trajectory(self, other):
        """Equality ignoring wall time."""
        return (self.train_loss == other.train_loss and self.val_loss == other.val_loss
                and self.stopped_epoch == other.stopped_epoch and self.best_epoch == other.best_epoch)


def make_validation_split(n_rows, grades=None, fraction=0.1, seed=0):
    """Stratified hold-out split; returns ``(train_idx, val_idx)``, both sorted.

    The number of validation rows is ``round(fraction * n_rows)`` (at least
    one), shared across grades by largest remainder.
    """
    n_val = max(1, int(round(fraction * n_rows)))
    if n_rows < 2 or n_val >= n_rows:
        raise InsufficientDataError(f"cannot split {n_rows} rows with fraction {fraction}")
    rng = np.random.default_rng(seed)
    if grades is None:
        perm = rng.permutation(n_rows)
        return np.sort(perm[n_val:]), np.sort(perm[:n_val])

    grades = np.asarray(grades)
    classes, counts = np.unique(grades, return_counts=True)
    quota = fraction * counts
    alloc = np.floor(quota).astype(int)
    remainder = quota - alloc
    for c in np.lexsort((np.arange(classes.size), -remainder)):
        if alloc.sum() >= n_val:
            break
        if alloc[c] < counts[c] - 1:
            alloc[c] += 1
    # very small classes may leave the total short; top up from the largest
    for c in np.argsort(-counts, kind="stable"):
        while alloc.sum() < n_val and alloc[c] < counts[c] - 1:
            alloc[c] += 1
    val = []
    for c, k in zip(classes, alloc):
        members = np.flatnonzero(grades == c)
        val.extend(rng.permutation(members)[:k])
    val = np.sort(np.array(val, dtype=np.int64))
    train = np.setdiff1d(np.arange(n_rows), val)
    return train, val


def _batches(n, batch_size, rng):
    perm = rng.permutation(n)
    n_batches = max(1, -(-n // batch_size))
    return np.array_split(perm, n_batches)


def _check_finite_loss(loss, epoch, what):
    if not np.isfinite(loss):
        raise TrainingError(f"{what} loss became non-finite at epoch {epoch}")


class _EarlyStopper:
    def __init__(self, networks, patience):
        self.networks = networks
        self.patience = patience
        self.best = np.inf
        self.best_epoch = -1
        self.best_state = None

    def update(self, epoch, val_loss):
        if val_loss < self.best:
            self.best = val_loss
            self.best_epoch = epoch
            self.best_state = [net.get_state() for net in self.networks]
        return epoch - self.best_epoch >= self.patience

    def restore(self):
        for net, state in zip(self.networks, self.best_state):
            net.set_state(state)


def train_dae(model, features, config=None, grades=None):
    """Fit the autoencoder to reconstruct clean inputs from corrupted ones."""
    config = config or TrainConfig()
    x = np.asarray(features, dtype=np.float64)
    if x.shape[0] < 2 * config.batch_size:
        raise InsufficientDataError(
            f"need at least {2 * config.batch_size} rows to train the autoencoder, got {x.shape[0]}")
    rng = np.random.default_rng([config.seed, 1])
    tr, va = make_validation_split(x.shape[0], grades, config.validation_fraction, rng)
    x_tr, x_va = x[tr], x[va]
    if x_tr.shape[0] < 2:
        raise InsufficientDataError("training split needs at least two rows")

    nets = model.networks
    opt = Adamax([n.flat for n in nets], config.adamax_lr)
    stopper = _EarlyStopper(nets, config.patience)
    report = TrainReport()
    t0 = time.perf_counter()
    for epoch in range(config.max_epochs):
        total = 0.0
        for idx in _batches(x_tr.shape[0], config.batch_size, rng):
            if idx.size < 2:
                continue
            clean = x_tr[idx]
            noisy = corrupt(clean, config.noise_level, rng)
            _, recon = model.forward(noisy, training=True)
            loss, grad = mse_loss(recon, clean)
            model.backward(grad)
            opt.step([n.flat_grad for n in nets])
            total += loss * idx.size
        train_loss = total / x_tr.shape[0]
        val_loss = mse_loss(model.reconstruct(x_va), x_va)[0]
        _check_finite_loss(train_loss, epoch, "training")
        _check_finite_loss(val_loss, epoch, "validation")
        report.train_loss.append(train_loss)
        report.val_loss.append(val_loss)
        report.stopped_epoch = epoch
        if stopper.update(epoch, val_loss):
            break
    stopper.restore()
    report.best_epoch = stopper.best_epoch
    report.wall_time = time.perf_counter() - t0
    return model, report


def _fit_coral(forward, backward, networks, inputs, grades, config, rng):
    """Shared CORAL loop; ``forward(x, training)`` returns logits."""
    n_levels = networks[-1].layers[-1].n_ranks
    grades = np.asarray(grades, dtype=np.int64)
    if np.unique(grades).size < 2:
        log.warning("training split contains a single grade; fitting anyway")
    tr, va = make_validation_split(inputs.shape[0], grades, config.validation_fraction, rng)
    x_tr, x_va = inputs[tr], inputs[va]
    t_tr = extend_labels(grades[tr], n_levels)
    t_va = extend_labels(grades[va], n_levels)

    opt = Adam([n.flat for n in networks], config.adam_lr)
    stopper = _EarlyStopper(networks, config.patience)
    report = TrainReport()
    t0 = time.perf_counter()
    for epoch in range(config.max_epochs):
        total = 0.0
        for idx in _batches(x_tr.shape[0], config.batch_size, rng):
            if idx.size < 2:
                continue
            logits = forward(x_tr[idx], True)
            loss, grad = coral_loss(logits, t_tr[idx])
            backward(grad)
            opt.step([n.flat_grad for n in networks])
            total += loss
        train_loss = total / x_tr.shape[0]
        val_loss = coral_loss(forward(x_va, False), t_va)[0] / x_va.shape[0]
        _check_finite_loss(train_loss, epoch, "training")
        _check_finite_loss(val_loss, epoch, "validation")
        report.train_loss.append(train_loss)
        report.val_loss.append(val_loss)
        report.stopped_epoch = epoch
        if stopper.update(epoch, val_loss):
            break
    stopper.restore()
    report.best_epoch = stopper.best_epoch
    report.wall_time = time.perf_counter() - t0
    return report


def train_regressor(regressor, inputs, grades, config=None):
    """Fit a :class:`CoralRegressor` on fixed inputs (PCA scores or latent codes)."""
    config = config or TrainConfig()
    rng = np.random.default_rng([config.seed, 2])
    z = np.asarray(inputs, dtype=np.float64)
    report = _fit_coral(regressor.forward, regressor.backward, [regressor.network],
                        z, grades, config, rng)
    return regressor, report


def train_composite(model, features, grades, config=None, regime="retrain_joint"):
    """Train the encoder+regressor composite under one of two regimes.

    ``pretrain_frozen`` locks the encoder (parameters and batch-norm
    statistics) and fits only the regressor on its latent codes;
    ``retrain_joint`` back-propagates through both.
    """
    if regime not in REGIMES:
        raise InvalidConfigError(f"regime must be one of {REGIMES}")
    config = config or TrainConfig()
    rng = np.random.default_rng([config.seed, 3])
    x = np.asarray(features, dtype=np.float64)
    if regime == "pretrain_frozen":
        model.encoder_frozen = True
        # the frozen encoder is a fixed map, so encode once
        z = model.encode(x)
        reg = model.regressor
        report = _fit_coral(reg.forward, reg.backward, [reg.network], z, grades, config, rng)
    else:
        model.encoder_frozen = False
        report = _fit_coral(model.forward, model.backward, model.trainable_networks(),
                            x, grades, config, rng)
    return model, report


def build_composite(dae, n_levels=5, hidden=(32, 16), rng=None, frozen=False):
    """Composite with a copy of the DAE encoder and a fresh regressor."""
    regressor = CoralRegressor(dae.latent_dim, hidden, n_levels, rng=rng)
    return CompositeModel(dae.encoder.clone(), regressor, encoder_frozen=frozen)
