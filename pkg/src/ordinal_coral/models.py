"""Denoising autoencoder, CORAL ordinal regressor, their composite, and PCA.

Layer stacks:

* encoder   N -> 64 (BN, ELU) -> 64 -> 3 (linear Z-layer)
* decoder   3 -> 64 (BN, ELU) -> 64 -> N (linear output)
* regressor 3 -> H1 (ELU) -> H2 (ELU) -> CORAL head with K-1 logits
"""

from __future__ import annotations

import hashlib
import io
import json

import numpy as np

from .errors import InvalidConfigError, ShapeError
from .numerics import Activation, BatchNorm, CoralHead, Linear, Network, as_matrix

MODEL_FORMAT_VERSION = 1


def corrupt(x, noise_level, rng=None):
    """Additive Gaussian noise with sd ``noise_level``, clipped to [0, 1]."""
    if noise_level < 0:
        raise InvalidConfigError("noise_level must be non-negative")
    x = np.asarray(x, dtype=np.float64)
    if noise_level == 0:
        return x.copy()
    rng = np.random.default_rng(rng)
    return np.clip(x + rng.normal(0.0, noise_level, size=x.shape), 0.0, 1.0)


def _child_rngs(rng, n):
    return np.random.default_rng(rng).spawn(n)


def build_encoder(n_features, hidden=64, latent=3, rng=None):
    r = _child_rngs(rng, 2)
    return Network([
        Linear(n_features, hidden, rng=r[0]), BatchNorm(hidden), Activation("elu"),
        Linear(hidden, latent, rng=r[1]),
    ])


def build_decoder(n_features, hidden=64, latent=3, rng=None):
    r = _child_rngs(rng, 2)
    return Network([
        Linear(latent, hidden, rng=r[0]), BatchNorm(hidden), Activation("elu"),
        Linear(hidden, n_features, rng=r[1]),
    ])


class DenoisingAutoencoder:
    def __init__(self, n_features, hidden=64, latent=3, noise_level=0.1, rng=None,
                 encoder=None, decoder=None):
        if noise_level < 0:
            raise InvalidConfigError("noise_level must be non-negative")
        r = _child_rngs(rng, 2)
        self.n_features = n_features
        self.noise_level = noise_level
        self.encoder = encoder or build_encoder(n_features, hidden, latent, r[0])
        self.decoder = decoder or build_decoder(n_features, hidden, latent, r[1])
        if self.encoder.layers[-1].out_dim != self.decoder.layers[0].in_dim:
            raise ShapeError("encoder output width must equal decoder input width")
        if self.decoder.layers[-1].out_dim != n_features:
            raise ShapeError("decoder output width must equal the feature count")

    @property
    def latent_dim(self):
        return self.encoder.layers[-1].out_dim

    def forward(self, x, training=False):
        x = as_matrix(x)
        if x.shape[1] != self.n_features:
            raise ShapeError(f"expected {self.n_features} columns, got {x.shape[1]}")
        z = self.encoder.forward(x, training)
        return z, self.decoder.forward(z, training)

    def backward(self, grad_reconstruction):
        return self.encoder.backward(self.decoder.backward(grad_reconstruction))

    def encode(self, x):
        return self.forward(x, training=False)[0]

    def reconstruct(self, x):
        return self.forward(x, training=False)[1]

    @property
    def networks(self):
        return [self.encoder, self.decoder]


def dae_forward(model, x, training=False):
    return model.forward(x, training)


class CoralRegressor:
    """Three trainable layers: two ELU hidden layers and the shared-weight head."""

    def __init__(self, n_inputs=3, hidden=(32, 16), n_levels=5, rng=None, network=None):
        if network is None:
            r = _child_rngs(rng, 3)
            h1, h2 = hidden
            network = Network([
                Linear(n_inputs, h1, rng=r[0]), Activation("elu"),
                Linear(h1, h2, rng=r[1]), Activation("elu"),
                CoralHead(h2, n_levels, rng=r[2]),
            ])
        self.network = network

    @property
    def head(self):
        return self.network.layers[-1]

    @property
    def n_inputs(self):
        return self.network.layers[0].in_dim

    @property
    def n_levels(self):
        return self.head.n_ranks

    def forward(self, z, training=False):
        z = as_matrix(z)
        if z.shape[1] != self.n_inputs:
            raise ShapeError(f"expected {self.n_inputs} columns, got {z.shape[1]}")
        return self.network.forward(z, training)

    def backward(self, grad_logits):
        return self.network.backward(grad_logits)

    def hidden(self, z):
        """Top hidden activation feeding the head."""
        out = as_matrix(z)
        for layer in self.network.layers[:-1]:
            out = layer.forward(out)
        return out

    @property
    def networks(self):
        return [self.network]


def coral_forward(regressor, z):
    return regressor.forward(z)


def predict_rank(logits):
    """Count of rank tasks whose probability exceeds 0.5 (logit > 0)."""
    logits = as_matrix(logits, "logits")
    return (logits > 0).sum(axis=1).astype(np.int64)


class CompositeModel:
    """Pretrained encoder feeding a CORAL regressor.

    With ``encoder_frozen`` the encoder always runs in inference mode, so
    neither its parameters nor its batch-norm statistics can change.
    """

    def __init__(self, encoder, regressor, encoder_frozen=False):
        self.encoder = encoder
        self.regressor = regressor
        self.encoder_frozen = encoder_frozen
        if encoder.layers[-1].out_dim != regressor.n_inputs:
            raise ShapeError("encoder latent width must match regressor input width")

    @property
    def n_features(self):
        return self.encoder.layers[0].in_dim

    def encode(self, x):
        return self.encoder.forward(as_matrix(x), training=False)

    def forward(self, x, training=False):
        x = as_matrix(x)
        if x.shape[1] != self.n_features:
            raise ShapeError(f"expected {self.n_features} columns, got {x.shape[1]}")
        z = self.encoder.forward(x, training=training and not self.encoder_frozen)
        return self.regressor.forward(z, training)

    def backward(self, grad_logits):
        g = self.regressor.backward(grad_logits)
        if self.encoder_frozen:
            return None
        return self.encoder.backward(g)

    def trainable_networks(self):
        if self.encoder_frozen:
            return [self.regressor.network]
        return [self.encoder, self.regressor.network]

    def predict_logits(self, x):
        return self.forward(x, training=False)

    def project(self, x):
        return self.encode(x)

    @property
    def networks(self):
        return [self.encoder, self.regressor.network]


def composite_forward(model, x, training=False):
    return model.forward(x, training)


# --------------------------------------------------------------------------
# PCA baseline
# --------------------------------------------------------------------------


class PcaModel:
    def __init__(self, mean, components, explained_variance):
        self.mean = mean
        self.components = components
        self.explained_variance = explained_variance

    @property
    def n_components(self):
        return self.components.shape[1]

    def named_arrays(self):
        return {"mean": self.mean, "components": self.components,
                "explained_variance": self.explained_variance}


def pca_fit(features, n_components=3):
    """Top right-singular directions of the centred training matrix."""
    x = as_matrix(features)
    n, d = x.shape
    if not 1 <= n_components <= min(n - 1, d):
        raise InvalidConfigError(f"n_components={n_components} must be in [1, {min(n - 1, d)}]")
    mean = x.mean(axis=0)
    _, s, vt = np.linalg.svd(x - mean, full_matrices=False)
    comps = vt[:n_components].T.copy()
    # sign convention: largest-magnitude loading positive, for reproducibility
    idx = np.argmax(np.abs(comps), axis=0)
    signs = np.sign(comps[idx, np.arange(n_components)])
    signs[signs == 0] = 1.0
    comps *= signs
    return PcaModel(mean, comps, (s[:n_components] ** 2) / (n - 1))


def pca_project(model, features):
    x = as_matrix(features)
    if x.shape[1] != model.mean.shape[0]:
        raise ShapeError("feature count differs from the fitted PCA model")
    return (x - model.mean) @ model.components


class PcaCoralModel:
    """PCA scores fed to a CORAL regressor."""

    def __init__(self, pca, regressor):
        self.pca = pca
        self.regressor = regressor

    def project(self, x):
        return pca_project(self.pca, x)

    def predict_logits(self, x):
        return self.regressor.forward(self.project(x))

    @property
    def networks(self):
        return [self.regressor.network]


# --------------------------------------------------------------------------
# hashing and serialization
# --------------------------------------------------------------------------


def parameter_hash(*objs):
    """SHA-256 over every parameter/buffer array of the given models."""
    h = hashlib.sha256()
    for obj in objs:
        for key, arr in sorted(_named_arrays(obj).items()):
            h.update(key.encode())
            h.update(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
    return h.hexdigest()


def _named_arrays(obj):
    if isinstance(obj, Network):
        return obj.named_arrays()
    if isinstance(obj, PcaModel):
        return obj.named_arrays()
    if isinstance(obj, DenoisingAutoencoder):
        return {**_prefix("encoder", obj.encoder), **_prefix("decoder", obj.decoder)}
    if isinstance(obj, CoralRegressor):
        return _prefix("regressor", obj.network)
    if isinstance(obj, CompositeModel):
        return {**_prefix("encoder", obj.encoder), **_prefix("regressor", obj.regressor.network)}
    if isinstance(obj, PcaCoralModel):
        return {**{f"pca.{k}": v for k, v in obj.pca.named_arrays().items()},
                **_prefix("regressor", obj.regressor.network)}
    if hasattr(obj, "minimum") and hasattr(obj, "maximum"):
        return {"scaler.minimum": obj.minimum, "scaler.maximum": obj.maximum}
    raise TypeError(f"cannot hash {type(obj).__name__}")


def _prefix(name, net):
    return {f"{name}.{k}": v for k, v in net.named_arrays().items()}


def save_model(path, model, scaler=None, config=None):
    """Write a version-tagged ``.npz`` holding layer specs, arrays and config."""
    if isinstance(model, CompositeModel):
        kind = "composite"
        meta = {"encoder": model.encoder.describe(),
                "regressor": model.regressor.network.describe(),
                "encoder_frozen": model.encoder_frozen}
    elif isinstance(model, PcaCoralModel):
        kind = "pca"
        meta = {"regressor": model.regressor.network.describe()}
    else:
        raise TypeError(f"cannot save {type(model).__name__}")
    meta.update({
        "format_version": MODEL_FORMAT_VERSION,
        "kind": kind,
        "scaler": None if scaler is None else scaler.to_dict(),
        "config": config or {},
    })
    arrays = {k: np.asarray(v) for k, v in _named_arrays(model).items()}
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    data = buf.getvalue()
    if hasattr(path, "write"):
        path.write(data)
    else:
        with open(path, "wb") as fh:
            fh.write(data)
    return data


def load_model(path):
    """Inverse of :func:`save_model`; returns ``(model, scaler, config)``."""
    from .dataio import ScalerParams

    with np.load(path) as f:
        arrays = {k: f[k] for k in f.files}
    meta = json.loads(arrays.pop("__meta__").tobytes().decode())
    if meta.get("format_version") != MODEL_FORMAT_VERSION:
        raise ValueError(f"unsupported model format version {meta.get('format_version')}")

    def sub(prefix):
        n = len(prefix) + 1
        return {k[n:]: v for k, v in arrays.items() if k.startswith(prefix + ".")}

    regressor = CoralRegressor(network=Network.from_description(meta["regressor"], sub("regressor")))
    if meta["kind"] == "composite":
        encoder = Network.from_description(meta["encoder"], sub("encoder"))
        model = CompositeModel(encoder, regressor, meta["encoder_frozen"])
    else:
        p = sub("pca")
        model = PcaCoralModel(PcaModel(p["mean"], p["components"], p["explained_variance"]), regressor)
    scaler = None if meta["scaler"] is None else ScalerParams.from_dict(meta["scaler"])
    return model, scaler, meta["config"]
