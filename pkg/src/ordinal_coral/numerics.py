"""Dense layers, activations, losses and optimizers with hand-written gradients.

Everything operates on float64 numpy arrays of shape ``(n_samples, n_features)``.
Layers cache what they need during ``forward`` and consume the cache in
``backward``; a :class:`Network` chains them and keeps every trainable
parameter as a view into one flat buffer so optimizers update a single array.
"""

from __future__ import annotations

import numpy as np

from .errors import (
    DegenerateBatchError,
    InconsistentLabelError,
    InvalidInputError,
    InvalidLabelError,
    ShapeError,
    StateError,
)

ELU_ALPHA = 1.0


def as_matrix(x, name="x"):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x.reshape(1, -1)
    if x.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {x.shape}")
    return x


def _check_finite(x, name="x"):
    if not np.all(np.isfinite(x)):
        raise InvalidInputError(f"{name} contains non-finite values")


# --------------------------------------------------------------------------
# activations
# --------------------------------------------------------------------------


def elu(x, alpha=ELU_ALPHA):
    # expm1 on the clipped branch avoids overflow warnings for large positives
    return np.where(x > 0, x, alpha * np.expm1(np.minimum(x, 0.0)))


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(x):
    """log(1 + e^x) without overflow."""
    return np.logaddexp(0.0, x)


def log_sigmoid(x):
    return -softplus(-x)


def activation(kind, x):
    """Apply ``kind`` in {'elu', 'sigmoid', 'identity'} elementwise."""
    x = as_matrix(x)
    _check_finite(x)
    if kind == "elu":
        return elu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "identity":
        return x.copy()
    raise InvalidInputError(f"unknown activation {kind!r}")


# --------------------------------------------------------------------------
# layers
# --------------------------------------------------------------------------


class Layer:
    """Base layer. ``params``/``grads`` map names to arrays of equal shape."""

    def __init__(self):
        self.params = {}
        self.grads = {}
        self._cache = None

    def forward(self, x, training=False):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def buffers(self):
        """Non-trainable state that must be saved with the model."""
        return {}

    def _pop_cache(self):
        if self._cache is None:
            raise StateError(f"{type(self).__name__}.backward called before forward")
        cache, self._cache = self._cache, None
        return cache

    def _init_grads(self):
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}


class Linear(Layer):
    def __init__(self, in_dim, out_dim, rng=None, weight=None, bias=None):
        super().__init__()
        if weight is None:
            rng = np.random.default_rng(rng)
            limit = np.sqrt(6.0 / in_dim)
            weight = rng.uniform(-limit, limit, size=(in_dim, out_dim))
        if bias is None:
            bias = np.zeros(out_dim)
        weight = np.array(weight, dtype=np.float64)
        bias = np.array(bias, dtype=np.float64).reshape(-1)
        if weight.shape != (in_dim, out_dim) or bias.shape != (out_dim,):
            raise ShapeError(
                f"Linear({in_dim}, {out_dim}) got weight {weight.shape}, bias {bias.shape}"
            )
        self.params = {"weight": weight, "bias": bias}
        self._init_grads()

    @property
    def in_dim(self):
        return self.params["weight"].shape[0]

    @property
    def out_dim(self):
        return self.params["weight"].shape[1]

    def forward(self, x, training=False):
        if x.shape[1] != self.in_dim:
            raise ShapeError(f"expected {self.in_dim} input columns, got {x.shape[1]}")
        self._cache = x
        return x @ self.params["weight"] + self.params["bias"]

    def backward(self, grad):
        x = self._pop_cache()
        self.grads["weight"][...] = x.T @ grad
        self.grads["bias"][...] = grad.sum(axis=0)
        return grad @ self.params["weight"].T


def linear_forward(layer, x):
    return layer.forward(as_matrix(x))


class BatchNorm(Layer):
    """Per-feature batch normalisation.

    Training mode normalises with the batch mean and population variance and
    moves the running statistics by ``momentum``; inference mode uses the
    running statistics only.
    """

    def __init__(self, width, momentum=0.1, eps=1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.params = {"gamma": np.ones(width), "beta": np.zeros(width)}
        self.running_mean = np.zeros(width)
        self.running_var = np.ones(width)
        self._init_grads()

    @property
    def width(self):
        return self.params["gamma"].shape[0]

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def forward(self, x, training=False, update_stats=True):
        if x.shape[1] != self.width:
            raise ShapeError(f"expected {self.width} columns, got {x.shape[1]}")
        gamma, beta = self.params["gamma"], self.params["beta"]
        if training:
            if x.shape[0] < 2:
                raise DegenerateBatchError("batch normalisation needs at least 2 rows in training mode")
            mean = x.mean(axis=0)
            centered = x - mean
            var = (centered * centered).mean(axis=0)
            inv_std = 1.0 / np.sqrt(var + self.eps)
            xhat = centered * inv_std
            if update_stats:
                m = self.momentum
                self.running_mean[...] = (1 - m) * self.running_mean + m * mean
                self.running_var[...] = (1 - m) * self.running_var + m * var
            self._cache = ("train", xhat, inv_std)
        else:
            inv_std = 1.0 / np.sqrt(self.running_var + self.eps)
            xhat = (x - self.running_mean) * inv_std
            self._cache = ("infer", xhat, inv_std)
        return gamma * xhat + beta

    def backward(self, grad):
        mode, xhat, inv_std = self._pop_cache()
        gamma = self.params["gamma"]
        self.grads["gamma"][...] = (grad * xhat).sum(axis=0)
        self.grads["beta"][...] = grad.sum(axis=0)
        dxhat = grad * gamma
        if mode == "infer":
            return dxhat * inv_std
        n = grad.shape[0]
        return (inv_std / n) * (
            n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0)
        )


def batchnorm_forward(layer, x, training):
    return layer.forward(as_matrix(x), training=training)


class Activation(Layer):
    def __init__(self, kind):
        super().__init__()
        if kind not in ("elu", "sigmoid", "identity"):
            raise InvalidInputError(f"unknown activation {kind!r}")
        self.kind = kind

    def forward(self, x, training=False):
        if self.kind == "elu":
            out = elu(x)
        elif self.kind == "sigmoid":
            out = sigmoid(x)
        else:
            out = x
        self._cache = (x, out)
        return out

    def backward(self, grad):
        x, out = self._pop_cache()
        if self.kind == "elu":
            # d/dx elu = 1 for x > 0, elu(x) + alpha otherwise
            return grad * np.where(x > 0, 1.0, out + ELU_ALPHA)
        if self.kind == "sigmoid":
            return grad * out * (1.0 - out)
        return grad


class CoralHead(Layer):
    """Rank-consistent output layer: one shared weight vector, K-1 biases.

    ``logits[i, j] = h[i] @ weight + bias[j]``
    """

    def __init__(self, in_dim, n_ranks, rng=None, weight=None, bias=None):
        super().__init__()
        if n_ranks < 2:
            raise InvalidInputError("need at least two rank levels")
        if weight is None:
            rng = np.random.default_rng(rng)
            limit = np.sqrt(6.0 / in_dim)
            weight = rng.uniform(-limit, limit, size=in_dim)
        if bias is None:
            # sorted non-increasing so predictions start out consistent
            bias = -np.arange(n_ranks - 1, dtype=np.float64)
        weight = np.array(weight, dtype=np.float64).reshape(-1)
        bias = np.array(bias, dtype=np.float64).reshape(-1)
        if weight.shape != (in_dim,) or bias.shape != (n_ranks - 1,):
            raise ShapeError("CoralHead parameter shapes inconsistent")
        self.params = {"weight": weight, "bias": bias}
        self._init_grads()

    @property
    def in_dim(self):
        return self.params["weight"].shape[0]

    @property
    def n_ranks(self):
        return self.params["bias"].shape[0] + 1

    def forward(self, x, training=False):
        if x.shape[1] != self.in_dim:
            raise ShapeError(f"expected {self.in_dim} input columns, got {x.shape[1]}")
        self._cache = x
        score = x @ self.params["weight"]
        return score[:, None] + self.params["bias"][None, :]

    def backward(self, grad):
        x = self._pop_cache()
        g = grad.sum(axis=1)
        self.grads["weight"][...] = x.T @ g
        self.grads["bias"][...] = grad.sum(axis=0)
        return np.outer(g, self.params["weight"])


# --------------------------------------------------------------------------
# network container
# --------------------------------------------------------------------------


class Network:
    """Ordered stack of layers sharing one flat parameter/gradient buffer."""

    def __init__(self, layers):
        self.layers = list(layers)
        self._bind()

    def _bind(self):
        entries = [(layer, name) for layer in self.layers for name in layer.params]
        total = sum(layer.params[name].size for layer, name in entries)
        self.flat = np.zeros(total)
        self.flat_grad = np.zeros(total)
        offset = 0
        for layer, name in entries:
            p = layer.params[name]
            size, shape = p.size, p.shape
            self.flat[offset : offset + size] = p.reshape(-1)
            layer.params[name] = self.flat[offset : offset + size].reshape(shape)
            layer.grads[name] = self.flat_grad[offset : offset + size].reshape(shape)
            offset += size

    def forward(self, x, training=False):
        for layer in self.layers:
            x = layer.forward(x, training=training)
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    @property
    def n_params(self):
        return self.flat.size

    def buffers(self):
        out = []
        for layer in self.layers:
            out.extend(layer.buffers().values())
        return out

    def get_state(self):
        return [self.flat.copy()] + [b.copy() for b in self.buffers()]

    def set_state(self, state):
        self.flat[...] = state[0]
        for dst, src in zip(self.buffers(), state[1:]):
            dst[...] = src

    def clone(self):
        # deepcopy would detach the parameter views from the flat buffer
        return Network.from_description(self.describe(), self.named_arrays())

    def named_arrays(self):
        """Every parameter and buffer keyed ``'<layer index>.<name>'``."""
        out = {}
        for i, layer in enumerate(self.layers):
            for name, arr in layer.params.items():
                out[f"{i}.{name}"] = arr
            for name, arr in layer.buffers().items():
                out[f"{i}.{name}"] = arr
        return out

    def describe(self):
        spec = []
        for layer in self.layers:
            if isinstance(layer, Linear):
                spec.append({"type": "linear", "in": layer.in_dim, "out": layer.out_dim})
            elif isinstance(layer, BatchNorm):
                spec.append({"type": "batchnorm", "width": layer.width,
                             "momentum": layer.momentum, "eps": layer.eps})
            elif isinstance(layer, Activation):
                spec.append({"type": "activation", "kind": layer.kind})
            elif isinstance(layer, CoralHead):
                spec.append({"type": "coral", "in": layer.in_dim, "ranks": layer.n_ranks})
            else:  # pragma: no cover
                raise TypeError(type(layer))
        return spec

    @classmethod
    def from_description(cls, spec, arrays=None):
        layers = []
        for s in spec:
            kind = s["type"]
            if kind == "linear":
                layers.append(Linear(s["in"], s["out"], weight=np.zeros((s["in"], s["out"]))))
            elif kind == "batchnorm":
                layers.append(BatchNorm(s["width"], s["momentum"], s["eps"]))
            elif kind == "activation":
                layers.append(Activation(s["kind"]))
            elif kind == "coral":
                layers.append(CoralHead(s["in"], s["ranks"], weight=np.zeros(s["in"])))
            else:
                raise ValueError(f"unknown layer type {kind!r}")
        net = cls(layers)
        if arrays is not None:
            for key, arr in net.named_arrays().items():
                arr[...] = arrays[key]
        return net


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------


def mse_loss(predicted, target):
    """Mean squared error over every element, and its gradient."""
    predicted = as_matrix(predicted, "predicted")
    target = as_matrix(target, "target")
    if predicted.shape != target.shape:
        raise ShapeError(f"shape mismatch {predicted.shape} vs {target.shape}")
    diff = predicted - target
    loss = float(np.mean(diff * diff))
    return loss, 2.0 * diff / diff.size


def check_extended_labels(labels):
    labels = as_matrix(labels, "labels")
    if not np.all((labels == 0) | (labels == 1)):
        raise InvalidLabelError("extended labels must be 0 or 1")
    if labels.shape[1] > 1 and np.any(np.diff(labels, axis=1) > 0):
        raise InconsistentLabelError("extended label rows must be non-increasing")
    return labels


def coral_loss(logits, labels):
    """Summed binary cross-entropy over all samples and rank tasks.

    Uses ``log(1 - s(o)) = log s(o) - o`` so only one stable log-sigmoid is
    evaluated. Returns ``(loss, dloss/dlogits)``.
    """
    logits = as_matrix(logits, "logits")
    labels = check_extended_labels(labels)
    if logits.shape != labels.shape:
        raise ShapeError(f"shape mismatch {logits.shape} vs {labels.shape}")
    log_s = log_sigmoid(logits)
    loglik = labels * log_s + (1.0 - labels) * (log_s - logits)
    loss = float(-loglik.sum())
    return loss, sigmoid(logits) - labels


# --------------------------------------------------------------------------
# optimizers
# --------------------------------------------------------------------------


class _Optimizer:
    kind = None

    def __init__(self, params, learning_rate, beta1=0.9, beta2=0.999, eps=1e-8):
        if learning_rate <= 0:
            raise InvalidInputError("learning rate must be positive")
        self.params = list(params)
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]

    def step(self, grads):
        grads = list(grads)
        if len(grads) != len(self.params) or any(
            g.shape != p.shape for g, p in zip(grads, self.params)
        ):
            raise ShapeError("gradients do not match parameters")
        self.step_count += 1
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            self._update(p, g, m, v)

    def _update(self, p, g, m, v):
        raise NotImplementedError


class Adam(_Optimizer):
    kind = "adam"

    def __init__(self, params, learning_rate=0.01, **kw):
        super().__init__(params, learning_rate, **kw)

    def _update(self, p, g, m, v):
        b1, b2, t = self.beta1, self.beta2, self.step_count
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        p -= self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)


class Adamax(_Optimizer):
    """Adam's infinity-norm variant; ``v`` holds the exponentially weighted max."""

    kind = "adamax"

    def __init__(self, params, learning_rate=0.002, **kw):
        super().__init__(params, learning_rate, **kw)

    def _update(self, p, g, m, u):
        b1, b2, t = self.beta1, self.beta2, self.step_count
        m *= b1
        m += (1 - b1) * g
        np.maximum(b2 * u, np.abs(g), out=u)
        # u == 0 implies m == 0 (no gradient seen yet): the update is zero
        ratio = np.divide(m, u, out=np.zeros_like(m), where=u > 0)
        p -= (self.learning_rate / (1 - b1**t)) * ratio


def make_optimizer(kind, params, learning_rate, **kw):
    if kind == "adam":
        return Adam(params, learning_rate, **kw)
    if kind == "adamax":
        return Adamax(params, learning_rate, **kw)
    raise InvalidInputError(f"unknown optimizer {kind!r}")
