"""Small fully connected networks with exact reverse-mode gradients.

Layers compute ``a_{l+1} = act(a_l @ W_l + b_l)`` on row batches; the last
layer is linear or softmax.  Everything is float64 and training is
deterministic for a fixed seed.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import expit
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from ._binio import BlockReader, BlockWriter
from .exceptions import DivergenceDetected, ShapeMismatch

ACTIVATIONS = ("softplus", "tanh")
HEADS = ("linear", "softmax")
NET_MAGIC = b"MNET"


@dataclass(frozen=True)
class NetSpec:
    layer_widths: tuple
    hidden_activation: str = "softplus"
    output_head: str = "linear"

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        if len(widths) < 2 or min(widths) < 1:
            raise ValueError(f"need at least two positive widths, got {widths}")
        if self.hidden_activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.hidden_activation!r}")
        if self.output_head not in HEADS:
            raise ValueError(f"unknown output head {self.output_head!r}")
        object.__setattr__(self, "layer_widths", widths)

    @property
    def n_layers(self):
        return len(self.layer_widths) - 1

    @property
    def n_inputs(self):
        return self.layer_widths[0]

    @property
    def n_outputs(self):
        return self.layer_widths[-1]


@dataclass(frozen=True, eq=False)
class NetParams:
    """Weights ``(fan_in, fan_out)`` and biases ``(fan_out,)`` per layer."""

    spec: NetSpec
    weights: tuple
    biases: tuple

    def __post_init__(self):
        w = self.spec.layer_widths
        if len(self.weights) != self.spec.n_layers or len(self.biases) != self.spec.n_layers:
            raise ShapeMismatch("one weight matrix and bias vector per layer required")
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape != (w[l], w[l + 1]) or b.shape != (w[l + 1],):
                raise ShapeMismatch(f"layer {l}: got W{W.shape}, b{b.shape}")

    def flat(self):
        return np.concatenate([np.concatenate([W.ravel(), b]) for W, b in zip(self.weights, self.biases)])

    @classmethod
    def from_flat(cls, spec, vec):
        vec = np.asarray(vec, dtype=np.float64)
        w = spec.layer_widths
        weights, biases, k = [], [], 0
        for l in range(spec.n_layers):
            n = w[l] * w[l + 1]
            weights.append(vec[k : k + n].reshape(w[l], w[l + 1]).copy())
            k += n
            biases.append(vec[k : k + w[l + 1]].copy())
            k += w[l + 1]
        if k != vec.size:
            raise ShapeMismatch(f"flat vector has {vec.size} entries, spec needs {k}")
        return cls(spec, tuple(weights), tuple(biases))

    @property
    def size(self):
        return sum(W.size + b.size for W, b in zip(self.weights, self.biases))

    def to_bytes(self):
        out = BlockWriter(NET_MAGIC)
        out.json(
            {
                "layer_widths": list(self.spec.layer_widths),
                "hidden_activation": self.spec.hidden_activation,
                "output_head": self.spec.output_head,
            }
        )
        out.array(self.flat())
        return out.getvalue()

    @classmethod
    def from_bytes(cls, data):
        reader = BlockReader(data, NET_MAGIC)
        spec = NetSpec(**reader.json())
        return cls.from_flat(spec, reader.array())


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    epochs: int = 1000
    batch_size: object = "full"
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    # loss growth (relative to the first epoch) treated as divergence
    divergence_factor: float = 1e6

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.batch_size != "full" and int(self.batch_size) < 1:
            raise ValueError("batch_size must be positive or 'full'")


def _seed(seed):
    return int(seed) & 0xFFFFFFFFFFFFFFFF


def init_he(spec, seed=0):
    """He-normal weights (variance ``2 / fan_in``) and zero biases."""
    rng = np.random.default_rng(_seed(seed))
    w = spec.layer_widths
    weights = tuple(rng.standard_normal((w[l], w[l + 1])) * np.sqrt(2.0 / w[l]) for l in range(spec.n_layers))
    biases = tuple(np.zeros(w[l + 1]) for l in range(spec.n_layers))
    return NetParams(spec, weights, biases)


def _activate(kind, z):
    if kind == "softplus":
        # stable log(1 + e^z), cheaper than logaddexp
        return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))
    return np.tanh(z)


def _activate_grad(kind, z, a):
    if kind == "softplus":
        return expit(z)
    return 1.0 - a * a


def softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _as_batch(params, x):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.ndim != 2 or X.shape[1] != params.spec.n_inputs:
        raise ShapeMismatch(f"input width {X.shape[-1]} does not match {params.spec.n_inputs}")
    return X, single


def forward_cache(params, X):
    """Outputs for a row batch plus the intermediates needed by :func:`backward`."""
    spec = params.spec
    acts, pre = [X], []
    a = X
    for l, (W, b) in enumerate(zip(params.weights, params.biases)):
        z = a @ W + b
        pre.append(z)
        if l < spec.n_layers - 1:
            a = _activate(spec.hidden_activation, z)
        elif spec.output_head == "softmax":
            a = softmax(z)
        else:
            a = z
        acts.append(a)
    return a, (acts, pre)


def forward(params, x):
    X, single = _as_batch(params, x)
    out, _ = forward_cache(params, X)
    return out[0] if single else out


def backward(params, cache, grad_out):
    """Back-propagate ``dL/d(output)``; returns ``(param_grad, dL/d(input))``."""
    spec = params.spec
    acts, pre = cache
    g = grad_out
    if spec.output_head == "softmax":
        p = acts[-1]
        g = p * (g - np.sum(g * p, axis=1, keepdims=True))
    gW, gb = [None] * spec.n_layers, [None] * spec.n_layers
    for l in range(spec.n_layers - 1, -1, -1):
        gW[l] = acts[l].T @ g
        gb[l] = g.sum(axis=0)
        g = g @ params.weights[l].T
        if l > 0:
            g = g * _activate_grad(spec.hidden_activation, pre[l - 1], acts[l])
    return NetParams(spec, tuple(gW), tuple(gb)), g


def mse_loss(outputs, targets):
    diff = outputs - targets
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def _with_decay(grads, params, weight_decay):
    if weight_decay == 0.0:
        return grads
    weights = tuple(gw + weight_decay * W for gw, W in zip(grads.weights, params.weights))
    return NetParams(grads.spec, weights, grads.biases)


def decay_penalty(params, weight_decay):
    return 0.5 * weight_decay * sum(float(np.sum(W * W)) for W in params.weights)


def loss_and_grad(params, X, targets, loss_fn=mse_loss, weight_decay=0.0):
    out, cache = forward_cache(params, X)
    loss, g_out = loss_fn(out, targets)
    grads, _ = backward(params, cache, g_out)
    return loss, _with_decay(grads, params, weight_decay)


def _stack_forward(nets, X):
    caches = []
    a = X
    for net in nets:
        a, cache = forward_cache(net, a)
        caches.append(cache)
    return a, caches


def _stack_loss_and_grad(nets, X, targets, loss_fn, weight_decay):
    out, caches = _stack_forward(nets, X)
    loss, g = loss_fn(out, targets)
    grads = [None] * len(nets)
    for k in range(len(nets) - 1, -1, -1):
        gk, g = backward(nets[k], caches[k], g)
        grads[k] = _with_decay(gk, nets[k], weight_decay)
    return loss, grads


def grad(params, X, Y, loss="mse", weight_decay=0.0):
    """Exact gradient of the mean squared error (plus ``weight_decay/2 * |W|^2``)."""
    if loss != "mse":
        raise ValueError(f"unsupported loss {loss!r}")
    X, _ = _as_batch(params, X)
    Y = np.asarray(Y, dtype=np.float64).reshape(X.shape[0], -1)
    if Y.shape[1] != params.spec.n_outputs:
        raise ShapeMismatch(f"target width {Y.shape[1]} does not match {params.spec.n_outputs}")
    return loss_and_grad(params, X, Y, mse_loss, weight_decay)[1]


class _Adam:
    def __init__(self, size, cfg):
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0
        self.cfg = cfg

    def step(self, theta, g):
        c = self.cfg
        self.t += 1
        self.m = c.adam_beta1 * self.m + (1.0 - c.adam_beta1) * g
        self.v = c.adam_beta2 * self.v + (1.0 - c.adam_beta2) * g * g
        m_hat = self.m / (1.0 - c.adam_beta1**self.t)
        v_hat = self.v / (1.0 - c.adam_beta2**self.t)
        return theta - c.learning_rate * m_hat / (np.sqrt(v_hat) + c.adam_eps)


def train(params, inputs, targets, cfg, loss_fn=mse_loss, callback=None):
    """Adam on ``loss_fn(outputs, targets)``.

    ``targets`` is any array whose first axis runs over samples; batches of it
    are handed to ``loss_fn`` unchanged, so losses that need extra per-sample
    data (e.g. component fields) can pack it there.  Returns the trained
    parameters and a history whose last entry is the final full-data loss.
    """
    nets, history = train_stack([params], inputs, targets, cfg, loss_fn, callback)
    return nets[0], history


def train_stack(nets, inputs, targets, cfg, loss_fn=mse_loss, callback=None):
    """Jointly train networks applied in sequence (an encoder then a decoder, say)."""
    nets = list(nets)
    X = np.asarray(inputs, dtype=np.float64)
    T = np.asarray(targets, dtype=np.float64)
    n = X.shape[0]
    if n == 0:
        raise ValueError("empty training set")
    if T.shape[0] != n:
        raise ShapeMismatch(f"{n} inputs but {T.shape[0]} targets")
    if X.ndim != 2 or X.shape[1] != nets[0].spec.n_inputs:
        raise ShapeMismatch(f"input width does not match {nets[0].spec.n_inputs}")
    if cfg.epochs == 0:
        return nets, [loss_fn(_stack_forward(nets, X)[0], T)[0]]
    full = cfg.batch_size == "full" or int(cfg.batch_size) >= n
    rng = np.random.default_rng(_seed(cfg.seed))
    specs = [net.spec for net in nets]
    sizes = np.cumsum([0] + [net.size for net in nets])
    theta = np.concatenate([net.flat() for net in nets])
    opt = _Adam(theta.size, cfg)

    def unpack(vec):
        return [NetParams.from_flat(sp, vec[a:b]) for sp, a, b in zip(specs, sizes[:-1], sizes[1:])]

    history = []
    reference_loss = None
    for epoch in range(cfg.epochs):
        if full:
            batches = [slice(None)]
        else:
            order = rng.permutation(n)
            bs = int(cfg.batch_size)
            batches = [order[k : k + bs] for k in range(0, n, bs)]
        total = 0.0
        for idx in batches:
            loss, grads = _stack_loss_and_grad(unpack(theta), X[idx], T[idx], loss_fn, cfg.weight_decay)
            g = np.concatenate([gr.flat() for gr in grads])
            if not np.isfinite(loss) or not np.all(np.isfinite(g)):
                raise DivergenceDetected(f"non-finite loss at epoch {epoch}", epoch)
            total += loss * (1.0 if full else len(X[idx]) / n)
            theta = opt.step(theta, g)
        if reference_loss is None:
            reference_loss = max(total, 1e-300)
        if not np.isfinite(total) or total > cfg.divergence_factor * reference_loss:
            raise DivergenceDetected(f"loss diverged to {total:.3e} at epoch {epoch}", epoch)
        history.append(total)
        if callback is not None:
            callback(epoch, total)
    nets = unpack(theta)
    final = loss_fn(_stack_forward(nets, X)[0], T)[0]
    if not np.isfinite(final) or final > cfg.divergence_factor * reference_loss:
        raise DivergenceDetected(f"loss diverged to {final:.3e} after training", cfg.epochs)
    history.append(final)
    return nets, history


class DenseNetRegressor(RegressorMixin, BaseEstimator):
    """Scikit-learn wrapper: MSE regression with the networks above."""

    def __init__(
        self,
        hidden_layer_sizes=(30, 30),
        activation="softplus",
        learning_rate=1e-3,
        weight_decay=0.0,
        epochs=1000,
        batch_size="full",
        random_state=0,
    ):
        self.hidden_layer_sizes = hidden_layer_sizes
        self.activation = activation
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.batch_size = batch_size
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, multi_output=True, y_numeric=True)
        self._single_output = y.ndim == 1
        Y = y.reshape(len(y), -1)
        spec = NetSpec((X.shape[1], *self.hidden_layer_sizes, Y.shape[1]), self.activation, "linear")
        cfg = TrainConfig(self.learning_rate, self.weight_decay, self.epochs, self.batch_size, self.random_state)
        self.net_, self.loss_curve_ = train(init_he(spec, self.random_state), X, Y, cfg)
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "net_")
        X = check_array(X)
        out = forward(self.net_, X)
        return out[:, 0] if self._single_output else out
