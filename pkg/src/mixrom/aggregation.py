"""Space-dependent convex aggregation of model fields.

Three ways of producing per-dof weights ``w[k, i]`` (dof ``k``, model ``i``):

* EWA: Gaussian costs of each model's pointwise error against a reference,
  normalised per dof.  Needs the reference, so only usable offline.
* KNN: averages the stored EWA cost fields of the nearest training
  parameters and normalises, giving weights at unseen parameters.
* ANN: a softmax network of ``(x, y, mu)`` trained so that the weighted
  combination matches the reference in the mean-square sense.
"""

from dataclasses import dataclass
from pathlib import Path
import warnings

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.neighbors import NearestNeighbors
from sklearn.utils.validation import check_array, check_is_fitted

from .densenet import NetParams, NetSpec, TrainConfig, forward, init_he, train
from .exceptions import EmptyGrid, EmptyInput, KTooLarge, NonPositiveSigma, ShapeMismatch
from .grid import FieldSnapshot, ParameterVector, save_snapshot

UNIFORM_FLOOR = 1e-300
SIGMA_GRID_SIZE = 15

ANN_PRESETS = {
    "hills": dict(hidden=(30, 30, 30, 30, 30), activation="softplus", learning_rate=5e-4, weight_decay=1e-4, epochs=60000),
    "bump": dict(hidden=(50, 50, 50), activation="tanh", learning_rate=1e-3, weight_decay=1e-5, epochs=10000),
}
KNN_PRESETS = {"hills": 4, "bump": 2}


def _values(field):
    return field.values if isinstance(field, FieldSnapshot) else np.asarray(field, dtype=np.float64)


@dataclass(frozen=True, eq=False)
class WeightField:
    """Per-dof convex weights, one column per model tag."""

    weights: np.ndarray
    model_tags: tuple
    mesh: object = None

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        tags = tuple(self.model_tags)
        if w.ndim != 2 or w.shape[1] != len(tags):
            raise ShapeMismatch(f"weights of shape {w.shape} do not match {len(tags)} model tags")
        if self.mesh is not None and self.mesh.n_dof != w.shape[0]:
            raise ShapeMismatch(f"weights have {w.shape[0]} rows, mesh has {self.mesh.n_dof} dofs")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "model_tags", tags)

    @property
    def n_dof(self):
        return self.weights.shape[0]

    def to_snapshots(self, params):
        """One snapshot per model tag holding that model's weight at each dof."""
        return [
            FieldSnapshot(self.mesh, self.weights[:, i], params, quantity="weight", model_tag=tag)
            for i, tag in enumerate(self.model_tags)
        ]

    def save(self, directory, params, binary=False):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        ext = ".bin" if binary else ".txt"
        paths = []
        for snap in self.to_snapshots(params):
            paths.append(directory / f"weight_{snap.model_tag}{ext}")
            save_snapshot(snap, paths[-1], binary=binary)
        return paths


# --------------------------------------------------------------------------
# EWA
# --------------------------------------------------------------------------


def gaussian_cost(pred, ref, sigma):
    """Pointwise ``exp(-(pred - ref)^2 / (2 sigma^2))``."""
    if not (np.isscalar(sigma) and sigma > 0):
        raise NonPositiveSigma(f"sigma must be a positive number, got {sigma!r}")
    p, r = _values(pred), _values(ref)
    if p.shape != r.shape:
        raise ShapeMismatch(f"prediction shape {p.shape} differs from reference shape {r.shape}")
    d = p - r
    return np.exp(-(d * d) / (2.0 * sigma * sigma))


def _normalise_rows(costs):
    costs = np.asarray(costs, dtype=np.float64)
    total = costs.sum(axis=-1, keepdims=True)
    dead = np.all(costs < UNIFORM_FLOOR, axis=-1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        w = costs / total
    return np.where(dead, 1.0 / costs.shape[-1], w)


def ewa_weights(costs, model_tags=None, mesh=None):
    """Normalise ``n_M`` cost fields into a :class:`WeightField`.

    ``costs`` is a sequence of ``n_M`` arrays of length ``n_dof`` (or a
    ``n_M x n_dof`` array).  Dofs where every cost is below ``1e-300`` get
    uniform weights.
    """
    try:
        C = np.stack([_values(c) for c in costs], axis=1)
    except ValueError:
        raise ShapeMismatch("cost fields differ in length") from None
    if C.ndim != 2:
        raise ShapeMismatch("cost fields must be one-dimensional")
    if np.any(C < 0):
        raise ValueError("costs must be non-negative")
    tags = tuple(model_tags) if model_tags is not None else tuple(f"m{i}" for i in range(C.shape[1]))
    return WeightField(_normalise_rows(C), tags, mesh)


def aggregate(fields, weights):
    """Convex combination ``sum_i w_i * field_i`` tagged ``"mixed"``."""
    if not fields:
        raise EmptyInput("no fields to aggregate")
    W = weights.weights if isinstance(weights, WeightField) else np.asarray(weights, dtype=np.float64)
    vals = [_values(f) for f in fields]
    if len({v.shape for v in vals}) != 1 or W.shape != (vals[0].size, len(vals)):
        raise ShapeMismatch(f"weights of shape {W.shape} do not match the {len(fields)} fields")
    F = np.stack(vals, axis=1)
    # clamp to the pointwise envelope: weights summing to 1 +- ulp must not leave it
    mixed = np.clip(np.sum(W * F, axis=1), F.min(axis=1), F.max(axis=1))
    first = fields[0]
    if isinstance(first, FieldSnapshot):
        return first.with_values(mixed, model_tag="mixed")
    return mixed


def default_sigma_grid(refs, size=SIGMA_GRID_SIZE):
    scale = float(np.std(np.concatenate([_values(r) for r in refs])))
    return np.logspace(-3, 0, size) * (scale if scale > 0 else 1.0)


def sigma_trace(preds, refs, grid=None):
    """Mean relative L2 error of EWA-aggregated training fields for each grid sigma.

    ``preds[c]`` lists the ``n_M`` model fields of configuration ``c`` and
    ``refs[c]`` its reference.
    """
    if len(refs) == 0 or len(preds) != len(refs):
        raise EmptyInput("sigma selection needs at least one configuration with its reference")
    grid = default_sigma_grid(refs) if grid is None else np.asarray(grid, dtype=np.float64).ravel()
    if grid.size == 0:
        raise EmptyGrid("sigma grid is empty")
    P = [np.stack([_values(f) for f in fs], axis=1) for fs in preds]
    R = [_values(r) for r in refs]
    errors = np.empty(grid.size)
    for g, sigma in enumerate(grid):
        errs = []
        for F, r in zip(P, R):
            d = F - r[:, None]
            mix = np.sum(_normalise_rows(np.exp(-(d * d) / (2.0 * sigma * sigma))) * F, axis=1)
            errs.append(np.linalg.norm(mix - r) / np.linalg.norm(r))
        errors[g] = np.mean(errs)
    return grid, errors


def select_sigma(preds, refs, grid=None):
    """Grid value minimising the EWA training error; ties go to the larger sigma."""
    grid, errors = sigma_trace(preds, refs, grid)
    best = np.flatnonzero(errors <= errors.min() * (1 + 1e-12))
    return float(grid[best[np.argmax(grid[best])]])


def resolve_sigma(sigma, cases, grid=None, tags=None):
    """Explicit sigma after validation, or the grid-selected one for ``"auto"``."""
    if sigma == "auto":
        if not cases:
            raise EmptyInput("sigma selection needs configurations with references")
        return select_sigma([_model_fields(c, tags) for c in cases], [c.reference for c in cases], grid)
    sigma = float(sigma)
    if not sigma > 0:
        raise NonPositiveSigma(f"sigma must be positive, got {sigma}")
    return sigma


def _model_fields(case, tags=None):
    tags = tuple(case.fields) if tags is None else tags
    return [case.fields[t] for t in tags]


def reference_costs(case, sigma, tags=None):
    """``n_dof x n_M`` Gaussian cost matrix of one configuration against its reference."""
    if case.reference is None:
        raise ValueError("configuration has no reference field")
    return np.stack([gaussian_cost(f, case.reference, sigma) for f in _model_fields(case, tags)], axis=1)


def reference_weights(case, sigma, tags=None):
    tags = tuple(case.fields) if tags is None else tuple(tags)
    return WeightField(_normalise_rows(reference_costs(case, sigma, tags)), tags, case.mesh)


# --------------------------------------------------------------------------
# KNN
# --------------------------------------------------------------------------


class KnnWeights(BaseEstimator):
    """Nearest-neighbour regression of cost fields over parameter space.

    ``fit(X, costs)`` takes parameters ``X`` (``N x p``) and cost fields
    ``costs`` (``N x n_dof x n_M``).  ``predict(X)`` averages the cost fields
    of the ``k`` nearest training parameters (Euclidean distance after min-max
    scaling) and normalises rows, returning ``n_q x n_dof x n_M`` weights.
    """

    def __init__(self, k=4):
        self.k = k

    def fit(self, X, costs):
        X = check_array(X)
        costs = np.asarray(costs, dtype=np.float64)
        if costs.ndim != 3 or costs.shape[0] != X.shape[0]:
            raise ShapeMismatch(f"expected costs of shape ({X.shape[0]}, n_dof, n_M), got {costs.shape}")
        if not 1 <= self.k <= X.shape[0]:
            raise KTooLarge(f"k={self.k} but only {X.shape[0]} training configurations")
        self.lower_ = X.min(axis=0)
        span = X.max(axis=0) - self.lower_
        self.scale_ = np.where(span > 0, span, 1.0)
        self.training_params_ = X
        self.costs_ = costs
        self.neighbors_ = NearestNeighbors(n_neighbors=self.k, algorithm="brute").fit((X - self.lower_) / self.scale_)
        self.n_features_in_ = X.shape[1]
        return self

    def kneighbors(self, X):
        check_is_fitted(self, "costs_")
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.n_features_in_:
            raise ShapeMismatch(f"expected {self.n_features_in_} parameters, got {X.shape[1]}")
        return self.neighbors_.kneighbors((X - self.lower_) / self.scale_)[1]

    def predict(self, X):
        idx = self.kneighbors(X)
        return _normalise_rows(self.costs_[idx].mean(axis=1))


def fit_knn_weights(cases, k=4, sigma="auto", sigma_grid=None, tags=None):
    """Fit :class:`KnnWeights` on reference-bearing configurations.

    Returns the fitted estimator with ``sigma_`` and ``model_tags_`` set.
    """
    cases = list(cases)
    if not cases:
        raise EmptyInput("KNN weighting needs configurations with references")
    if k > len(cases):
        raise KTooLarge(f"k={k} but only {len(cases)} configurations carry references")
    tags = tuple(cases[0].fields) if tags is None else tuple(tags)
    s = resolve_sigma(sigma, cases, sigma_grid, tags)
    costs = [reference_costs(c, s, tags) for c in cases]
    if len({c.shape for c in costs}) != 1:
        raise ShapeMismatch("all configurations must share the dof count")
    model = KnnWeights(k).fit(np.array([c.params.values for c in cases]), np.stack(costs))
    model.sigma_ = s
    model.model_tags_ = tags
    return model


def predict_knn_weights(model, mu_star, mesh=None):
    mu = mu_star.as_array() if isinstance(mu_star, ParameterVector) else np.asarray(mu_star, dtype=np.float64)
    return WeightField(model.predict(mu[None, :])[0], model.model_tags_, mesh)


# --------------------------------------------------------------------------
# ANN
# --------------------------------------------------------------------------


def ann_inputs(mesh, mu):
    """Rows ``(x, y, mu_1, ..., mu_p)`` for every dof of ``mesh``."""
    mu = mu.as_array() if isinstance(mu, ParameterVector) else np.asarray(mu, dtype=np.float64).ravel()
    return np.column_stack([mesh.coords, np.broadcast_to(mu, (mesh.n_dof, mu.size))])


def aggregation_loss(weights, targets):
    """Mean of ``(s - sum_i w_i s_i)^2``; ``targets`` packs ``[s, s_1, ..., s_n]``."""
    diff = np.sum(weights * targets[:, 1:], axis=1) - targets[:, 0]
    grad = (2.0 / diff.size) * diff[:, None] * targets[:, 1:]
    return float(np.mean(diff * diff)), grad


class AnnWeights(BaseEstimator):
    """Softmax network mapping normalised ``(x, y, mu)`` to model weights.

    ``fit(X, y, fields)`` takes inputs ``X`` (``n x d``), reference values
    ``y`` (``n``) and component values ``fields`` (``n x n_M``).  The output
    layer starts at zero so the untrained model gives uniform weights.
    """

    def __init__(
        self,
        hidden=(30, 30, 30, 30, 30),
        activation="softplus",
        learning_rate=5e-4,
        weight_decay=1e-4,
        epochs=60000,
        batch_size="full",
        random_state=0,
    ):
        self.hidden = hidden
        self.activation = activation
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.batch_size = batch_size
        self.random_state = random_state

    def _init_net(self, n_in, n_models):
        spec = NetSpec((n_in, *tuple(self.hidden), n_models), self.activation, "softmax")
        net = init_he(spec, self.random_state)
        weights = net.weights[:-1] + (np.zeros_like(net.weights[-1]),)
        return NetParams(spec, weights, net.biases)

    def fit(self, X, y, fields):
        X = check_array(X)
        y = np.asarray(y, dtype=np.float64).ravel()
        F = np.asarray(fields, dtype=np.float64)
        F = F[:, None] if F.ndim == 1 else F
        if not (len(y) == len(F) == len(X)):
            raise ShapeMismatch("inputs, reference values and fields must have equal length")
        self.lower_ = X.min(axis=0)
        span = X.max(axis=0) - self.lower_
        self.scale_ = np.where(span > 0, span, 1.0)
        Xn = (X - self.lower_) / self.scale_
        targets = np.column_stack([y, F])
        net = self._init_net(X.shape[1], F.shape[1])
        self.initial_loss_ = aggregation_loss(forward(net, Xn), targets)[0]
        cfg = TrainConfig(self.learning_rate, self.weight_decay, self.epochs, self.batch_size, self.random_state)
        self.net_, self.loss_curve_ = train(net, Xn, targets, cfg, loss_fn=aggregation_loss)
        self.final_loss_ = self.loss_curve_[-1]
        if self.final_loss_ > self.initial_loss_:
            warnings.warn(
                f"weight network ended above the uniform-weight loss ({self.final_loss_:.3e} > {self.initial_loss_:.3e})",
                RuntimeWarning,
                stacklevel=2,
            )
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "net_")
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.n_features_in_:
            raise ShapeMismatch(f"expected {self.n_features_in_} inputs, got {X.shape[1]}")
        return forward(self.net_, (X - self.lower_) / self.scale_)


def ann_training_data(cases, tags=None):
    """Stack ``(inputs, reference values, component values)`` over configurations."""
    cases = list(cases)
    if not cases:
        raise EmptyInput("ANN weighting needs configurations with references")
    tags = tuple(cases[0].fields) if tags is None else tuple(tags)
    X = np.vstack([ann_inputs(c.mesh, c.params) for c in cases])
    y = np.concatenate([c.reference.values for c in cases])
    F = np.vstack([np.stack([c.fields[t].values for t in tags], axis=1) for c in cases])
    return X, y, F


def train_ann_weights(cases, model=None, tags=None):
    """Fit an :class:`AnnWeights` (default: hills preset) on reference-bearing configurations."""
    cases = list(cases)
    tags = tuple(cases[0].fields) if (tags is None and cases) else tags
    model = AnnWeights(**ANN_PRESETS["hills"]) if model is None else model
    model.fit(*ann_training_data(cases, tags))
    model.model_tags_ = tuple(tags)
    return model


def predict_ann_weights(model, mesh, mu_star):
    return WeightField(model.predict(ann_inputs(mesh, mu_star)), model.model_tags_, mesh)
