"""Non-intrusive reduced order models: autoencoder compression + RBF regression.

Estimators follow scikit-learn orientation: one snapshot per *row*, i.e. the
transpose of the ``n_dof x N`` snapshot matrix.
"""

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from ._binio import BlockReader, BlockWriter
from .densenet import NetParams, NetSpec, TrainConfig, forward, init_he, train_stack
from .exceptions import ShapeMismatch
from .grid import FieldSnapshot, Mesh, ParameterVector, assemble_matrix
from .rbf import RBFInterpolator

ROM_MAGIC = b"MROB"

# Autoencoder settings per study: encoder hidden widths, latent size and
# optimiser settings; the decoder mirrors the encoder.
AE_PRESETS = {
    "hills": dict(hidden=(50, 20), latent_dim=3, activation="softplus", learning_rate=5e-4, weight_decay=1e-4, epochs=10000),
    "bump": dict(hidden=(50, 20), latent_dim=10, activation="softplus", learning_rate=1e-3, weight_decay=1e-8, epochs=10000),
}


class FieldScaler(TransformerMixin, BaseEstimator):
    """Global or per-dof scaling of snapshot rows.

    ``"minmax"`` maps the global range of the training matrix to ``[0, 1]``,
    ``"standard"`` removes the per-dof mean and divides by the global standard
    deviation, ``"none"`` is the identity.
    """

    def __init__(self, mode="minmax"):
        self.mode = mode

    def fit(self, X, y=None):
        X = check_array(X)
        if self.mode == "minmax":
            self.offset_ = np.full(X.shape[1], X.min())
            span = X.max() - X.min()
            self.scale_ = span if span > 0 else 1.0
        elif self.mode == "standard":
            self.offset_ = X.mean(axis=0)
            std = float(np.std(X - self.offset_))
            self.scale_ = std if std > 0 else 1.0
        elif self.mode == "none":
            self.offset_ = np.zeros(X.shape[1])
            self.scale_ = 1.0
        else:
            raise ValueError(f"unknown scaling mode {self.mode!r}")
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "offset_")
        return (np.asarray(X, dtype=np.float64) - self.offset_) / self.scale_

    def inverse_transform(self, X):
        check_is_fitted(self, "offset_")
        return np.asarray(X, dtype=np.float64) * self.scale_ + self.offset_


class Autoencoder(TransformerMixin, BaseEstimator):
    """Dense autoencoder ``n_dof -> hidden -> latent -> reversed(hidden) -> n_dof``.

    Encoder and decoder are trained jointly on the reconstruction MSE of the
    scaled snapshots.  ``transform`` returns latent codes and
    ``inverse_transform`` decodes them back to (unscaled) fields.
    """

    def __init__(
        self,
        hidden=(50, 20),
        latent_dim=3,
        activation="softplus",
        learning_rate=5e-4,
        weight_decay=1e-4,
        epochs=10000,
        batch_size="full",
        scaler="minmax",
        random_state=0,
    ):
        self.hidden = hidden
        self.latent_dim = latent_dim
        self.activation = activation
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.batch_size = batch_size
        self.scaler = scaler
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_array(X, ensure_min_samples=2)
        n_dof = X.shape[1]
        self.scaler_ = FieldScaler(self.scaler).fit(X)
        Xs = self.scaler_.transform(X)
        hidden = tuple(self.hidden)
        enc = NetSpec((n_dof, *hidden, self.latent_dim), self.activation, "linear")
        dec = NetSpec((self.latent_dim, *hidden[::-1], n_dof), self.activation, "linear")
        seed = int(self.random_state) & 0xFFFFFFFFFFFFFFFF
        cfg = TrainConfig(self.learning_rate, self.weight_decay, self.epochs, self.batch_size, seed)
        nets = [init_he(enc, seed), init_he(dec, seed ^ 0x5DEECE66D)]
        (self.encoder_, self.decoder_), self.loss_curve_ = train_stack(nets, Xs, Xs, cfg)
        self.n_features_in_ = n_dof
        self.reconstruction_errors_ = relative_errors(self.inverse_transform(self.transform(X)), X)
        return self

    def transform(self, X):
        check_is_fitted(self, "encoder_")
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.n_features_in_:
            raise ShapeMismatch(f"expected {self.n_features_in_} dofs, got {X.shape[1]}")
        return forward(self.encoder_, self.scaler_.transform(X))

    def inverse_transform(self, Z):
        check_is_fitted(self, "decoder_")
        Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
        return self.scaler_.inverse_transform(forward(self.decoder_, Z))


def relative_errors(pred, ref):
    """Row-wise ``|pred - ref| / |ref|`` in the Euclidean norm."""
    num = np.linalg.norm(pred - ref, axis=1)
    den = np.linalg.norm(ref, axis=1)
    return num / np.where(den > 0, den, 1.0)


class ReducedOrderModel(RegressorMixin, BaseEstimator):
    """Parameters -> field surrogate: autoencoder plus RBF on the latent codes.

    ``fit(X, Y)`` takes parameter vectors ``X`` (``N x p``) and snapshots ``Y``
    (``N x n_dof``); ``predict`` returns one field per parameter row.
    """

    def __init__(
        self,
        hidden=(50, 20),
        latent_dim=3,
        activation="softplus",
        learning_rate=5e-4,
        weight_decay=1e-4,
        epochs=10000,
        batch_size="full",
        scaler="minmax",
        kernel="thin_plate",
        shape_epsilon=None,
        random_state=0,
    ):
        self.hidden = hidden
        self.latent_dim = latent_dim
        self.activation = activation
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.batch_size = batch_size
        self.scaler = scaler
        self.kernel = kernel
        self.shape_epsilon = shape_epsilon
        self.random_state = random_state

    def _autoencoder(self):
        return Autoencoder(
            self.hidden,
            self.latent_dim,
            self.activation,
            self.learning_rate,
            self.weight_decay,
            self.epochs,
            self.batch_size,
            self.scaler,
            self.random_state,
        )

    def fit(self, X, Y):
        X = check_array(X, ensure_min_samples=2)
        Y = check_array(Y, ensure_min_samples=2)
        if X.shape[0] != Y.shape[0]:
            raise ShapeMismatch(f"{X.shape[0]} parameter rows but {Y.shape[0]} snapshots")
        # validate the parameter set before paying for autoencoder training
        RBFInterpolator(self.kernel, self.shape_epsilon).fit(X, np.zeros(len(X)))
        self.autoencoder_ = self._autoencoder().fit(Y)
        self.latents_ = self.autoencoder_.transform(Y)
        self.rbf_ = RBFInterpolator(self.kernel, self.shape_epsilon).fit(X, self.latents_)
        self.reconstruction_errors_ = self.autoencoder_.reconstruction_errors_
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "rbf_")
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.n_features_in_:
            raise ShapeMismatch(f"expected {self.n_features_in_} parameters, got {X.shape[1]}")
        return self.autoencoder_.inverse_transform(np.atleast_2d(self.rbf_.predict(X)))


def rom_from_preset(preset="hills", **overrides):
    kwargs = dict(AE_PRESETS[preset])
    kwargs.update(overrides)
    return ReducedOrderModel(**kwargs)


def build_rom(snapshots, rom=None, source_tag=None):
    """Fit a ROM on a list of :class:`FieldSnapshot` sharing dofs and quantity.

    The fitted estimator additionally records ``training_params_``, ``mesh_``
    (mesh of the first snapshot), ``quantity_`` and ``source_tag_``.
    """
    S = assemble_matrix(snapshots)
    rom = rom_from_preset() if rom is None else rom
    rom.fit(S.parameter_array(), S.values.T)
    rom.training_params_ = tuple(S.params)
    rom.mesh_ = snapshots[0].mesh
    rom.quantity_ = snapshots[0].quantity
    rom.source_tag_ = source_tag if source_tag is not None else snapshots[0].model_tag
    return rom


def rom_predict(rom, mu_star, mesh=None):
    """Online evaluation at one parameter vector, as a tagged snapshot."""
    if not isinstance(mu_star, ParameterVector):
        mu_star = ParameterVector(mu_star, rom.training_params_[0].names)
    mesh = rom.mesh_ if mesh is None else mesh
    values = rom.predict(mu_star.as_array()[None, :])[0]
    return FieldSnapshot(mesh, values, mu_star, rom.quantity_, f"rom:{rom.source_tag_}")


# --------------------------------------------------------------------------
# Serialisation
# --------------------------------------------------------------------------


def rom_to_bytes(rom):
    check_is_fitted(rom, "rbf_")
    ae = rom.autoencoder_
    rbf_state = rom.rbf_.state()
    out = BlockWriter(ROM_MAGIC)
    out.json(
        {
            "estimator": {k: (list(v) if isinstance(v, tuple) else v) for k, v in rom.get_params().items()},
            "scaler": {"mode": ae.scaler_.mode, "scale": float(ae.scaler_.scale_)},
            "rbf": {k: v for k, v in rbf_state.items() if k != "arrays"},
            "source_tag": getattr(rom, "source_tag_", None),
            "quantity": getattr(rom, "quantity_", "Ux"),
            "param_names": list(rom.training_params_[0].names) if hasattr(rom, "training_params_") else None,
            "mesh_digest": rom.mesh_.digest() if hasattr(rom, "mesh_") else None,
            "mesh_shape": list(rom.mesh_.shape) if getattr(rom, "mesh_", None) is not None and rom.mesh_.shape else None,
        }
    )
    out.array(ae.scaler_.offset_)
    out.bytes(ae.encoder_.to_bytes())
    out.bytes(ae.decoder_.to_bytes())
    for arr in rbf_state["arrays"]:
        out.array(arr)
    out.array(rom.latents_)
    out.array(ae.reconstruction_errors_)
    if hasattr(rom, "training_params_"):
        out.array(np.array([p.values for p in rom.training_params_]))
        out.array(rom.mesh_.coords)
    return out.getvalue()


def rom_from_bytes(data):
    reader = BlockReader(data, ROM_MAGIC)
    meta = reader.json()
    params = dict(meta["estimator"])
    params["hidden"] = tuple(params["hidden"])
    rom = ReducedOrderModel(**params)
    ae = rom._autoencoder()
    ae.scaler_ = FieldScaler(meta["scaler"]["mode"])
    ae.scaler_.offset_ = reader.array()
    ae.scaler_.scale_ = meta["scaler"]["scale"]
    ae.scaler_.n_features_in_ = ae.scaler_.offset_.size
    ae.encoder_ = NetParams.from_bytes(reader.bytes())
    ae.decoder_ = NetParams.from_bytes(reader.bytes())
    ae.n_features_in_ = ae.encoder_.spec.n_inputs
    rbf = RBFInterpolator.from_state(meta["rbf"], [reader.array() for _ in range(5)])
    rom.autoencoder_ = ae
    rom.rbf_ = rbf
    rom.latents_ = reader.array()
    ae.reconstruction_errors_ = reader.array()
    rom.reconstruction_errors_ = ae.reconstruction_errors_
    rom.n_features_in_ = rbf.n_features_in_
    if meta["param_names"] is not None:
        names = meta["param_names"]
        rom.training_params_ = tuple(ParameterVector(row, names) for row in reader.array())
        shape = tuple(meta["mesh_shape"]) if meta["mesh_shape"] else None
        rom.mesh_ = Mesh(reader.array(), shape)
        rom.source_tag_ = meta["source_tag"]
        rom.quantity_ = meta["quantity"]
    return rom
