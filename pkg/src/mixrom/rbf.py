"""Radial basis function interpolation from parameters to latent vectors."""

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .exceptions import ShapeMismatch, SingularSystem

KERNELS = ("thin_plate", "gaussian", "multiquadric")


def kernel_matrix(kernel, r, epsilon):
    if kernel == "thin_plate":
        with np.errstate(divide="ignore", invalid="ignore"):
            out = r * r * np.log(r)
        out[r == 0.0] = 0.0
        return out
    if kernel == "gaussian":
        return np.exp(-((epsilon * r) ** 2))
    if kernel == "multiquadric":
        return np.sqrt(1.0 + (epsilon * r) ** 2)
    raise ValueError(f"unknown kernel {kernel!r}")


def _distances(a, b):
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


class RBFInterpolator(RegressorMixin, BaseEstimator):
    """Interpolate ``Y`` (``N x r``) over parameter vectors ``X`` (``N x p``).

    Parameters are rescaled to ``[0, 1]`` per dimension using the training
    min/max before distances are taken.  ``thin_plate`` carries a linear
    polynomial tail with the usual orthogonality constraints; when the centres
    do not span all ``p + 1`` affine directions the tail is restricted to the
    directions they do span.

    Attributes
    ----------
    coef_ : ndarray of shape (N, r)
    tail_ : ndarray of shape (p + 1, r)
        Affine tail coefficients in normalised coordinates, zero unless
        ``kernel="thin_plate"``.
    residual_ : float
        Max-norm residual of the dense interpolation solve.
    condition_ : float
        2-norm condition number of the interpolation system.
    """

    def __init__(self, kernel="thin_plate", shape_epsilon=None, min_separation=1e-10, max_condition=1e14):
        self.kernel = kernel
        self.shape_epsilon = shape_epsilon
        self.min_separation = min_separation
        self.max_condition = max_condition

    def _epsilon(self, R):
        if self.shape_epsilon is not None:
            return float(self.shape_epsilon)
        if R.shape[0] < 2:
            return 1.0
        nearest = np.where(np.eye(R.shape[0], dtype=bool), np.inf, R).min(axis=1)
        # kernel width of half the mean centre spacing keeps the system well conditioned
        return float(2.0 / nearest.mean())

    def _normalise(self, X):
        return (X - self.lower_) / self.scale_

    def fit(self, X, Y):
        if self.kernel not in KERNELS:
            raise ValueError(f"unknown kernel {self.kernel!r}")
        if self.shape_epsilon is not None and not self.shape_epsilon > 0:
            raise ValueError("shape_epsilon must be positive")
        X = check_array(X, ensure_min_samples=1)
        Y = np.asarray(Y, dtype=np.float64)
        self._single_output = Y.ndim == 1
        Y = Y.reshape(len(Y), -1) if Y.ndim == 1 else Y
        if Y.shape[0] != X.shape[0]:
            raise ShapeMismatch(f"{X.shape[0]} centres but {Y.shape[0]} target rows")
        n, p = X.shape
        self.lower_ = X.min(axis=0)
        span = X.max(axis=0) - self.lower_
        self.scale_ = np.where(span > 0, span, 1.0)
        C = self._normalise(X)
        R = _distances(C, C)
        if n > 1:
            off = R[~np.eye(n, dtype=bool)]
            if off.min() <= self.min_separation:
                raise SingularSystem(f"duplicate or near-duplicate centres (min distance {off.min():.3e})", np.inf)
        self.epsilon_ = self._epsilon(R)
        A = kernel_matrix(self.kernel, R, self.epsilon_)
        if self.kernel == "thin_plate":
            P = np.column_stack([np.ones(n), C])
            _, s, vt = np.linalg.svd(P, full_matrices=False)
            rank = int(np.sum(s > s[0] * 1e-10))
            basis = vt[:rank].T
            Pr = P @ basis
            M = np.block([[A, Pr], [Pr.T, np.zeros((rank, rank))]])
            rhs = np.vstack([Y, np.zeros((rank, Y.shape[1]))])
        else:
            basis = np.zeros((p + 1, 0))
            M, rhs = A, Y
        self.condition_ = float(np.linalg.cond(M))
        if not np.isfinite(self.condition_) or self.condition_ > self.max_condition:
            raise SingularSystem(f"interpolation system is ill-conditioned (cond {self.condition_:.3e})", self.condition_)
        try:
            sol = np.linalg.solve(M, rhs)
        except np.linalg.LinAlgError as exc:
            raise SingularSystem(f"interpolation system is singular: {exc}", self.condition_) from None
        self.residual_ = float(np.max(np.abs(M @ sol - rhs)))
        self.coef_ = sol[:n]
        self.tail_ = basis @ sol[n:] if basis.shape[1] else np.zeros((p + 1, Y.shape[1]))
        self.centers_ = C
        self.n_features_in_ = p
        return self

    def predict(self, X):
        check_is_fitted(self, "coef_")
        X = np.asarray(X, dtype=np.float64)
        single = X.ndim == 1
        X = np.atleast_2d(X)
        if X.shape[1] != self.n_features_in_:
            raise ShapeMismatch(f"expected {self.n_features_in_} parameters, got {X.shape[1]}")
        Z = self._normalise(X)
        out = kernel_matrix(self.kernel, _distances(Z, self.centers_), self.epsilon_) @ self.coef_
        out = out + np.column_stack([np.ones(len(Z)), Z]) @ self.tail_
        if self._single_output:
            out = out[:, 0]
        return out[0] if single else out

    # plain-array state for bundle serialisation
    def state(self):
        return {
            "kernel": self.kernel,
            "epsilon": self.epsilon_,
            "single_output": bool(self._single_output),
            "arrays": [self.lower_, self.scale_, self.centers_, self.coef_, self.tail_],
        }

    @classmethod
    def from_state(cls, meta, arrays):
        obj = cls(meta["kernel"], meta["epsilon"])
        obj.epsilon_ = meta["epsilon"]
        obj.lower_, obj.scale_, obj.centers_, obj.coef_, obj.tail_ = arrays
        obj._single_output = meta["single_output"]
        obj.n_features_in_ = obj.centers_.shape[1]
        obj.residual_ = obj.condition_ = float("nan")
        return obj
