"""End-to-end surrogates built from multi-model datasets.

``MFR`` aggregates the full-order model fields first and trains one ROM on the
mixed snapshots.  ``MR`` trains one ROM per model and mixes their predictions
online with a learned weight field.  Both return a :class:`SurrogateModel`
whose ``predict`` needs nothing but the parameters and a target mesh.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
import hashlib
import json
import os
from pathlib import Path
import time

import numpy as np
from sklearn.base import BaseEstimator

from ._binio import BlockReader, BlockWriter
from .aggregation import (
    ANN_PRESETS,
    KNN_PRESETS,
    AnnWeights,
    KnnWeights,
    WeightField,
    aggregate,
    ann_training_data,
    fit_knn_weights,
    predict_ann_weights,
    predict_knn_weights,
    reference_weights,
    resolve_sigma,
    sigma_trace,
)
from .densenet import NetParams
from .exceptions import ConfigError, EmptyInput, FormatError, IoError, ShapeMismatch
from .grid import Dataset, ParameterVector, load_manifest
from .rom import AE_PRESETS, build_rom, rom_from_bytes, rom_from_preset, rom_predict, rom_to_bytes

BUNDLE_MAGIC = b"MMIX"
KINDS = ("MFR", "MR")
WEIGHTINGS = ("knn", "ann")
SCALES = ("full", "desk")

# Reduced training budgets for desk-scale runs; the full presets stay the defaults.
DESK_OVERRIDES = {
    "rom": dict(epochs=2000, learning_rate=1e-3),
    "ann": dict(epochs=30, batch_size=256, learning_rate=1e-3),
}


def subseed(seed, name):
    """Deterministic 63-bit seed derived from a top-level seed and a component name."""
    digest = hashlib.sha256(f"{int(seed)}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


@dataclass(frozen=True)
class PipelineConfig:
    kind: str = "MFR"
    weighting: str = "knn"
    preset: str = "hills"
    scale: str = "full"
    k: int = None
    sigma: object = "auto"
    rom: dict = field(default_factory=dict)
    ann: dict = field(default_factory=dict)
    seed: int = 0
    n_jobs: int = 1

    def __post_init__(self):
        object.__setattr__(self, "kind", str(self.kind).upper())
        object.__setattr__(self, "weighting", str(self.weighting).lower())
        if self.kind not in KINDS:
            raise ConfigError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.weighting not in WEIGHTINGS:
            raise ConfigError(f"weighting must be one of {WEIGHTINGS}, got {self.weighting!r}")
        if self.preset not in AE_PRESETS or self.preset not in ANN_PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}")
        if self.scale not in SCALES:
            raise ConfigError(f"scale must be one of {SCALES}, got {self.scale!r}")
        if self.sigma != "auto" and not (isinstance(self.sigma, (int, float)) and self.sigma > 0):
            raise ConfigError(f"sigma must be 'auto' or positive, got {self.sigma!r}")
        if self.k is not None and int(self.k) < 1:
            raise ConfigError("k must be a positive integer")
        unknown = set(self.rom) - set(rom_from_preset(self.preset).get_params())
        if unknown:
            raise ConfigError(f"unknown rom settings: {sorted(unknown)}")
        unknown = set(self.ann) - set(AnnWeights().get_params())
        if unknown:
            raise ConfigError(f"unknown ann settings: {sorted(unknown)}")

    @property
    def k_neighbors(self):
        return int(self.k) if self.k is not None else KNN_PRESETS[self.preset]

    def rom_params(self, name):
        params = dict(AE_PRESETS[self.preset])
        if self.scale == "desk":
            params.update(DESK_OVERRIDES["rom"])
        params.update(self.rom)
        params["random_state"] = subseed(self.seed, f"ae:{name}")
        return params

    def ann_params(self):
        params = dict(ANN_PRESETS[self.preset])
        if self.scale == "desk":
            params.update(DESK_OVERRIDES["ann"])
        params.update(self.ann)
        params["random_state"] = subseed(self.seed, "ann-weights")
        return params

    def to_dict(self):
        out = asdict(self)
        out["rom"] = {k: list(v) if isinstance(v, tuple) else v for k, v in sorted(self.rom.items())}
        out["ann"] = {k: list(v) if isinstance(v, tuple) else v for k, v in sorted(self.ann.items())}
        return out

    def digest(self):
        # n_jobs does not change the result
        data = self.to_dict()
        data.pop("n_jobs")
        return hashlib.sha256(json.dumps(data, sort_keys=True).encode()).hexdigest()


# --------------------------------------------------------------------------
# Surrogate
# --------------------------------------------------------------------------


class SurrogateModel:
    """Immutable online surrogate: ROM(s) plus, for ``MR``, a weight model."""

    def __init__(self, kind, weighting, roms, model_tags, weight_model=None, provenance=None):
        self.kind = kind
        self.weighting = weighting
        self.roms = dict(roms)
        self.model_tags = tuple(model_tags)
        self.weight_model = weight_model
        self.provenance = dict(provenance or {})
        if kind == "MR":
            if tuple(self.roms) != self.model_tags:
                raise ShapeMismatch("MR surrogate needs exactly one ROM per model tag, in tag order")
            if weight_model is None:
                raise ValueError("MR surrogate needs a weight model")
        elif len(self.roms) != 1:
            raise ShapeMismatch("MFR surrogate holds a single ROM")

    @property
    def param_names(self):
        return next(iter(self.roms.values())).training_params_[0].names

    @property
    def default_mesh(self):
        return next(iter(self.roms.values())).mesh_

    def _mu(self, mu_star):
        if isinstance(mu_star, ParameterVector):
            return mu_star
        mu = np.atleast_1d(np.asarray(mu_star, dtype=np.float64))
        if mu.size != len(self.param_names):
            raise ShapeMismatch(f"expected {len(self.param_names)} parameters, got {mu.size}")
        return ParameterVector(mu, self.param_names)

    def weights(self, mu_star, mesh=None):
        """Weight field used by an ``MR`` surrogate at ``mu_star``."""
        mu = self._mu(mu_star)
        mesh = self.default_mesh if mesh is None else mesh
        if isinstance(self.weight_model, KnnWeights):
            return predict_knn_weights(self.weight_model, mu, mesh)
        if isinstance(self.weight_model, AnnWeights):
            return predict_ann_weights(self.weight_model, mesh, mu)
        return self.weight_model(mesh, mu)

    def predict(self, mu_star, mesh=None):
        mu = self._mu(mu_star)
        mesh = self.default_mesh if mesh is None else mesh
        if mesh.n_dof != self.default_mesh.n_dof:
            raise ShapeMismatch(f"mesh has {mesh.n_dof} dofs, surrogate was trained on {self.default_mesh.n_dof}")
        if self.kind == "MFR":
            out = rom_predict(next(iter(self.roms.values())), mu, mesh)
            return out.with_values(out.values, model_tag=f"MFR-{self.weighting}")
        fields = [rom_predict(self.roms[t], mu, mesh) for t in self.model_tags]
        mixed = aggregate(fields, self.weights(mu, mesh))
        return mixed.with_values(mixed.values, model_tag=f"MR-{self.weighting}")

    @property
    def name(self):
        return f"{self.kind}-{self.weighting}"

    # ----------------------------------------------------------------------
    def to_bytes(self):
        out = BlockWriter(BUNDLE_MAGIC)
        wm = self.weight_model
        wtype = None if wm is None else ("knn" if isinstance(wm, KnnWeights) else "ann")
        out.json(
            {
                "kind": self.kind,
                "weighting": self.weighting,
                "model_tags": list(self.model_tags),
                "rom_tags": list(self.roms),
                "provenance": self.provenance,
                "weight_model": wtype,
            }
        )
        for rom in self.roms.values():
            out.bytes(rom_to_bytes(rom))
        if wtype == "knn":
            out.json({"k": wm.k, "sigma": wm.sigma_, "model_tags": list(wm.model_tags_)})
            for arr in (wm.training_params_, wm.costs_):
                out.array(arr)
        elif wtype == "ann":
            params = {k: list(v) if isinstance(v, tuple) else v for k, v in wm.get_params().items()}
            out.json(
                {
                    "params": params,
                    "model_tags": list(wm.model_tags_),
                    "initial_loss": wm.initial_loss_,
                    "final_loss": wm.final_loss_,
                }
            )
            out.bytes(wm.net_.to_bytes())
            out.array(wm.lower_)
            out.array(wm.scale_)
        return out.getvalue()

    @classmethod
    def from_bytes(cls, data):
        reader = BlockReader(data, BUNDLE_MAGIC)
        head = reader.json()
        try:
            roms = {tag: rom_from_bytes(reader.bytes()) for tag in head["rom_tags"]}
            wm = None
            if head["weight_model"] == "knn":
                meta = reader.json()
                X, costs = reader.array(), reader.array()
                wm = KnnWeights(meta["k"]).fit(X, costs)
                wm.sigma_ = meta["sigma"]
                wm.model_tags_ = tuple(meta["model_tags"])
            elif head["weight_model"] == "ann":
                meta = reader.json()
                params = dict(meta["params"])
                params["hidden"] = tuple(params["hidden"])
                wm = AnnWeights(**params)
                wm.net_ = NetParams.from_bytes(reader.bytes())
                wm.lower_, wm.scale_ = reader.array(), reader.array()
                wm.n_features_in_ = wm.lower_.size
                wm.model_tags_ = tuple(meta["model_tags"])
                wm.initial_loss_, wm.final_loss_ = meta["initial_loss"], meta["final_loss"]
            return cls(head["kind"], head["weighting"], roms, head["model_tags"], wm, head["provenance"])
        except KeyError as exc:
            raise FormatError(f"bundle header misses {exc}") from None

    def save(self, path):
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_bytes(self.to_bytes())
        except OSError as exc:
            raise IoError(f"cannot write bundle {path}: {exc}") from None
        return path

    @classmethod
    def load(cls, path):
        try:
            data = Path(path).read_bytes()
        except OSError as exc:
            raise IoError(f"cannot read bundle {path}: {exc}") from None
        return cls.from_bytes(data)


# --------------------------------------------------------------------------
# Builders
# --------------------------------------------------------------------------


def _dataset(source):
    return source if isinstance(source, Dataset) else load_manifest(source)


def _provenance(cfg):
    prov = {"config_hash": cfg.digest(), "seed": int(cfg.seed), "config": cfg.to_dict()}
    prov["config"].pop("n_jobs")
    # a build time is only recorded when pinned, keeping bundles reproducible
    stamp = os.environ.get("SOURCE_DATE_EPOCH")
    if stamp is not None:
        prov["built_at"] = int(stamp)
    return prov


def fit_weight_model(dataset, cfg, log=None):
    """Weight model of the configured kind, fitted on reference-bearing training configs."""
    cases = dataset.reference_configs("train")
    if not cases:
        raise EmptyInput("no training configuration carries a reference field")
    log = {} if log is None else log
    tags = dataset.model_tags
    if cfg.weighting == "knn":
        model = fit_knn_weights(cases, cfg.k_neighbors, cfg.sigma, tags=tags)
        if cfg.sigma == "auto":
            grid, errors = sigma_trace([[c.fields[t] for t in tags] for c in cases], [c.reference for c in cases])
            log["sigma_trace"] = {"grid": grid.tolist(), "errors": errors.tolist()}
        log["sigma"] = model.sigma_
        return model
    model = AnnWeights(**cfg.ann_params()).fit(*ann_training_data(cases, tags))
    model.model_tags_ = tags
    log["ann_loss"] = {"uniform": model.initial_loss_, "final": model.final_loss_, "curve_len": len(model.loss_curve_)}
    return model


def _check_weight_model(model, cfg, tags):
    expected = KnnWeights if cfg.weighting == "knn" else AnnWeights
    if not isinstance(model, expected):
        raise ConfigError(f"{cfg.weighting} weighting needs a {expected.__name__} model")
    if tuple(model.model_tags_) != tuple(tags):
        raise ShapeMismatch("weight model tags do not match the dataset")


def mixed_training_snapshots(dataset, cfg, weight_model=None, log=None):
    """Aggregated full-order snapshots for every training configuration."""
    log = {} if log is None else log
    tags = dataset.model_tags
    if weight_model is None and (cfg.weighting == "ann" or any(c.reference is None for c in dataset.train)):
        weight_model = fit_weight_model(dataset, cfg, log)
    if cfg.weighting == "knn":
        if weight_model is not None:
            sigma = weight_model.sigma_
        else:
            sigma = resolve_sigma(cfg.sigma, dataset.reference_configs("train"), tags=tags)
        log["sigma"] = sigma
    snaps, sources = [], []
    for case in dataset.train:
        fields = [case.fields[t] for t in tags]
        if cfg.weighting == "knn" and case.reference is not None:
            w = reference_weights(case, sigma, tags)
            sources.append("ewa")
        elif cfg.weighting == "knn":
            w = predict_knn_weights(weight_model, case.params, case.mesh)
            sources.append("knn")
        else:
            w = predict_ann_weights(weight_model, case.mesh, case.params)
            sources.append("ann")
        snaps.append(aggregate(fields, w))
    log["mixed_sources"] = sources
    return snaps


def build_mfr(source, cfg=None, weight_model=None, log=None):
    """Aggregate the training fields, then fit a single ROM on the mixtures."""
    cfg = PipelineConfig(kind="MFR") if cfg is None else cfg
    dataset = _dataset(source)
    log = {} if log is None else log
    if weight_model is not None:
        _check_weight_model(weight_model, cfg, dataset.model_tags)
    t0 = time.perf_counter()
    snaps = mixed_training_snapshots(dataset, cfg, weight_model, log)
    rom = build_rom(snaps, rom_from_preset(**cfg.rom_params("mixed")), source_tag="mixed")
    log["reconstruction_errors"] = {"mixed": rom.reconstruction_errors_.tolist()}
    log["build_seconds"] = time.perf_counter() - t0
    return SurrogateModel("MFR", cfg.weighting, {"mixed": rom}, dataset.model_tags, provenance=_provenance(cfg))


def build_mr(source, cfg=None, weight_model=None, log=None):
    """Fit one ROM per model plus a weight model for online mixing."""
    cfg = PipelineConfig(kind="MR") if cfg is None else cfg
    dataset = _dataset(source)
    log = {} if log is None else log
    t0 = time.perf_counter()
    if weight_model is None:
        weight_model = fit_weight_model(dataset, cfg, log)
    else:
        _check_weight_model(weight_model, cfg, dataset.model_tags)

    def fit_one(tag):
        snaps = [c.fields[tag] for c in dataset.train]
        return build_rom(snaps, rom_from_preset(**cfg.rom_params(tag)), source_tag=tag)

    workers = max(1, int(cfg.n_jobs))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            roms = list(pool.map(fit_one, dataset.model_tags))
    else:
        roms = [fit_one(t) for t in dataset.model_tags]
    log["reconstruction_errors"] = {t: r.reconstruction_errors_.tolist() for t, r in zip(dataset.model_tags, roms)}
    log["build_seconds"] = time.perf_counter() - t0
    return SurrogateModel(
        "MR", cfg.weighting, dict(zip(dataset.model_tags, roms)), dataset.model_tags, weight_model, _provenance(cfg)
    )


def build_surrogate(source, cfg, weight_model=None, log=None):
    builder = build_mfr if cfg.kind == "MFR" else build_mr
    return builder(source, cfg, weight_model, log)


def predict(model, mu_star, mesh=None):
    return model.predict(mu_star, mesh)


class MixtureSurrogate(BaseEstimator):
    """Estimator front end: ``fit(dataset)`` then ``predict(params, meshes)``."""

    def __init__(
        self,
        kind="MFR",
        weighting="knn",
        preset="hills",
        scale="full",
        k=None,
        sigma="auto",
        rom_params=None,
        ann_params=None,
        random_state=0,
        n_jobs=1,
    ):
        self.kind = kind
        self.weighting = weighting
        self.preset = preset
        self.scale = scale
        self.k = k
        self.sigma = sigma
        self.rom_params = rom_params
        self.ann_params = ann_params
        self.random_state = random_state
        self.n_jobs = n_jobs

    def config(self):
        return PipelineConfig(
            self.kind,
            self.weighting,
            self.preset,
            self.scale,
            self.k,
            self.sigma,
            dict(self.rom_params or {}),
            dict(self.ann_params or {}),
            self.random_state,
            self.n_jobs,
        )

    def fit(self, dataset, y=None):
        self.build_log_ = {}
        self.model_ = build_surrogate(dataset, self.config(), log=self.build_log_)
        return self

    def predict(self, X, meshes=None):
        """One predicted value array per parameter row (``n_q x n_dof``)."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        meshes = [None] * len(X) if meshes is None else list(meshes)
        if len(meshes) != len(X):
            raise ShapeMismatch("one mesh per parameter row required")
        return np.stack([self.model_.predict(mu, mesh).values for mu, mesh in zip(X, meshes)])


def constant_weight_model(weights, model_tags):
    """Weight model returning the same per-dof weights for every query."""
    field_ = np.asarray(weights, dtype=np.float64)

    def model(mesh, mu):
        return WeightField(field_, model_tags, mesh)

    return model

