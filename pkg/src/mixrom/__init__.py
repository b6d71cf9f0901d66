"""Mixtures of model fields and autoencoder reduced order surrogates."""

from .aggregation import (
    AnnWeights,
    KnnWeights,
    WeightField,
    aggregate,
    ewa_weights,
    gaussian_cost,
    select_sigma,
)
from .evaluation import build_report, extract_profile, reattachment_point, relative_l2
from .grid import Dataset, FieldSnapshot, Mesh, ParameterVector, load_manifest, load_snapshot, save_snapshot
from .pipelines import MixtureSurrogate, PipelineConfig, SurrogateModel, build_mfr, build_mr
from .rbf import RBFInterpolator
from .rom import Autoencoder, FieldScaler, ReducedOrderModel, build_rom, rom_predict
from .synth import SynthConfig, make_dataset

__version__ = "0.1.0"

__all__ = [
    "AnnWeights",
    "Autoencoder",
    "Dataset",
    "FieldScaler",
    "FieldSnapshot",
    "KnnWeights",
    "Mesh",
    "MixtureSurrogate",
    "ParameterVector",
    "PipelineConfig",
    "RBFInterpolator",
    "ReducedOrderModel",
    "SurrogateModel",
    "SynthConfig",
    "WeightField",
    "aggregate",
    "build_mfr",
    "build_mr",
    "build_report",
    "build_rom",
    "ewa_weights",
    "extract_profile",
    "gaussian_cost",
    "load_manifest",
    "load_snapshot",
    "make_dataset",
    "reattachment_point",
    "relative_l2",
    "rom_predict",
    "save_snapshot",
    "select_sigma",
]
