"""Command-line front end.

Every command reads one strict JSON run configuration (unknown keys are
rejected) and writes a JSON log of the resolved settings next to its outputs.
Errors exit with the code of their exception class.
"""

import json
import os
from pathlib import Path
import sys
import time
from typing import Literal, Optional, Union

import click
import numpy as np
from pydantic import BaseModel, ConfigDict, Field, PrivateAttr, ValidationError

from .evaluation import STATION_FRACTIONS, build_report
from .exceptions import ConfigError, IoError, ManifestError, MixromError, ShapeMismatch
from .grid import ParameterVector, load_manifest, save_snapshot, write_manifest
from .pipelines import PipelineConfig, SurrogateModel, build_surrogate, subseed
from .synth import SynthConfig, generate_mesh, make_dataset

THREADS_ENV = "MIXROM_THREADS"
BENCH_REPEATS = 31


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SynthSection(_Strict):
    preset: Literal["hills", "bump", "custom"] = "hills"
    n_x: int = Field(64, ge=4)
    n_y: int = Field(48, ge=4)
    n_models: int = Field(4, ge=1)
    model_tags: Optional[list[str]] = None
    binary: bool = False
    directory: str = "data"


class PipelineSection(_Strict):
    preset: Literal["hills", "bump"] = "hills"
    scale: Literal["full", "desk"] = "full"
    k: Optional[int] = Field(None, ge=1)
    sigma: Union[Literal["auto"], float] = "auto"
    rom: dict = Field(default_factory=dict)
    ann: dict = Field(default_factory=dict)


class EvalSection(_Strict):
    stations: list[float] = Field(default_factory=lambda: list(STATION_FRACTIONS))
    wall_offset: Optional[float] = None
    timing: bool = False


class RunConfig(_Strict):
    seed: int = 0
    output_dir: str = "run"
    manifest: Optional[str] = None
    synth: SynthSection = Field(default_factory=SynthSection)
    pipeline: PipelineSection = Field(default_factory=PipelineSection)
    eval: EvalSection = Field(default_factory=EvalSection)

    # directory that relative paths resolve against, set by load_config
    _base_dir: Path = PrivateAttr(default=Path("."))

    def path(self, value):
        p = Path(value)
        return p if p.is_absolute() else self._base_dir / p

    @property
    def out(self):
        return self.path(self.output_dir)

    @property
    def manifest_path(self):
        if self.manifest is not None:
            return self.path(self.manifest)
        return self.out / self.synth.directory / "manifest.json"

    def synth_config(self):
        kwargs = dict(n_x=self.synth.n_x, n_y=self.synth.n_y, n_models=self.synth.n_models)
        kwargs["seed"] = subseed(self.seed, "synth")
        if self.synth.model_tags is not None:
            kwargs["model_tags"] = tuple(self.synth.model_tags)
        try:
            return SynthConfig.from_preset(self.synth.preset, **kwargs)
        except (ValueError, MixromError) as exc:
            raise ConfigError(f"synth: {exc}") from None

    def pipeline_config(self, kind, weighting):
        p = self.pipeline
        return PipelineConfig(
            kind, weighting, p.preset, p.scale, p.k, p.sigma, dict(p.rom), dict(p.ann), self.seed, _threads()
        )


def _threads():
    raw = os.environ.get(THREADS_ENV)
    if raw is None:
        return 1
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None


def load_config(path):
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: cannot parse JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    try:
        cfg = RunConfig.model_validate(raw)
    except ValidationError as exc:
        problems = "; ".join(f"{'.'.join(str(p) for p in e['loc'])}: {e['msg']}" for e in exc.errors())
        raise ConfigError(f"{path}: {problems}") from None
    cfg._base_dir = path.resolve().parent
    if cfg.manifest is not None and not cfg.manifest_path.is_file():
        raise ManifestError(f"manifest not found: {cfg.manifest_path}")
    # validate the pipeline section eagerly so bad keys fail before any work
    cfg.pipeline_config("MFR", "knn")
    return cfg


def _write_json(path, data):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(data, indent=2, sort_keys=True, default=str) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from None
    return path


def _settings(cfg):
    data = cfg.model_dump(mode="json")
    data["resolved"] = {"output_dir": str(cfg.out), "manifest": str(cfg.manifest_path), "threads": _threads()}
    return data


def _run(fn):
    try:
        fn()
    except MixromError as exc:
        click.echo(f"error ({type(exc).__name__}): {exc}", err=True)
        sys.exit(exc.exit_code)


@click.group()
def main():
    """Mixture-of-models reduced order surrogates."""


@main.command("synth-generate")
@click.argument("config", type=click.Path(dir_okay=False))
def synth_generate(config):
    """Write the synthetic multi-model dataset and its manifest."""

    def run():
        cfg = load_config(config)
        synth = cfg.synth_config()
        dataset = make_dataset(synth)
        directory = cfg.out / cfg.synth.directory
        try:
            manifest = write_manifest(dataset, directory, binary=cfg.synth.binary)
        except OSError as exc:
            raise IoError(f"cannot write dataset to {directory}: {exc}") from None
        _write_json(directory / "synth_log.json", {"settings": _settings(cfg), "synth_seed": synth.seed})
        click.echo(str(manifest))

    _run(run)


@main.command()
@click.argument("config", type=click.Path(dir_okay=False))
@click.option("--pipeline", "kind", type=click.Choice(["mfr", "mr"], case_sensitive=False), required=True)
@click.option("--weighting", type=click.Choice(["knn", "ann"], case_sensitive=False), required=True)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), default=None, help="Bundle path.")
def train(config, kind, weighting, out_path):
    """Build an MFR or MR surrogate bundle from the dataset manifest."""

    def run():
        cfg = load_config(config)
        pcfg = cfg.pipeline_config(kind.upper(), weighting.lower())
        dataset = load_manifest(cfg.manifest_path)
        log = {}
        t0 = time.perf_counter()
        model = build_surrogate(dataset, pcfg, log=log)
        log["total_seconds"] = time.perf_counter() - t0
        bundle = Path(out_path) if out_path else cfg.out / f"{model.name}.mmix"
        model.save(bundle)
        _write_json(bundle.with_suffix(".log.json"), {"settings": _settings(cfg), "pipeline": pcfg.to_dict(), "build": log})
        click.echo(str(bundle))

    _run(run)


@main.command()
@click.argument("bundle", type=click.Path(dir_okay=False))
@click.option("--mu", "mu", type=float, multiple=True, required=True, help="Parameter value, repeat per dimension.")
@click.option("--mesh-from", "mesh_from", type=click.Path(dir_okay=False), default=None, help="Run config whose synthetic geometry defines the target mesh.")
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True)
def predict(bundle, mu, mesh_from, out_path):
    """Evaluate a surrogate at one parameter vector and save the field."""

    def run():
        model = SurrogateModel.load(bundle)
        names = model.param_names
        if len(mu) != len(names):
            raise ShapeMismatch(f"expected {len(names)} --mu values ({', '.join(names)}), got {len(mu)}")
        params = ParameterVector(mu, names)
        mesh = None
        if mesh_from is not None:
            mesh = generate_mesh(load_config(mesh_from).synth_config(), params)
        field = model.predict(params, mesh)
        try:
            save_snapshot(field, out_path)
        except OSError as exc:
            raise IoError(f"cannot write {out_path}: {exc}") from None
        _write_json(
            Path(out_path).with_suffix(".log.json"),
            {"bundle": str(bundle), "mu": list(mu), "mesh_from": mesh_from, "provenance": model.provenance},
        )
        click.echo(str(out_path))

    _run(run)


@main.command()
@click.argument("bundles", nargs=-1, required=True, type=click.Path(dir_okay=False))
@click.option("--config", "config", type=click.Path(dir_okay=False), required=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None)
def evaluate(bundles, config, out_dir):
    """Score bundles and the individual models on the test split."""

    def run():
        cfg = load_config(config)
        dataset = load_manifest(cfg.manifest_path)
        surrogates = {}
        for path in bundles:
            model = SurrogateModel.load(path)
            surrogates[model.name] = model
        report = build_report(
            surrogates, dataset.test, stations=cfg.eval.stations, wall_offset=cfg.eval.wall_offset, timing=cfg.eval.timing
        )
        directory = Path(out_dir) if out_dir else cfg.out / "report"
        report.export(directory)
        _write_json(directory / "evaluate_log.json", {"settings": _settings(cfg), "bundles": [str(b) for b in bundles]})
        click.echo(json.dumps(report.mean_errors, indent=2, sort_keys=True))

    _run(run)


def bench_latency(model, mu=None, mesh=None, repeats=BENCH_REPEATS):
    """Median wall time of ``model.predict`` over ``repeats`` calls (after one warm-up)."""
    mu = model.roms[next(iter(model.roms))].training_params_[0] if mu is None else mu
    model.predict(mu, mesh)
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        model.predict(mu, mesh)
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


@main.command()
@click.argument("bundles", nargs=-1, required=True, type=click.Path(dir_okay=False))
@click.option("--repeats", type=click.IntRange(1), default=BENCH_REPEATS, show_default=True)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), default=None)
def bench(bundles, repeats, out_path):
    """Median online latency of each bundle, plus the MR/MFR ratio."""

    def run():
        result = {"repeats": repeats, "latency_s": {}}
        for path in bundles:
            model = SurrogateModel.load(path)
            result["latency_s"][model.name] = bench_latency(model, repeats=repeats)
            result.setdefault("n_dof", model.default_mesh.n_dof)
        lat = result["latency_s"]
        mfr = [v for k, v in lat.items() if k.startswith("MFR")]
        mr = [v for k, v in lat.items() if k.startswith("MR")]
        if mfr and mr:
            result["mr_over_mfr"] = min(mr) / min(mfr)
        text = json.dumps(result, indent=2, sort_keys=True)
        if out_path:
            _write_json(out_path, result)
        click.echo(text)

    _run(run)


if __name__ == "__main__":
    main()
