"""Meshes, field snapshots, snapshot matrices and their file formats.

Fields are point clouds: a :class:`Mesh` is ``n_dof`` coordinate pairs,
optionally tagged with a structured ``(n_x, n_y)`` shape.  For structured
meshes dof ``k`` sits at column ``i = k // n_y`` and row ``j = k % n_y``,
with ``j = 0`` on the lower wall.
"""

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.interpolate import LinearNDInterpolator
from scipy.spatial import cKDTree

from .exceptions import (
    EmptyInput,
    FormatError,
    IoError,
    ManifestError,
    MixedDofCount,
    OutOfDomain,
    ShapeMismatch,
)

SNAPSHOT_MAGIC = b"MROM"
SNAPSHOT_VERSION = 1


def _frozen(arr):
    arr = np.array(arr, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ParameterVector:
    values: tuple
    names: tuple

    def __post_init__(self):
        values = tuple(float(v) for v in self.values)
        names = tuple(str(n) for n in self.names)
        if len(values) < 1:
            raise ShapeMismatch("parameter vector must have at least one entry")
        if len(values) != len(names):
            raise ShapeMismatch(f"{len(names)} names for {len(values)} values")
        if not all(math.isfinite(v) for v in values):
            raise ValueError(f"non-finite parameter value in {values}")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "names", names)

    def __len__(self):
        return len(self.values)

    def __getitem__(self, name):
        return self.values[self.names.index(name)]

    def as_array(self):
        return np.array(self.values, dtype=np.float64)


@dataclass(frozen=True, eq=False)
class Mesh:
    coords: np.ndarray
    shape: tuple = None

    def __post_init__(self):
        coords = _frozen(self.coords)
        if coords.ndim != 2 or coords.shape[1] != 2 or coords.shape[0] < 1:
            raise ShapeMismatch(f"coords must be (n_dof, 2), got {coords.shape}")
        if not np.all(np.isfinite(coords)):
            raise ValueError("mesh coordinates must be finite")
        object.__setattr__(self, "coords", coords)
        if self.shape is not None:
            shape = tuple(int(s) for s in self.shape)
            if len(shape) != 2 or shape[0] * shape[1] != coords.shape[0]:
                raise ShapeMismatch(f"grid shape {shape} does not match n_dof={coords.shape[0]}")
            object.__setattr__(self, "shape", shape)

    @property
    def n_dof(self):
        return self.coords.shape[0]

    @property
    def x(self):
        return self.coords[:, 0]

    @property
    def y(self):
        return self.coords[:, 1]

    def grid(self):
        """Coordinates as an ``(n_x, n_y, 2)`` array; structured meshes only."""
        if self.shape is None:
            raise ShapeMismatch("mesh has no structured grid shape")
        return self.coords.reshape(self.shape[0], self.shape[1], 2)

    def digest(self):
        h = hashlib.sha256(np.ascontiguousarray(self.coords, dtype="<f8").tobytes())
        h.update(repr(self.shape).encode())
        return h.hexdigest()

    def __eq__(self, other):
        if not isinstance(other, Mesh):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.coords, other.coords)

    __hash__ = None


@dataclass(frozen=True, eq=False)
class FieldSnapshot:
    mesh: Mesh
    values: np.ndarray
    params: ParameterVector
    quantity: str = "Ux"
    model_tag: str = "reference"

    def __post_init__(self):
        values = _frozen(self.values).ravel()
        if values.shape[0] != self.mesh.n_dof:
            raise ShapeMismatch(
                f"field has {values.shape[0]} values for a mesh of {self.mesh.n_dof} dofs"
            )
        if not np.all(np.isfinite(values)):
            raise ValueError("field values must be finite")
        object.__setattr__(self, "values", values)

    @property
    def n_dof(self):
        return self.mesh.n_dof

    def with_values(self, values, model_tag=None):
        return FieldSnapshot(
            self.mesh,
            values,
            self.params,
            self.quantity,
            self.model_tag if model_tag is None else model_tag,
        )

    def __eq__(self, other):
        if not isinstance(other, FieldSnapshot):
            return NotImplemented
        return (
            self.mesh == other.mesh
            and np.array_equal(self.values, other.values)
            and self.params == other.params
            and self.quantity == other.quantity
            and self.model_tag == other.model_tag
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class SnapshotMatrix:
    """Column-stacked snapshot values, ``n_dof x N``."""

    values: np.ndarray
    params: tuple = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "values", _frozen(self.values))
        object.__setattr__(self, "params", tuple(self.params))
        if self.values.ndim != 2 or len(self.params) != self.values.shape[1]:
            raise ShapeMismatch("one parameter vector per column is required")

    @property
    def shape(self):
        return self.values.shape

    def column(self, j):
        return self.values[:, j]

    def parameter_array(self):
        return np.array([p.values for p in self.params], dtype=np.float64)


def assemble_matrix(snapshots):
    """Stack snapshot values as the columns of a :class:`SnapshotMatrix`."""
    snapshots = list(snapshots)
    if not snapshots:
        raise EmptyInput("cannot assemble a snapshot matrix from no snapshots")
    n_dof = snapshots[0].n_dof
    quantity = snapshots[0].quantity
    for k, s in enumerate(snapshots):
        if s.n_dof != n_dof:
            raise MixedDofCount(f"snapshot {k} has {s.n_dof} dofs, expected {n_dof}")
        if s.quantity != quantity:
            raise ShapeMismatch(f"snapshot {k} holds {s.quantity!r}, expected {quantity!r}")
    values = np.stack([s.values for s in snapshots], axis=1)
    return SnapshotMatrix(values, tuple(s.params for s in snapshots))


# --------------------------------------------------------------------------
# Snapshot files
# --------------------------------------------------------------------------

_REQUIRED = ("quantity", "model_tag", "param_names", "param_values", "n_dof")


def _header(s):
    head = {
        "quantity": s.quantity,
        "model_tag": s.model_tag,
        "param_names": ",".join(s.params.names),
        "param_values": ",".join(repr(v) for v in s.params.values),
        "n_dof": str(s.n_dof),
    }
    if s.mesh.shape is not None:
        head["grid_shape"] = f"{s.mesh.shape[0]},{s.mesh.shape[1]}"
    return head


def save_snapshot(s, path, binary=None):
    """Write ``s`` to ``path``; binary when ``binary`` is true or the suffix is ``.bin``."""
    path = Path(path)
    if binary is None:
        binary = path.suffix == ".bin"
    try:
        if binary:
            path.write_bytes(_snapshot_bytes(s))
        else:
            lines = ["# mixrom snapshot v1"]
            lines += [f"{k}: {v}" for k, v in _header(s).items()]
            lines.append("---")
            rows = np.column_stack([s.mesh.coords, s.values]).tolist()
            lines += [f"{x!r} {y!r} {v!r}" for x, y, v in rows]
            path.write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write snapshot {path}: {exc}") from exc


def _snapshot_bytes(s):
    head = json.dumps(_header(s), sort_keys=True).encode()
    data = np.column_stack([s.mesh.coords, s.values]).astype("<f8")
    return (
        SNAPSHOT_MAGIC
        + struct.pack("<BI", SNAPSHOT_VERSION, len(head))
        + head
        + data.tobytes()
    )


def _from_header(head, triplets, where):
    for key in _REQUIRED:
        if key not in head:
            raise FormatError(f"{where}: missing header field {key!r}")
    try:
        n_dof = int(head["n_dof"])
    except ValueError:
        raise FormatError(f"{where}: header field 'n_dof' is not an integer") from None
    names = [n for n in head["param_names"].split(",") if n]
    try:
        values = [float(v) for v in head["param_values"].split(",") if v.strip()]
    except ValueError:
        raise FormatError(f"{where}: header field 'param_values' is not numeric") from None
    if len(names) != len(values) or not names:
        raise FormatError(f"{where}: param_names and param_values disagree")
    if not all(math.isfinite(v) for v in values):
        raise FormatError(f"{where}: non-finite value in header field 'param_values'")
    if triplets.shape[0] != n_dof:
        raise FormatError(f"{where}: expected {n_dof} data rows, found {triplets.shape[0]}")
    bad = np.nonzero(~np.all(np.isfinite(triplets), axis=1))[0]
    if bad.size:
        raise FormatError(f"{where}: non-finite value in data row {bad[0] + 1}")
    shape = None
    if "grid_shape" in head:
        try:
            shape = tuple(int(v) for v in head["grid_shape"].split(","))
        except ValueError:
            raise FormatError(f"{where}: malformed header field 'grid_shape'") from None
    try:
        mesh = Mesh(triplets[:, :2], shape)
    except ShapeMismatch as exc:
        raise FormatError(f"{where}: {exc}") from None
    return FieldSnapshot(
        mesh,
        triplets[:, 2],
        ParameterVector(values, names),
        head["quantity"],
        head["model_tag"],
    )


def load_snapshot(path):
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read snapshot {path}: {exc}") from exc
    if raw[:4] == SNAPSHOT_MAGIC:
        return _load_binary(raw, path)
    return _load_text(raw, path)


def _load_binary(raw, path):
    if len(raw) < 9:
        raise FormatError(f"{path}: truncated binary header")
    version, n_head = struct.unpack_from("<BI", raw, 4)
    if version != SNAPSHOT_VERSION:
        raise FormatError(f"{path}: unsupported snapshot version {version}")
    try:
        head = json.loads(raw[9 : 9 + n_head].decode())
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise FormatError(f"{path}: corrupt binary header") from None
    body = raw[9 + n_head :]
    if len(body) % 24:
        raise FormatError(f"{path}: binary body is not a whole number of triplets")
    triplets = np.frombuffer(body, dtype="<f8").reshape(-1, 3).astype(np.float64)
    return _from_header(head, triplets, str(path))


def _load_text(raw, path):
    try:
        lines = raw.decode().splitlines()
    except UnicodeDecodeError:
        raise FormatError(f"{path}: not a text snapshot") from None
    head = {}
    k = 0
    while k < len(lines) and lines[k].strip() != "---":
        line = lines[k].strip()
        k += 1
        if not line or line.startswith("#"):
            continue
        key, sep, val = line.partition(":")
        if not sep:
            raise FormatError(f"{path}:{k}: malformed header line {line!r}")
        head[key.strip()] = val.strip()
    if k == len(lines):
        raise FormatError(f"{path}: missing '---' header terminator")
    rows = []
    for lineno, line in enumerate(lines[k + 1 :], start=k + 2):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 3:
            raise FormatError(f"{path}:{lineno}: expected 'x y value', got {line!r}")
        try:
            row = [float(p) for p in parts]
        except ValueError:
            raise FormatError(f"{path}:{lineno}: non-numeric entry in {line!r}") from None
        if not all(math.isfinite(v) for v in row):
            raise FormatError(f"{path}:{lineno}: non-finite value")
        rows.append(row)
    triplets = np.array(rows, dtype=np.float64).reshape(-1, 3)
    return _from_header(head, triplets, str(path))


# --------------------------------------------------------------------------
# Interpolation between meshes
# --------------------------------------------------------------------------


def _domain_check(source_xy, target_xy, margin):
    lo = source_xy.min(axis=0) - margin
    hi = source_xy.max(axis=0) + margin
    outside = np.nonzero(np.any((target_xy < lo) | (target_xy > hi), axis=1))[0]
    if outside.size:
        raise OutOfDomain(
            f"{outside.size} target points lie outside the source domain "
            f"(first: {target_xy[outside[0]].tolist()})",
            points=outside,
        )


def idw_weights(source_xy, target_xy, k=4):
    """Neighbour indices and inverse-distance weights, exact on coincident points."""
    k = min(k, source_xy.shape[0])
    dist, idx = cKDTree(source_xy).query(target_xy, k=k)
    dist = dist.reshape(len(target_xy), k)
    idx = idx.reshape(len(target_xy), k)
    hit = dist[:, 0] == 0.0
    with np.errstate(divide="ignore"):
        w = 1.0 / dist
    w[hit] = 0.0
    w[hit, 0] = 1.0
    w /= w.sum(axis=1, keepdims=True)
    return idx, w


def interpolate_points(source, target_xy, method="idw", k_geo=4, margin=0.0):
    """Values of the ``source`` snapshot at arbitrary ``(m, 2)`` points."""
    target_xy = np.asarray(target_xy, dtype=np.float64).reshape(-1, 2)
    src = source.mesh.coords
    extent = float(np.ptp(src, axis=0).max()) or 1.0
    _domain_check(src, target_xy, margin + 1e-12 * extent)
    if method == "idw":
        idx, w = idw_weights(src, target_xy, k_geo)
        return np.sum(source.values[idx] * w, axis=1)
    if method == "linear":
        out = LinearNDInterpolator(src, source.values)(target_xy)
        miss = ~np.isfinite(out)
        if miss.any():
            idx, w = idw_weights(src, target_xy[miss], k_geo)
            out[miss] = np.sum(source.values[idx] * w, axis=1)
        return out
    raise ValueError(f"unknown interpolation method {method!r}")


def interpolate_to_mesh(source, target, method="idw", k_geo=4, margin=0.0):
    """Map ``source`` onto ``target`` mesh.

    The default is inverse-distance weighting over the ``k_geo`` nearest source
    points; ``method="linear"`` uses piecewise-linear interpolation on a
    Delaunay triangulation of the source points.
    """
    if source.mesh == target:
        return FieldSnapshot(target, source.values, source.params, source.quantity, source.model_tag)
    values = interpolate_points(source, target.coords, method, k_geo, margin)
    return FieldSnapshot(target, values, source.params, source.quantity, source.model_tag)


# --------------------------------------------------------------------------
# Dataset manifests
# --------------------------------------------------------------------------

MANIFEST_VERSION = 1


@dataclass(frozen=True)
class ConfigData:
    """All fields available for one parameter configuration."""

    params: ParameterVector
    fields: dict
    reference: FieldSnapshot = None

    @property
    def mesh(self):
        return next(iter(self.fields.values())).mesh


@dataclass(frozen=True)
class Dataset:
    param_names: tuple
    model_tags: tuple
    train: tuple
    test: tuple = ()
    quantity: str = "Ux"

    def reference_configs(self, split="train"):
        return [c for c in getattr(self, split) if c.reference is not None]


def write_manifest(dataset, directory, binary=False):
    """Save every snapshot of ``dataset`` under ``directory`` plus ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ext = ".bin" if binary else ".txt"
    splits = {}
    for split in ("train", "test"):
        entries = []
        for n, cfg in enumerate(getattr(dataset, split)):
            paths = {}
            snaps = dict(cfg.fields)
            if cfg.reference is not None:
                snaps["reference"] = cfg.reference
            for tag, snap in snaps.items():
                name = f"{split}_{n:03d}_{tag}{ext}"
                save_snapshot(snap, directory / name, binary=binary)
                paths[tag] = name
            entries.append({"params": list(cfg.params.values), "fields": paths})
        splits[split] = entries
    manifest = {
        "version": MANIFEST_VERSION,
        "quantity": dataset.quantity,
        "param_names": list(dataset.param_names),
        "model_tags": list(dataset.model_tags),
        "splits": splits,
    }
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_manifest(path):
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
    except FileNotFoundError:
        raise ManifestError(f"manifest not found: {path}") from None
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from None
    for key in ("param_names", "model_tags", "splits"):
        if key not in manifest:
            raise ManifestError(f"{path}: missing key {key!r}")
    names = tuple(manifest["param_names"])
    tags = tuple(manifest["model_tags"])
    splits = {}
    for split in ("train", "test"):
        configs = []
        for n, entry in enumerate(manifest["splits"].get(split, [])):
            files = entry.get("fields", {})
            missing = [t for t in tags if t not in files]
            if missing:
                raise ManifestError(f"{path}: {split}[{n}] lacks fields for {missing}")
            snaps = {t: load_snapshot(path.parent / files[t]) for t in tags}
            ref = None
            if "reference" in files:
                ref = load_snapshot(path.parent / files["reference"])
            params = ParameterVector(entry["params"], names)
            configs.append(ConfigData(params, snaps, ref))
        splits[split] = tuple(configs)
    if not splits["train"]:
        raise ManifestError(f"{path}: empty training split")
    return Dataset(names, tags, splits["train"], splits["test"], manifest.get("quantity", "Ux"))
