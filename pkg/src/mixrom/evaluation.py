"""Error metrics, profile extraction, reattachment detection and report export."""

from dataclasses import dataclass, field
import json
import math
from pathlib import Path
import re
import time

import numpy as np

from .exceptions import EmptyInput, IoError, OutOfDomain, ShapeMismatch, ZeroReference
from .grid import FieldSnapshot, interpolate_points

REPORT_VERSION = 1
PROFILE_SAMPLES = 50
STATION_FRACTIONS = (0.25, 0.5, 0.75)


def _values(f):
    return f.values if isinstance(f, FieldSnapshot) else np.asarray(f, dtype=np.float64)


def relative_l2(pred, ref):
    """``||pred - ref|| / ||ref||`` over all dofs."""
    p, r = _values(pred), _values(ref)
    if p.shape != r.shape:
        raise ShapeMismatch(f"prediction shape {p.shape} differs from reference shape {r.shape}")
    den = np.linalg.norm(r)
    if den == 0:
        raise ZeroReference("reference field has zero norm")
    return float(np.linalg.norm(p - r) / den)


def _columns(field):
    """Structured ``(X, Y, V)`` arrays of shape ``(n_x, n_y)``."""
    g = field.mesh.grid()
    return g[..., 0], g[..., 1], field.values.reshape(field.mesh.shape)


def extract_profile(field, station_x, n_samples=PROFILE_SAMPLES):
    """``(y, value)`` samples along the vertical line ``x = station_x``, wall to top.

    On structured meshes each grid line is interpolated linearly at the
    station, then values are interpolated in ``y``; elsewhere a piecewise-linear
    triangulation of the mesh is used.
    """
    x = field.mesh.x
    if not x.min() <= station_x <= x.max():
        raise OutOfDomain(f"station x={station_x} outside [{x.min()}, {x.max()}]")
    if field.mesh.shape is not None:
        X, Y, V = _columns(field)
        ys = np.array([np.interp(station_x, X[:, j], Y[:, j]) for j in range(X.shape[1])])
        vs = np.array([np.interp(station_x, X[:, j], V[:, j]) for j in range(X.shape[1])])
        y = np.linspace(ys[0], ys[-1], n_samples)
        return np.column_stack([y, np.interp(y, ys, vs)])
    lo = field.mesh.y[np.abs(x - station_x) <= np.ptp(x) / 100].min(initial=field.mesh.y.min())
    y = np.linspace(lo, field.mesh.y.max(), n_samples)
    pts = np.column_stack([np.full(n_samples, float(station_x)), y])
    return np.column_stack([y, interpolate_points(field, pts, method="linear")])


def near_wall_line(field, wall_offset=None):
    """Streamwise coordinates and values along a line parallel to the lower wall.

    Without an offset the first grid line off the wall is used; otherwise
    values are interpolated along each wall-normal column at
    ``y_wall + wall_offset``.
    """
    X, Y, V = _columns(field)
    if wall_offset is None:
        if X.shape[1] < 2:
            raise OutOfDomain("mesh has no grid line off the wall")
        return X[:, 1], V[:, 1]
    heights = Y[:, -1] - Y[:, 0]
    if wall_offset < 0 or np.any(wall_offset > heights):
        raise OutOfDomain(f"wall offset {wall_offset} lies outside the mesh")
    u = np.array([np.interp(Y[i, 0] + wall_offset, Y[i], V[i]) for i in range(X.shape[0])])
    return X[:, 0], u


def reattachment_point(field, wall_offset=None):
    """Streamwise position where near-wall flow turns forward again, or ``None``.

    The detector finds the last positive-to-negative change along the
    near-wall line (or the inlet when the line starts reversed) and returns
    the first following negative-to-positive crossing, located by linear
    interpolation.  ``None`` means no reversed flow, or no recovery before
    the outlet.
    """
    x, u = near_wall_line(field, wall_offset)
    neg = u < 0
    if not neg.any():
        return None
    onsets = np.flatnonzero(~neg[:-1] & neg[1:]) + 1
    start = onsets[-1] if onsets.size else int(np.argmax(neg))
    after = np.flatnonzero(neg[start:-1] & ~neg[start + 1 :])
    if after.size == 0:
        return None
    i = start + after[0]
    x0, x1, u0, u1 = x[i], x[i + 1], u[i], u[i + 1]
    return float(x0 - u0 * (x1 - x0) / (u1 - u0))


def reattachment_error(value, reference):
    """Relative error of a reattachment point; ``None`` if either side is absent."""
    if value is None or reference is None:
        return None
    return abs(value - reference) / abs(reference)


def envelope(fields):
    """Pointwise minimum and maximum over model fields."""
    if not fields:
        raise EmptyInput("envelope of no fields")
    vals = [_values(f) for f in fields]
    if len({v.shape for v in vals}) != 1:
        raise ShapeMismatch("fields differ in dof count")
    stack = np.stack(vals)
    return stack.min(axis=0), stack.max(axis=0)


def coverage_fraction(lower, upper, ref):
    r = _values(ref)
    if r.shape != np.shape(lower):
        raise ShapeMismatch("reference and envelope differ in dof count")
    return float(np.mean((lower <= r) & (r <= upper)))


# --------------------------------------------------------------------------
# Reports
# --------------------------------------------------------------------------


def _json(obj, indent=0):
    """Deterministic JSON: sorted keys, floats with 17 significant digits, NaN as null."""
    pad, inner = "  " * indent, "  " * (indent + 1)
    if obj is None or (isinstance(obj, float) and not math.isfinite(obj)):
        return "null"
    if isinstance(obj, bool):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        text = format(float(obj), ".17g")
        return text if any(c in text for c in ".e") else text + ".0"
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f'{inner}{_json(str(k))}: {_json(obj[k], indent + 1)}' for k in sorted(obj)]
        return "{\n" + ",\n".join(items) + "\n" + pad + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        if len(obj) == 0:
            return "[]"
        if any(isinstance(v, (dict, list, tuple)) for v in obj):
            items = [inner + _json(v, indent + 1) for v in obj]
            return "[\n" + ",\n".join(items) + "\n" + pad + "]"
        return "[" + ", ".join(_json(v, indent + 1) for v in obj) + "]"
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def _slug(name):
    return re.sub(r"[^A-Za-z0-9._-]+", "_", name)


@dataclass
class EvalReport:
    data: dict
    error_maps: dict = field(default_factory=dict)
    profiles: dict = field(default_factory=dict)

    @property
    def mean_errors(self):
        return self.data["mean_errors"]

    def to_json(self):
        return _json(self.data) + "\n"

    def export(self, directory):
        """Write ``report.json`` plus error-map and profile CSV files."""
        directory = Path(directory)
        written = []
        try:
            directory.mkdir(parents=True, exist_ok=True)
            path = directory / "report.json"
            path.write_text(self.to_json())
            written.append(path)
            for (name, n), rows in sorted(self.error_maps.items()):
                path = directory / f"errmap_{_slug(name)}_{n:03d}.csv"
                lines = ["x,y,abs_err"] + [f"{x:.17g},{y:.17g},{e:.17g}" for x, y, e in rows]
                path.write_text("\n".join(lines) + "\n")
                written.append(path)
            for (name, n, s), rows in sorted(self.profiles.items()):
                path = directory / f"profile_{_slug(name)}_{n:03d}_s{s}.csv"
                lines = ["y,value"] + [f"{y:.17g},{v:.17g}" for y, v in rows]
                path.write_text("\n".join(lines) + "\n")
                written.append(path)
        except OSError as exc:
            raise IoError(f"cannot write report to {directory}: {exc}") from None
        return written


def build_report(surrogates, cases, baselines=None, stations=STATION_FRACTIONS, wall_offset=None, timing=False):
    """Evaluate surrogates and baseline model fields on reference-bearing cases.

    ``surrogates`` maps names to objects with ``predict(params, mesh)``.
    ``baselines`` lists model tags whose stored fields are scored as
    ``model:<tag>`` rows (default: all tags of the first case).  Profile
    ``stations`` are fractions of each case's streamwise extent.  Wall-clock
    timings are only included when ``timing`` is set, since they break
    byte-for-byte reproducibility.
    """
    cases = [c for c in cases if c.reference is not None]
    surrogates = dict(surrogates)
    if baselines is None:
        baselines = tuple(cases[0].fields) if cases else ()
    names = [f"model:{t}" for t in baselines] + list(surrogates)
    per_config, reattach, error_maps, profiles = [], [], {}, {}
    timings = {name: [] for name in surrogates}
    for n, case in enumerate(cases):
        preds = {f"model:{t}": case.fields[t] for t in baselines}
        for name, model in surrogates.items():
            t0 = time.perf_counter()
            preds[name] = model.predict(case.params, case.mesh)
            timings[name].append(time.perf_counter() - t0)
        ref = case.reference
        per_config.append(
            {"params": list(case.params.values), "errors": {k: relative_l2(p, ref) for k, p in preds.items()}}
        )
        x_ref = reattachment_point(ref, wall_offset) if ref.mesh.shape is not None else None
        rows = {}
        for k, p in preds.items():
            x_r = reattachment_point(p, wall_offset) if p.mesh.shape is not None else None
            rows[k] = {"x_r": x_r, "relative_error": reattachment_error(x_r, x_ref)}
        reattach.append({"params": list(case.params.values), "reference": x_ref, "rows": rows})
        xs = ref.mesh.x
        for s, frac in enumerate(stations):
            station = xs.min() + frac * np.ptp(xs)
            profiles[("reference", n, s)] = extract_profile(ref, station)
            for k, p in preds.items():
                profiles[(k, n, s)] = extract_profile(p, station)
        for k, p in preds.items():
            error_maps[(k, n)] = np.column_stack([ref.mesh.coords, np.abs(p.values - ref.values)])
    means = {k: float(np.mean([c["errors"][k] for c in per_config])) for k in names} if per_config else {}
    data = {
        "version": REPORT_VERSION,
        "rows": names,
        "configs": per_config,
        "mean_errors": means,
        "reattachment": reattach,
        "stations": list(stations),
    }
    if timing:
        data["timings"] = {k: float(np.median(v)) if v else None for k, v in timings.items()}
    return EvalReport(data, error_maps, profiles)
