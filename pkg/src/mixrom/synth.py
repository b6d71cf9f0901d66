"""Deterministic synthetic stand-in for a family of RANS/DNS solutions.

The reference streamwise velocity is a wall-bounded shear profile modulated by
a separation bubble whose reattachment abscissa has a closed form.  Each
"turbulence model" field adds a smooth bias to the reference:

* biases of models ``0, 2, 4, ...`` share the sign of ``sin(2 pi zeta)`` and
  models ``1, 3, 5, ...`` the opposite sign, so at every dof at least one bias
  is non-negative and one non-positive;
* every bias is even in ``zeta -> 1 - zeta`` apart from the odd factor
  ``sin(2 pi zeta)``, and the wall-normal grid is symmetric, hence each bias
  has zero mean over the dofs;
* model ``i`` is nearly exact inside its own region (a streamwise band crossed
  with the near-wall or core layer), so each model dominates somewhere else.

``zeta`` is the normalised wall-normal coordinate, 0 on the lower wall and 1 on
the upper wall.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import OutOfRange, ShapeMismatch
from .grid import ConfigData, Dataset, FieldSnapshot, Mesh, ParameterVector

DEFAULT_TAGS = ("SA", "kEpsilon", "kOmega", "kOmegaSST")

HILLS_HEIGHT = 3.036
HILLS_OFFSETS = (2.142, 5.142, 8.142)
# streamwise extent of one curved hill segment at alpha = 1, in crest heights
HILL_SEGMENT = 1.929

# near-wall layer in which the bubble factor is exactly the wall value
_LAYER_LO, _LAYER_HI = 0.05, 0.35
_GRADING = 2.0
_REGION_WIDTH = 0.04
_EXACT_FRACTION = 0.05


def hills_length(alpha, c=5.142):
    """Streamwise extent ``L_x/H = 3.858 alpha + c`` of the periodic-hill family."""
    return 3.858 * alpha + c


_PRESETS = {
    "hills": {
        "param_ranges": (("alpha", (0.5, 1.5)), ("Lx_over_H", (4.0, 14.0))),
        "bias_amplitudes": (0.30, 0.40, 0.35, 0.45),
        "latent_dim": 3,
    },
    "bump": {
        "param_ranges": (("h_mm", (13.0, 49.0)),),
        "bias_amplitudes": (0.25, 0.35, 0.30, 0.40),
        "latent_dim": 10,
    },
    "custom": {
        "param_ranges": (("Lx_over_H", (6.0, 12.0)), ("bubble_depth", (0.0, 3.0))),
        "bias_amplitudes": (0.30, 0.40, 0.35, 0.45),
        "latent_dim": 3,
    },
}


@dataclass(frozen=True)
class SynthConfig:
    n_x: int = 64
    n_y: int = 48
    param_ranges: tuple = _PRESETS["hills"]["param_ranges"]
    n_models: int = 4
    bias_amplitudes: tuple = _PRESETS["hills"]["bias_amplitudes"]
    seed: int = 0
    preset: str = "hills"
    model_tags: tuple = field(default=None)

    def __post_init__(self):
        if self.preset not in _PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}")
        if self.n_x < 4 or self.n_y < 4:
            raise ValueError("n_x and n_y must be at least 4")
        if self.n_models < 1:
            raise ValueError("n_models must be at least 1")
        amps = tuple(float(a) for a in self.bias_amplitudes)
        if len(amps) != self.n_models:
            raise ShapeMismatch(f"{len(amps)} bias amplitudes for {self.n_models} models")
        object.__setattr__(self, "bias_amplitudes", amps)
        ranges = tuple((str(n), (float(lo), float(hi))) for n, (lo, hi) in self.param_ranges)
        object.__setattr__(self, "param_ranges", ranges)
        expected = [n for n, _ in _PRESETS[self.preset]["param_ranges"]]
        if [n for n, _ in ranges] != expected:
            raise ValueError(f"preset {self.preset!r} expects parameters {expected}")
        tags = self.model_tags
        if tags is None:
            tags = DEFAULT_TAGS[: self.n_models] if self.n_models <= 4 else tuple(
                f"model{i}" for i in range(self.n_models)
            )
        tags = tuple(tags)
        if len(tags) != self.n_models or len(set(tags)) != len(tags):
            raise ValueError("model_tags must be n_models distinct labels")
        object.__setattr__(self, "model_tags", tags)

    @classmethod
    def from_preset(cls, preset="hills", **overrides):
        base = _PRESETS[preset]
        kwargs = {
            "preset": preset,
            "param_ranges": base["param_ranges"],
            "bias_amplitudes": base["bias_amplitudes"],
        }
        kwargs.update(overrides)
        if "n_models" in overrides and "bias_amplitudes" not in overrides:
            amps = base["bias_amplitudes"]
            kwargs["bias_amplitudes"] = tuple(amps[i % len(amps)] for i in range(overrides["n_models"]))
        return cls(**kwargs)

    @property
    def param_names(self):
        return tuple(n for n, _ in self.param_ranges)

    @property
    def n_dof(self):
        return self.n_x * self.n_y

    @property
    def latent_dim(self):
        return _PRESETS[self.preset]["latent_dim"]

    def params(self, *values):
        return ParameterVector(values, self.param_names)


@dataclass(frozen=True, eq=False)
class SynthCase:
    params: ParameterVector
    mesh: Mesh
    reference: FieldSnapshot
    model_fields: tuple
    x_r_true: float = None


# --------------------------------------------------------------------------
# Geometry
# --------------------------------------------------------------------------


def _check(config, params):
    if tuple(params.names) != config.param_names:
        raise ShapeMismatch(f"expected parameters {config.param_names}, got {params.names}")
    for name, (lo, hi) in config.param_ranges:
        v = params[name]
        if not lo - 1e-12 <= v <= hi + 1e-12:
            raise OutOfRange(name, v, (lo, hi))


def _geometry(config, params):
    """Return ``(L_x, L_y, wall(x))`` for the preset."""
    if config.preset == "hills":
        alpha, lx = params["alpha"], params["Lx_over_H"]
        seg = HILL_SEGMENT * alpha

        def wall(x):
            y = np.zeros_like(x)
            up = x < seg
            y[up] = 0.5 * (1.0 + np.cos(np.pi * x[up] / seg))
            down = x > lx - seg
            y[down] = 0.5 * (1.0 + np.cos(np.pi * (lx - x[down]) / seg))
            return y

        return lx, HILLS_HEIGHT, wall
    if config.preset == "bump":
        hb = params["h_mm"] / 150.0

        def wall(x):
            t = np.clip((x - 1.0) / 0.4, -1.0, 1.0)
            return hb * np.cos(0.5 * np.pi * t) ** 2

        return 3.0, 1.0, wall
    return params["Lx_over_H"], HILLS_HEIGHT, np.zeros_like


def _stretched(n):
    t = np.linspace(0.0, 1.0, n)
    zeta = 0.5 * (1.0 + np.tanh(_GRADING * (2.0 * t - 1.0)) / np.tanh(_GRADING))
    # enforce exact mirror symmetry so odd functions of zeta - 1/2 average to zero
    zeta = 0.5 * (zeta + (1.0 - zeta[::-1]))
    return zeta


def _normalised(config, params):
    lx, ly, wall = _geometry(config, params)
    xi = np.linspace(0.0, 1.0, config.n_x)
    zeta = _stretched(config.n_y)
    x = xi * lx
    yw = wall(x)
    X = np.repeat(x[:, None], config.n_y, axis=1)
    Y = yw[:, None] + (ly - yw[:, None]) * zeta[None, :]
    XI = np.repeat(xi[:, None], config.n_y, axis=1)
    Z = np.repeat(zeta[None, :], config.n_x, axis=0)
    return X, Y, XI, Z


def generate_mesh(config, params):
    """Tensor-product grid between the lower wall profile and a flat top wall."""
    _check(config, params)
    X, Y, _, _ = _normalised(config, params)
    return Mesh(np.column_stack([X.ravel(), Y.ravel()]), (config.n_x, config.n_y))


# --------------------------------------------------------------------------
# Reference field
# --------------------------------------------------------------------------


def _bubble(config, params):
    """Bubble start, width and depth; the flow separates iff depth > 1."""
    if config.preset == "hills":
        alpha, lx = params["alpha"], params["Lx_over_H"]
        seg = HILL_SEGMENT * alpha
        return 0.5 * seg, 0.53 * (lx - seg), 1.0 + 4.0 * (1.6 - alpha)
    if config.preset == "bump":
        h = params["h_mm"]
        return 1.1, 0.45 + 0.01 * (h - 13.0), ((h - 13.0) / 10.0) ** 1.2
    lx = params["Lx_over_H"]
    return 0.1 * lx, 0.45 * lx, params["bubble_depth"]


def _bubble_shape(x, start, width):
    t = np.clip((x - start) / width, 0.0, 1.0)
    return np.sin(np.pi * t) ** 2


def _smoothstep(t):
    t = np.clip(t, 0.0, 1.0)
    return t**3 * (10.0 - 15.0 * t + 6.0 * t * t)


def _bulk_scale(config, params):
    if config.preset == "hills":
        return 1.0 + 0.1 * (params["alpha"] - 1.0) - 0.01 * (params["Lx_over_H"] - 9.0)
    if config.preset == "bump":
        return 1.0 + 0.004 * (params["h_mm"] - 31.0)
    return 1.0


def _reference_values(config, params, X, Z):
    start, width, depth = _bubble(config, params)
    b = depth * _bubble_shape(X, start, width)
    # same sign as 1 - depth*shape, bounded in (-1, 1]
    q = (1.0 - b) / (1.0 + b)
    layer = 1.0 - _smoothstep((Z - _LAYER_LO) / (_LAYER_HI - _LAYER_LO))
    shear = 1.1 * (1.0 - (2.0 * Z - 1.0) ** 6)
    return _bulk_scale(config, params) * shear * ((1.0 - layer) + layer * q)


def true_reattachment(config, params):
    """Closed-form reattachment abscissa of the reference, or ``None`` when attached."""
    _check(config, params)
    start, width, depth = _bubble(config, params)
    if depth <= 1.0:
        return None
    return start + width * (1.0 - math.asin(1.0 / math.sqrt(depth)) / math.pi)


# --------------------------------------------------------------------------
# Model biases
# --------------------------------------------------------------------------


def _region_cuts(config, params):
    """Streamwise band boundaries; jittered by the seed, shifted smoothly by params."""
    n_bands = (config.n_models + 1) // 2
    rng = np.random.default_rng([int(config.seed) & 0xFFFFFFFFFFFFFFFF, 7])
    jitter = rng.uniform(-0.04, 0.04, size=max(n_bands - 1, 0))
    phases = rng.uniform(0.0, 2.0 * np.pi, size=config.n_models)
    shift = 0.03 * (_bulk_scale(config, params) - 1.0) / 0.1
    cuts = np.arange(1, n_bands) / n_bands + jitter + shift
    return cuts, phases


def region_membership(config, params, XI, Z):
    """Soft indicator ``(n_models, n_x, n_y)`` of each model's home region."""
    cuts, _ = _region_cuts(config, params)
    edges = np.concatenate([[-np.inf], cuts, [np.inf]])
    rho = np.abs(2.0 * Z - 1.0)
    near_wall = 1.0 / (1.0 + np.exp(-(rho - 0.5) / _REGION_WIDTH))
    out = np.empty((config.n_models,) + XI.shape)
    for i in range(config.n_models):
        band = i // 2
        lo, hi = edges[band], edges[band + 1]
        inside = 1.0
        if np.isfinite(lo):
            inside = inside / (1.0 + np.exp(-(XI - lo) / _REGION_WIDTH))
        if np.isfinite(hi):
            inside = inside / (1.0 + np.exp((XI - hi) / _REGION_WIDTH))
        layer = near_wall if i % 2 == 0 else 1.0 - near_wall
        out[i] = inside * layer
    return out


def _biases(config, params, XI, Z):
    member = region_membership(config, params, XI, Z)
    _, phases = _region_cuts(config, params)
    odd = np.sin(2.0 * np.pi * Z)
    odd = 0.5 * (odd - odd[:, ::-1])
    scale = _bulk_scale(config, params)
    out = []
    for i, amp in enumerate(config.bias_amplitudes):
        sign = 1.0 if i % 2 == 0 else -1.0
        magnitude = _EXACT_FRACTION + (1.0 - _EXACT_FRACTION) * (1.0 - member[i])
        wiggle = 1.0 + 0.2 * np.sin(2.0 * np.pi * XI + phases[i])
        bias = sign * amp * scale * magnitude * wiggle * odd
        out.append(0.5 * (bias - bias[:, ::-1]))
    return out


def generate_case(config, params):
    _check(config, params)
    X, Y, XI, Z = _normalised(config, params)
    mesh = Mesh(np.column_stack([X.ravel(), Y.ravel()]), (config.n_x, config.n_y))
    ref = _reference_values(config, params, X, Z)
    reference = FieldSnapshot(mesh, ref.ravel(), params, "Ux", "reference")
    fields = tuple(
        FieldSnapshot(mesh, (ref + bias).ravel(), params, "Ux", tag)
        for tag, bias in zip(config.model_tags, _biases(config, params, XI, Z))
    )
    return SynthCase(params, mesh, reference, fields, true_reattachment(config, params))


def region_masks(config, params):
    """Boolean ``(n_models, n_dof)`` masks where each model's membership exceeds 1/2."""
    _check(config, params)
    _, _, XI, Z = _normalised(config, params)
    return region_membership(config, params, XI, Z).reshape(config.n_models, -1) > 0.5


# --------------------------------------------------------------------------
# Default parameter splits
# --------------------------------------------------------------------------


def default_splits(config):
    """``(train, with_reference, test)`` parameter lists mirroring the two studies."""
    P = config.params
    if config.preset == "hills":
        train = [P(a, hills_length(a, c)) for a in (0.5, 1.0, 1.5) for c in HILLS_OFFSETS]
        test = [P(a, hills_length(a)) for a in (0.75, 1.25)]
        return train, list(train), test
    if config.preset == "bump":
        train = [P(h) for h in np.linspace(13.0, 49.0, 10)]
        mix = [P(h) for h in (21.0, 33.0, 41.0)]
        test = [P(26.0), P(38.0)]
        return train, mix, test
    train = [P(lx, d) for lx in (6.0, 9.0, 12.0) for d in (0.0, 1.5, 3.0)]
    test = [P(7.5, 0.75), P(10.5, 2.25)]
    return train, list(train), test


def make_dataset(config, splits=None):
    """Generate every case of the splits as a :class:`~mixrom.grid.Dataset`."""
    train, mix, test = splits if splits is not None else default_splits(config)
    mix_keys = {p.values for p in mix}

    def entry(p, with_ref):
        case = generate_case(config, p)
        fields = dict(zip(config.model_tags, case.model_fields))
        return ConfigData(p, fields, case.reference if with_ref else None)

    return Dataset(
        config.param_names,
        config.model_tags,
        tuple(entry(p, p.values in mix_keys) for p in train),
        tuple(entry(p, True) for p in test),
    )
