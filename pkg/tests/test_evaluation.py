import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mixrom.evaluation import (
    build_report,
    coverage_fraction,
    envelope,
    extract_profile,
    near_wall_line,
    reattachment_error,
    reattachment_point,
    relative_l2,
)
from mixrom.exceptions import EmptyInput, OutOfDomain, ShapeMismatch, ZeroReference
from mixrom.grid import Mesh
from mixrom.synth import SynthConfig, make_dataset

from conftest import snapshot, structured_mesh


def test_relative_l2_cases():
    ref = np.array([1.0, -2.0, 3.0])
    assert relative_l2(ref, ref) == 0.0
    assert relative_l2(1.1 * ref, ref) == pytest.approx(0.1, abs=1e-12)
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal(5), rng.standard_normal(5)
    direct = np.sqrt(sum((x - y) ** 2 for x, y in zip(a, b)) / sum(y * y for y in b))
    assert relative_l2(a, b) == pytest.approx(direct, rel=1e-14)
    with pytest.raises(ZeroReference):
        relative_l2(ref, np.zeros(3))
    with pytest.raises(ShapeMismatch):
        relative_l2(ref, np.ones(4))


@given(
    arrays(np.float64, 6, elements=st.floats(0.5, 10)),
    arrays(np.float64, 6, elements=st.floats(-1, 1)),
    st.floats(-50, 50),
)
def test_relative_l2_homogeneous(ref, e, c):
    assert relative_l2(ref + c * e, ref) == pytest.approx(abs(c) * relative_l2(ref + e, ref), rel=1e-9, abs=1e-14)


def test_profile_constant_and_linear(mesh):
    prof = extract_profile(snapshot(np.full(mesh.n_dof, 2.5), mesh), 1.3, n_samples=17)
    assert prof.shape == (17, 2)
    np.testing.assert_array_equal(prof[:, 1], 2.5)
    prof = extract_profile(snapshot(mesh.y.copy(), mesh), 1.3)
    assert np.all(np.diff(prof[:, 0]) > 0)
    np.testing.assert_allclose(prof[:, 1], prof[:, 0], atol=1e-10)


def test_profile_unstructured_linear(mesh):
    flat = Mesh(mesh.coords)
    prof = extract_profile(snapshot(mesh.y.copy(), flat), 1.3)
    np.testing.assert_allclose(prof[:, 1], prof[:, 0], atol=1e-10)


def test_profile_out_of_domain(mesh):
    with pytest.raises(OutOfDomain):
        extract_profile(snapshot(np.zeros(mesh.n_dof), mesh), 3.5)


def _wall_field(u_of_x, n_x=61):
    mesh = structured_mesh(n_x, 5, lx=6.0, ly=1.0)
    return snapshot(u_of_x(mesh.x) * (1 + mesh.y), mesh)


def test_reattachment_root_oracle():
    # reversed flow on (2, 5), forward elsewhere
    f = _wall_field(lambda x: -(x - 2) * (5 - x))
    assert reattachment_point(f) == pytest.approx(5.0, abs=0.1)


def test_reattachment_absent_when_attached():
    assert reattachment_point(_wall_field(lambda x: 1.0 + x)) is None


def test_reattachment_no_recovery_and_offset():
    f = _wall_field(lambda x: 1.0 - x)
    assert reattachment_point(f) is None
    g = _wall_field(lambda x: -(x - 2) * (5 - x))
    assert reattachment_point(g, wall_offset=0.3) == pytest.approx(5.0, abs=0.1)
    with pytest.raises(OutOfDomain):
        near_wall_line(g, wall_offset=2.0)


def test_reattachment_relative_error_arithmetic():
    assert reattachment_error(4.25, 4.33) == pytest.approx(0.019, abs=1e-3)
    assert reattachment_error(None, 4.33) is None


def test_envelope_and_coverage(mesh):
    ref = snapshot(np.sin(mesh.x), mesh)
    same = [ref, ref]
    lo, hi = envelope(same)
    np.testing.assert_array_equal(lo, hi)
    assert coverage_fraction(lo, hi, ref) == 1.0
    assert coverage_fraction(lo, hi, ref.values + 1e-3) == 0.0
    lo, hi = envelope([ref.values - 1, ref.values + 1])
    assert coverage_fraction(lo, hi, ref) == 1.0
    with pytest.raises(EmptyInput):
        envelope([])


@given(st.integers(0, 2**31 - 1))
def test_coverage_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    ref = rng.standard_normal(30)
    fields = [ref + rng.standard_normal(30) for _ in range(4)]
    base = coverage_fraction(*envelope(fields), ref)
    perm = rng.permutation(4)
    assert coverage_fraction(*envelope([fields[i] for i in perm]), ref) == base


class _Exact:
    """Returns the stored reference, standing in for a perfect surrogate."""

    def __init__(self, cases):
        self.by_params = {c.params: c.reference for c in cases}

    def predict(self, mu, mesh=None):
        return self.by_params[mu]


@pytest.fixture(scope="module")
def hills():
    return make_dataset(SynthConfig.from_preset("hills", n_x=16, n_y=10))


def test_empty_report():
    report = build_report({}, [])
    assert report.data["configs"] == [] and report.mean_errors == {}


def test_report_contents_and_determinism(tmp_path, hills):
    a = build_report({"exact": _Exact(hills.test)}, hills.test)
    b = build_report({"exact": _Exact(hills.test)}, hills.test)
    assert a.to_json() == b.to_json()
    assert a.mean_errors["exact"] == 0.0
    assert min(a.mean_errors, key=a.mean_errors.get) == "exact"
    assert a.data["rows"][:4] == [f"model:{t}" for t in hills.model_tags]
    for entry in a.data["reattachment"]:
        assert entry["rows"]["exact"]["x_r"] == entry["reference"]
    files = a.export(tmp_path)
    names = sorted(p.name for p in files)
    assert "report.json" in names and "errmap_exact_000.csv" in names and "profile_exact_001_s2.csv" in names
    assert (tmp_path / "errmap_exact_000.csv").read_text().startswith("x,y,abs_err\n")
    assert "timings" not in a.data
    assert "timings" in build_report({"exact": _Exact(hills.test)}, hills.test, timing=True).data


class _Attached(_Exact):
    def predict(self, mu, mesh=None):
        ref = self.by_params[mu]
        return ref.with_values(np.abs(ref.values) + 1.0)


def test_report_absent_reattachment_is_null(hills):
    report = build_report({"attached": _Attached(hills.test)}, hills.test)
    for entry in report.data["reattachment"]:
        assert entry["rows"]["attached"] == {"x_r": None, "relative_error": None}
    assert '"x_r": null' in report.to_json()
