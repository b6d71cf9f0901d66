import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mixrom.aggregation import (
    ANN_PRESETS,
    AnnWeights,
    KnnWeights,
    WeightField,
    aggregate,
    ann_inputs,
    aggregation_loss,
    ewa_weights,
    fit_knn_weights,
    gaussian_cost,
    predict_ann_weights,
    predict_knn_weights,
    resolve_sigma,
    select_sigma,
    sigma_trace,
    train_ann_weights,
)
from mixrom.evaluation import relative_l2
from mixrom.exceptions import EmptyGrid, KTooLarge, NonPositiveSigma, ShapeMismatch
from mixrom.grid import ConfigData, ParameterVector

from conftest import snapshot, structured_mesh


def test_cost_identity_and_sigma_point(mesh):
    ref = snapshot(np.sin(mesh.x), mesh)
    np.testing.assert_array_equal(gaussian_cost(ref, ref, 0.3), 1.0)
    pred = ref.with_values(ref.values + 0.3)
    np.testing.assert_allclose(gaussian_cost(pred, ref, 0.3), np.exp(-0.5), rtol=1e-14)


def test_cost_large_sigma_and_errors(mesh):
    ref = snapshot(np.cos(mesh.y), mesh)
    pred = ref.with_values(ref.values + 1.0)
    np.testing.assert_allclose(gaussian_cost(pred, ref, 1e9), 1.0, atol=1e-12)
    with pytest.raises(NonPositiveSigma):
        gaussian_cost(pred, ref, 0.0)
    with pytest.raises(ShapeMismatch):
        gaussian_cost(np.zeros(3), np.zeros(4), 1.0)


def test_ewa_hand_values():
    w = ewa_weights([[np.exp(-0.5), 1.0, 1.0], [np.exp(-2.0), 1.0, 0.0]]).weights
    np.testing.assert_allclose(w[0], [0.8176, 0.1824], atol=1e-4)
    np.testing.assert_array_equal(w[1], [0.5, 0.5])
    np.testing.assert_array_equal(w[2], [1.0, 0.0])


def test_ewa_uniform_fallback():
    w = ewa_weights([[1e-301, 0.2], [0.0, 0.2], [1e-305, 0.1]]).weights
    np.testing.assert_array_equal(w[0], [1 / 3] * 3)
    np.testing.assert_allclose(w[1], [0.4, 0.4, 0.2])


def test_ewa_shape_errors():
    with pytest.raises(ShapeMismatch):
        ewa_weights([[1.0, 1.0], [1.0]])
    with pytest.raises(ShapeMismatch):
        WeightField(np.ones((3, 2)), ("a",))


@given(
    st.lists(st.floats(0, 10), min_size=2, max_size=5),
    st.floats(1e-2, 5),
    st.integers(0, 4),
    st.floats(0, 1),
)
def test_ewa_monotone_in_own_error(errors, sigma, which, shrink):
    which %= len(errors)
    cost = lambda e: np.exp(-np.asarray(e) ** 2 / (2 * sigma**2))
    before = ewa_weights(cost(errors)[:, None]).weights[0, which]
    smaller = list(errors)
    smaller[which] *= shrink
    after = ewa_weights(cost(smaller)[:, None]).weights[0, which]
    assert after >= before - 1e-15


@given(arrays(np.float64, (6, 3), elements=st.floats(1e-3, 1)), st.floats(1e-6, 1e6))
def test_ewa_scale_invariance(costs, factor):
    a = ewa_weights(costs.T).weights
    b = ewa_weights((factor * costs).T).weights
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


def _two_model_case(mesh, mu=1.0, split=1.5):
    ref = snapshot(1.0 + mesh.x * mesh.y + mu, mesh, params=(mu,))
    bump = np.exp(-((mesh.y - 1.0) ** 2))
    a = ref.with_values(ref.values + np.where(mesh.x < split, 0.0, 0.5 * bump), model_tag="A")
    b = ref.with_values(ref.values + np.where(mesh.x < split, -0.5 * bump, 0.0), model_tag="B")
    return ConfigData(ref.params, {"A": a, "B": b}, ref)


def test_select_sigma_single_model_takes_largest(mesh):
    case = _two_model_case(mesh)
    grid = [0.01, 0.1, 1.0]
    assert select_sigma([[case.fields["A"]]], [case.reference], grid) == 1.0


def test_select_sigma_single_grid_value_and_empty(mesh):
    case = _two_model_case(mesh)
    fields = [[case.fields["A"], case.fields["B"]]]
    assert select_sigma(fields, [case.reference], [0.37]) == 0.37
    with pytest.raises(EmptyGrid):
        select_sigma(fields, [case.reference], [])


def test_select_sigma_dominance_oracle(mesh):
    ref = snapshot(2.0 + np.sin(mesh.x), mesh)
    exact = ref.with_values(ref.values.copy())
    off = ref.with_values(ref.values + 0.3 * np.cos(mesh.y))
    grid, errs = sigma_trace([[exact, off]], [ref])
    sigma = select_sigma([[exact, off]], [ref])
    assert errs[np.flatnonzero(grid == sigma)[0]] <= 1e-8


def test_resolve_sigma_explicit(mesh):
    assert resolve_sigma(0.5, []) == 0.5
    with pytest.raises(NonPositiveSigma):
        resolve_sigma(-1.0, [])


def _knn_cases(mesh, mus):
    return [_two_model_case(mesh, mu, split=0.5 + mu) for mu in mus]


def test_knn_k1_identity(mesh):
    cases = _knn_cases(mesh, [0.0, 1.0, 2.0])
    model = fit_knn_weights(cases, k=1, sigma=0.2)
    for c in cases:
        costs = np.stack([gaussian_cost(c.fields[t], c.reference, 0.2) for t in "AB"], axis=1)
        expected = costs / costs.sum(axis=1, keepdims=True)
        np.testing.assert_array_equal(predict_knn_weights(model, c.params).weights, expected)


def test_knn_k2_equidistant_mean():
    rng = np.random.default_rng(0)
    X = np.array([[0.0], [2.0], [10.0]])
    costs = rng.random((3, 7, 2))
    w = KnnWeights(2).fit(X, costs).predict([[1.0]])[0]
    mean = 0.5 * (costs[0] + costs[1])
    np.testing.assert_allclose(w, mean / mean.sum(axis=1, keepdims=True), rtol=0, atol=1e-15)


def test_knn_k_too_large(mesh):
    with pytest.raises(KTooLarge):
        fit_knn_weights(_knn_cases(mesh, [0.0, 1.0, 2.0]), k=4, sigma=0.2)
    with pytest.raises(ShapeMismatch):
        KnnWeights(1).fit([[0.0], [1.0]], np.ones((3, 4, 2)))


def test_aggregate_selection_and_mean(mesh):
    a = snapshot(mesh.x.copy(), mesh, tag="A")
    b = snapshot(mesh.y.copy(), mesh, tag="B")
    onehot = np.tile([0.0, 1.0], (mesh.n_dof, 1))
    out = aggregate([a, b], WeightField(onehot, ("A", "B"), mesh))
    assert out.model_tag == "mixed"
    np.testing.assert_array_equal(out.values, b.values)
    np.testing.assert_array_equal(aggregate([a, b], np.full((mesh.n_dof, 2), 0.5)).values, (a.values + b.values) / 2)
    with pytest.raises(ShapeMismatch):
        aggregate([a, b], np.ones((mesh.n_dof, 3)) / 3)


@given(st.integers(0, 2**31 - 1), st.integers(1, 5))
def test_convexity_bound(seed, n_models):
    rng = np.random.default_rng(seed)
    ref = rng.standard_normal(40)
    # half the dofs have every model exact, where rounding would otherwise show
    fields = [ref + rng.standard_normal(40) * (np.arange(40) % 2) for _ in range(n_models)]
    w = rng.random((40, n_models))
    w /= w.sum(axis=1, keepdims=True)
    mix = aggregate(fields, w)
    worst = np.max([np.abs(f - ref) for f in fields], axis=0)
    assert np.all(np.abs(mix - ref) <= worst)


def test_aggregation_loss_gradient():
    rng = np.random.default_rng(2)
    w = rng.random((5, 3))
    targets = rng.standard_normal((5, 4))
    loss, g = aggregation_loss(w, targets)
    for idx in np.ndindex(w.shape):
        e = np.zeros_like(w)
        e[idx] = 1e-6
        fd = (aggregation_loss(w + e, targets)[0] - aggregation_loss(w - e, targets)[0]) / 2e-6
        assert abs(fd - g[idx]) <= 1e-7


def test_ann_untrained_is_uniform(mesh):
    X = ann_inputs(mesh, [1.0])
    model = AnnWeights(hidden=(4, 4), epochs=0)
    net = model._init_net(3, 3)
    from mixrom.densenet import forward

    np.testing.assert_array_equal(forward(net, X), 1 / 3)


def test_ann_single_model_degenerate(mesh):
    case = _two_model_case(mesh)
    case = ConfigData(case.params, {"A": case.fields["A"]}, case.reference)
    model = train_ann_weights([case], AnnWeights(hidden=(4,), epochs=20, learning_rate=1e-2))
    np.testing.assert_array_equal(predict_ann_weights(model, mesh, case.params).weights, 1.0)
    assert model.final_loss_ == pytest.approx(model.initial_loss_)


def test_ann_regional_dominance_oracle():
    mesh = structured_mesh(24, 12)
    cases = [_two_model_case(mesh, mu) for mu in (0.5, 1.0, 1.5)]
    model = train_ann_weights(
        cases, AnnWeights(hidden=(20, 20), activation="tanh", learning_rate=1e-2, weight_decay=0.0, epochs=1500)
    )
    assert model.final_loss_ <= model.initial_loss_
    mixed = [aggregate([c.fields["A"], c.fields["B"]], predict_ann_weights(model, mesh, c.params)) for c in cases]
    err = np.mean([relative_l2(m, c.reference) for m, c in zip(mixed, cases)])
    single = min(np.mean([relative_l2(c.fields[t], c.reference) for c in cases]) for t in "AB")
    assert err <= 0.2 * single


def test_ann_weights_rows_and_mesh_free():
    coarse, fine = structured_mesh(4, 3), structured_mesh(7, 5)  # fine contains every coarse node
    cases = [_two_model_case(coarse, mu) for mu in (0.5, 1.5)]
    model = train_ann_weights(cases, AnnWeights(hidden=(8,), epochs=50, learning_rate=1e-2))
    wc = predict_ann_weights(model, coarse, [1.0]).weights
    wf = predict_ann_weights(model, fine, [1.0]).weights
    assert np.all((wf > 0) & (wf < 1))
    np.testing.assert_allclose(wf.sum(axis=1), 1.0, atol=1e-9)
    lookup = {tuple(np.round(c, 12)): k for k, c in enumerate(fine.coords)}
    idx = [lookup[tuple(np.round(c, 12))] for c in coarse.coords]
    np.testing.assert_allclose(wf[idx], wc, rtol=0, atol=1e-12)
    with pytest.raises(ShapeMismatch):
        model.predict(np.zeros((2, 5)))


def test_ann_training_no_worse_than_uniform(mesh):
    cases = [_two_model_case(mesh)]
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        train_ann_weights(cases, AnnWeights(hidden=(4,), epochs=30, learning_rate=1e-3))


def test_ann_presets():
    assert ANN_PRESETS["hills"]["hidden"] == (30,) * 5
    assert ANN_PRESETS["hills"]["activation"] == "softplus"
    assert (ANN_PRESETS["hills"]["learning_rate"], ANN_PRESETS["hills"]["weight_decay"]) == (5e-4, 1e-4)
    assert ANN_PRESETS["hills"]["epochs"] == 60000
    assert ANN_PRESETS["bump"]["hidden"] == (50,) * 3 and ANN_PRESETS["bump"]["activation"] == "tanh"


def test_weight_field_export(tmp_path, mesh):
    w = WeightField(np.full((mesh.n_dof, 2), 0.5), ("A", "B"), mesh)
    paths = w.save(tmp_path, ParameterVector((1.0,), ("mu",)))
    assert [p.name for p in paths] == ["weight_A.txt", "weight_B.txt"]
