import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mixrom.grid import FieldSnapshot, Mesh, ParameterVector

settings.register_profile("default", deadline=None, max_examples=50, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# criterion number -> (passed, detail); filled by test_acceptance
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if passed else 'FAIL'}  {detail}")


def structured_mesh(n_x=6, n_y=5, lx=3.0, ly=2.0):
    x = np.linspace(0.0, lx, n_x)
    y = np.linspace(0.0, ly, n_y)
    X, Y = np.meshgrid(x, y, indexing="ij")
    return Mesh(np.column_stack([X.ravel(), Y.ravel()]), (n_x, n_y))


def snapshot(values, mesh, params=(1.0,), names=("mu",), tag="reference"):
    return FieldSnapshot(mesh, values, ParameterVector(params, names), model_tag=tag)


@pytest.fixture
def mesh():
    return structured_mesh()


def finite_difference_deviation(params, X, Y, weight_decay=0.0, step=1e-5):
    """Max per-entry relative gap between the analytic gradient and central differences."""
    from mixrom.densenet import NetParams, decay_penalty, forward, grad, mse_loss

    def loss(vec):
        p = NetParams.from_flat(params.spec, vec)
        return mse_loss(forward(p, X), Y)[0] + decay_penalty(p, weight_decay)

    theta = params.flat()
    analytic = grad(params, X, Y, weight_decay=weight_decay).flat()
    numeric = np.empty_like(theta)
    for k in range(theta.size):
        e = np.zeros_like(theta)
        e[k] = step
        numeric[k] = (loss(theta + e) - loss(theta - e)) / (2 * step)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / scale))


def random_net(rng, max_width=6, max_depth=4):
    from mixrom.densenet import NetSpec, init_he

    depth = int(rng.integers(1, max_depth + 1))
    widths = tuple(int(w) for w in rng.integers(1, max_width + 1, size=depth + 1))
    head = str(rng.choice(["linear", "softmax"]))
    if head == "softmax" and widths[-1] < 2:
        widths = widths[:-1] + (2,)
    spec = NetSpec(widths, str(rng.choice(["softplus", "tanh"])), head)
    params = init_he(spec, int(rng.integers(2**31)))
    # nonzero biases so every code path is exercised
    biases = tuple(0.1 * rng.standard_normal(b.shape) for b in params.biases)
    return type(params)(spec, params.weights, biases)
