import numpy as np
import pytest

from deeptrafo import kernels

BACKENDS = kernels.available_backends()
KERNEL_NAMES = ("bernstein_basis", "bernstein_values", "slope_theta_grad", "flow_transform", "invert_flow")


@pytest.fixture(params=sorted(BACKENDS))
def backend(request, monkeypatch):
    """Run a test once per importable kernel backend."""
    impl = BACKENDS[request.param]
    for name in KERNEL_NAMES:
        monkeypatch.setattr(kernels, name, getattr(impl, name))
    return request.param


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_params(rng, n, order, spread=1.0):
    """Valid TransformParams with n rows."""
    from deeptrafo.flow import TransformParams

    gamma = rng.normal(0.0, spread, size=(n, order + 1))
    theta = np.cumsum(np.concatenate([gamma[:, :1], np.exp(gamma[:, 1:])], axis=1), axis=1)
    return TransformParams(
        rng.uniform(0.5, 3.0, n), rng.normal(0.0, 1.0, n), theta, rng.uniform(0.5, 2.0, n), rng.normal(0.0, 1.0, n)
    )


# one line per acceptance criterion, echoed at the end of the run
ACCEPTANCE_LINES = []


def record(criterion, passed, detail):
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line, flush=True)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
