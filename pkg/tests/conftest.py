import numpy as np
import pytest

from dtd import numerics as nx


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    den = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / den)


def check_grads(build, tensors, seed=0, step=1e-4):
    """Largest relative error between autodiff and central differences.

    ``build()`` returns an output Tensor; it is contracted with a fixed random
    upstream gradient so every output entry matters.
    """
    out = build()
    gen = np.random.default_rng(seed)
    upstream = gen.normal(size=out.shape)
    for t in tensors:
        t.zero_grad()
    build().backward(upstream)
    analytic = [t.grad.copy() for t in tensors]

    def scalar():
        return float(np.sum(build().data * upstream))

    numeric = nx.finite_difference_grad(scalar, [t.data for t in tensors], step=step)
    return max(rel_err(a, n) for a, n in zip(analytic, numeric))


@pytest.fixture
def gradcheck():
    return check_grads


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is None:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.summary_lines():
        terminalreporter.write_line(line)
