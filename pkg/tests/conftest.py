import sys

import numpy as np
import pytest

from backvis.network import Conv, Dense, Flatten, ReLU, build
from backvis.tensor import RngSpec


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def hand_network():
    """d = 4 line input, one width-2 stride-2 filter w = [1, 1], V = [1, 1]^T."""
    specs = [Conv((1, 2), 1, stride=2), ReLU(), Flatten(), Dense(1)]
    net = build(specs, (1, 4, 1), RngSpec(0))
    return net.with_params([(np.ones((1, 2, 1, 1)),), (), (), (np.ones((2, 1)),)])


def random_three_layer(seed, d=None, p=None, n=None, k=None, kind="gaussian"):
    """Small random Conv -> ReLU -> Flatten -> Dense model on a 1-D or 2-D input."""
    r = np.random.default_rng(seed)
    if r.random() < 0.5:
        d = d or int(r.integers(8, 65))
        p = p or int(r.integers(2, min(8, d) + 1))
        stride = int(r.integers(1, p + 1))
        shape, kernel = (1, d, 1), (1, p)
    else:
        side = int(r.integers(4, 9))
        c = int(r.integers(1, 3))
        ks = int(r.integers(1, 3))
        if ks * ks * c > 8:
            c = 1
        stride = int(r.integers(1, ks + 1))
        shape, kernel = (side, side, c), (ks, ks)
    n = n or int(r.integers(1, 33))
    k = k or int(r.integers(1, 6))
    specs = [Conv(kernel, n, stride=stride), ReLU(), Flatten(), Dense(k)]
    return build(specs, shape, RngSpec(seed, kind, 0.0, 1.0))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        passed, detail = results[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if passed else 'FAIL'}  {detail}")
