"""Both kernel backends must agree bit for bit."""
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from backvis import kernels
from backvis.tensor import PatchPlan

BACKENDS = kernels.available_backends()


def test_python_backend_always_available():
    assert "python" in BACKENDS
    assert kernels.BACKEND in BACKENDS


def test_unknown_backend():
    with pytest.raises(ValueError):
        kernels.get_backend("fortran")


@pytest.mark.skipif(len(BACKENDS) < 2, reason="compiled kernels not built")
class TestBackendsAgree:
    @settings(max_examples=40, deadline=None)
    @given(h=st.integers(2, 10), w=st.integers(2, 10), c=st.integers(1, 3), k=st.integers(1, 3),
           s=st.integers(1, 3), pad=st.sampled_from(["valid", "same"]), b=st.integers(1, 3),
           seed=st.integers(0, 2**31))
    def test_gather_scatter(self, h, w, c, k, s, pad, b, seed):
        plan = PatchPlan.build((h, w, c), (min(k, h), min(k, w)), s, pad)
        r = np.random.default_rng(seed)
        x = r.standard_normal((b, plan.input_size))
        rows = r.standard_normal((b, plan.patch_count, plan.patch_size))
        g = [kernels.gather_patches(x, plan.index, backend=n) for n in BACKENDS]
        sc = [kernels.scatter_patches(rows, plan.index, plan.input_size, backend=n) for n in BACKENDS]
        assert np.array_equal(g[0], g[1])
        assert np.array_equal(sc[0], sc[1])

    @settings(max_examples=40, deadline=None)
    @given(h=st.integers(2, 9), w=st.integers(2, 9), c=st.integers(1, 3), win=st.integers(1, 3),
           s=st.integers(1, 3), ties=st.booleans(), seed=st.integers(0, 2**31))
    def test_maxpool(self, h, w, c, win, s, ties, seed):
        r = np.random.default_rng(seed)
        x = r.integers(-2, 3, (2, h, w, c)).astype(float) if ties else r.standard_normal((2, h, w, c))
        win = (min(win, h), min(win, w))
        res = [kernels.maxpool_forward(x, win, (s, s), backend=n) for n in BACKENDS]
        assert np.array_equal(res[0][0], res[1][0])
        assert np.array_equal(res[0][1], res[1][1])
        g = r.standard_normal(res[0][0].shape)
        back = [kernels.maxpool_backward(g, res[0][1], (h, w, c), backend=n) for n in BACKENDS]
        assert np.array_equal(back[0], back[1])


@pytest.mark.parametrize("backend", BACKENDS)
class TestMaxPool:
    def test_line_example(self, backend):
        x = np.array([3.0, 1.0, 2.0, 5.0]).reshape(1, 1, 4, 1)
        out, arg = kernels.maxpool_forward(x, (1, 2), (1, 2), backend=backend)
        np.testing.assert_array_equal(out.ravel(), [3, 5])
        np.testing.assert_array_equal(arg.ravel(), [0, 3])

    def test_tie_goes_to_lowest_index(self, backend):
        x = np.zeros((1, 2, 2, 1))
        _, arg = kernels.maxpool_forward(x, (2, 2), (2, 2), backend=backend)
        assert arg.ravel().tolist() == [0]

    def test_argmax_points_at_maximum(self, backend, rng):
        x = rng.standard_normal((2, 6, 7, 3))
        out, arg = kernels.maxpool_forward(x, (2, 2), (2, 2), backend=backend)
        flat = x.reshape(2, -1)
        for b in range(2):
            np.testing.assert_array_equal(flat[b][arg[b].ravel()], out[b].ravel())

    def test_backward_routes_to_argmax(self, backend):
        x = np.array([3.0, 1.0, 2.0, 5.0]).reshape(1, 1, 4, 1)
        _, arg = kernels.maxpool_forward(x, (1, 2), (1, 2), backend=backend)
        g = np.array([10.0, 20.0]).reshape(1, 1, 2, 1)
        back = kernels.maxpool_backward(g, arg, (1, 4, 1), backend=backend)
        np.testing.assert_array_equal(back.ravel(), [10, 0, 0, 20])

    def test_overlapping_windows_accumulate(self, backend):
        x = np.array([1.0, 5.0, 2.0]).reshape(1, 1, 3, 1)
        out, arg = kernels.maxpool_forward(x, (1, 2), (1, 1), backend=backend)
        back = kernels.maxpool_backward(np.ones_like(out), arg, (1, 3, 1), backend=backend)
        np.testing.assert_array_equal(back.ravel(), [0, 2, 0])
