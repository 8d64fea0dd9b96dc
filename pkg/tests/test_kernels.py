"""Both conv backends must agree; the numpy path is the reference."""

import numpy as np
import pytest

from rcfvis import _kernels


def _cases(rng):
    for stride in (1, 2):
        for pad in (0, 1):
            x = rng.standard_normal((3, 8, 10))
            w = rng.standard_normal((4, 3, 3, 3))
            yield x, w, stride, pad


@pytest.mark.skipif(not _kernels._HAVE_NUMBA, reason="numba backend not active")
def test_numba_matches_numpy_forward_and_backward(rng):
    for x, w, stride, pad in _cases(rng):
        xp = _kernels._pad(x, pad)
        y_nb = _kernels._conv2d_forward_numba(xp, w, stride)
        y_np = _kernels._conv2d_forward_numpy(xp, w, stride)
        assert np.abs(y_nb - y_np).max() < 1e-10

        gy = rng.standard_normal(y_np.shape)
        gx_nb = _kernels._conv2d_grad_input_numba(gy, w, xp.shape[1], xp.shape[2], stride)
        gx_np = _kernels._conv2d_grad_input_numpy(gy, w, xp.shape, stride)
        assert np.abs(gx_nb - gx_np).max() < 1e-10

        gw_nb = _kernels._conv2d_grad_weight_numba(gy, xp, *w.shape, stride)
        gw_np = _kernels._conv2d_grad_weight_numpy(gy, xp, w.shape, stride)
        assert np.abs(gw_nb - gw_np).max() < 1e-10


def test_grad_input_is_adjoint_of_forward(rng):
    # <conv(x), y> == <x, conv^T(y)> for the active backend
    x = rng.standard_normal((2, 6, 7))
    w = rng.standard_normal((3, 2, 3, 3))
    for stride, pad in ((1, 1), (2, 0)):
        y = _kernels.conv2d_forward(x, w, stride, pad)
        g = rng.standard_normal(y.shape)
        lhs = float((y * g).sum())
        xt = _kernels.conv2d_grad_input(g, w, x.shape, stride, pad)
        rhs = float((x * xt).sum())
        assert abs(lhs - rhs) < 1e-10


def test_backend_selection_reporting():
    assert _kernels.active_backend() in ("numba", "numpy")
