import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fcnrlstm import _kernels as K

needs_numba = pytest.mark.skipif(not K.NUMBA_AVAILABLE, reason="numba not installed")


@needs_numba
@settings(max_examples=30, deadline=None)
@given(stride=st.integers(1, 2), dil=st.integers(1, 3), pad=st.integers(0, 3), k=st.integers(1, 3),
       seed=st.integers(0, 2 ** 16))
def test_im2col_col2im_backends_agree(stride, dil, pad, k, seed):
    r = np.random.default_rng(seed)
    n, c, h, w = 2, 3, 9, 7
    ext = dil * (k - 1) + 1
    ho, wo = (h + 2 * pad - ext) // stride + 1, (w + 2 * pad - ext) // stride + 1
    if ho < 1 or wo < 1:
        return
    x = r.standard_normal((n, c, h, w))
    a = K.im2col_numpy(x, k, k, stride, pad, dil, ho, wo)
    b = K.im2col_numba(x, k, k, stride, pad, dil, ho, wo)
    np.testing.assert_array_equal(a, b)
    cols = r.standard_normal(a.shape)
    a = K.col2im_numpy(cols, n, c, h, w, k, k, stride, pad, dil, ho, wo)
    b = K.col2im_numba(cols, n, c, h, w, k, k, stride, pad, dil, ho, wo)
    np.testing.assert_allclose(a, b, rtol=1e-13, atol=1e-13)


@needs_numba
def test_maxpool_backends_agree():
    r = np.random.default_rng(0)
    x = r.integers(0, 4, (2, 3, 8, 6)).astype(np.float64)  # many ties
    for k, s in ((2, 2), (3, 1), (3, 2)):
        ho, wo = (8 - k) // s + 1, (6 - k) // s + 1
        oa, ia = K.maxpool_forward_numpy(x, k, s, ho, wo)
        ob, ib = K.maxpool_forward_numba(x, k, s, ho, wo)
        np.testing.assert_array_equal(oa, ob)
        np.testing.assert_array_equal(ia, ib)
        g = r.standard_normal(oa.shape)
        np.testing.assert_allclose(K.maxpool_backward_numpy(g, ia, 8, 6),
                                   K.maxpool_backward_numba(g, ib, 8, 6), rtol=1e-14, atol=1e-14)


@needs_numba
@settings(max_examples=30, deadline=None)
@given(cx=st.floats(-5, 25), cy=st.floats(-5, 25), sigma=st.floats(0.3, 6))
def test_splat_backends_agree(cx, cy, sigma):
    a = np.zeros((20, 18))
    b = np.zeros((20, 18))
    K.splat_gaussian_numpy(a, cx, cy, sigma, 4 * sigma)
    K.splat_gaussian_numba(b, cx, cy, sigma, 4 * sigma)
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-15)


@pytest.mark.parametrize("flag", ["numpy"] + (["numba"] if K.NUMBA_AVAILABLE else []))
def test_env_flag_selects_backend(flag):
    env = dict(os.environ, FCNRLSTM_BACKEND=flag)
    out = subprocess.run([sys.executable, "-c", "import fcnrlstm; print(fcnrlstm.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == flag


def test_bad_env_flag_rejected():
    env = dict(os.environ, FCNRLSTM_BACKEND="cuda")
    out = subprocess.run([sys.executable, "-c", "import fcnrlstm"], env=env, capture_output=True, text=True)
    assert out.returncode != 0 and "FCNRLSTM_BACKEND" in out.stderr
