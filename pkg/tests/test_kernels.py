"""numba/numpy kernel parity and gradient consistency.

Both backends are checked against each other (tight float32 tolerance;
summation order differs) and the numpy path against a fresh definitional
loop in test_tensor. The benchmark in benchmarks/ reports the same
deviation alongside timings.
"""

import numpy as np
import pytest

from nnviz import _kernels as K

CASES = [
    # n, ci, co, h, w, k, stride, pad
    (2, 1, 4, 8, 8, 3, 1, 1),
    (1, 3, 2, 7, 9, 3, 2, 1),
    (3, 2, 5, 6, 6, 2, 2, 0),
    (1, 4, 4, 5, 5, 5, 1, 2),
    (2, 2, 3, 12, 10, 3, 3, 1),
]


def _case(n, ci, co, h, w, k, stride, pad, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, ci, h, w)).astype(np.float32)
    kern = rng.standard_normal((co, ci, k, k)).astype(np.float32)
    b = rng.standard_normal(co).astype(np.float32)
    return x, kern, b


@pytest.mark.parametrize("shape", CASES)
def test_forward_backends_agree(shape):
    if not K.HAVE_NUMBA:
        pytest.skip("numba not importable")
    x, kern, b = _case(*shape, seed=1)
    a = K.conv2d_forward_np(x, kern, b, shape[6], shape[7])
    nb = K.conv2d_forward_nb(x, kern, b, shape[6], shape[7])
    np.testing.assert_allclose(a, nb, rtol=2e-5, atol=1e-5)


@pytest.mark.parametrize("shape", CASES)
def test_backward_backends_agree(shape):
    if not K.HAVE_NUMBA:
        pytest.skip("numba not importable")
    n, ci, co, h, w, k, stride, pad = shape
    x, kern, b = _case(*shape, seed=2)
    out = K.conv2d_forward_np(x, kern, b, stride, pad)
    g = np.random.default_rng(3).standard_normal(out.shape).astype(np.float32)
    dx_np = K.conv2d_backward_input_np(g, kern, stride, pad, h, w)
    dx_nb = K.conv2d_backward_input_nb(g, kern, stride, pad, h, w)
    np.testing.assert_allclose(dx_np, dx_nb, rtol=2e-5, atol=1e-5)
    dk_np = K.conv2d_backward_kernel_np(g, x, k, k, stride, pad)
    dk_nb = K.conv2d_backward_kernel_nb(g, x, k, k, stride, pad)
    np.testing.assert_allclose(dk_np, dk_nb, rtol=2e-4, atol=1e-4)


def test_backward_input_is_adjoint_of_forward():
    # <g, conv(x)> == <x, conv_backward_input(g)> for bias-free conv:
    # the backward pass must be the exact adjoint of the forward map
    rng = np.random.default_rng(4)
    for stride, pad in ((1, 1), (2, 0), (2, 1)):
        x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
        kern = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
        b = np.zeros(4, np.float32)
        out = K.conv2d_forward(x, kern, b, stride, pad)
        g = rng.standard_normal(out.shape).astype(np.float32)
        dx = K.conv2d_backward_input(g, kern, stride, pad, 8, 8)
        lhs = float((g.astype(np.float64) * out).sum())
        rhs = float((x.astype(np.float64) * dx).sum())
        assert abs(lhs - rhs) <= 1e-3 * max(1.0, abs(lhs))


def test_backend_name_matches_flag():
    assert K.backend_name() in ("numba", "numpy")
    assert (K.backend_name() == "numba") == K.USE_NUMBA


def test_numba_dispatch_end_to_end():
    """Train and explain through the real dispatch with NNVIZ_BACKEND=numba
    in a fresh interpreter; the jit cache keeps repeat runs quick."""
    if not K.HAVE_NUMBA:
        pytest.skip("numba not importable")
    import os
    import subprocess
    import sys

    code = """
import numpy as np
from nnviz import _kernels as K
assert K.backend_name() == "numba", K.backend_name()
from nnviz import datasets as D, model as M, saliency as S
ds = D.as_labeled_set(D.gen_shapes(48, seed=5, max_shapes_per_image=2))
m = M.build(M.camnet_spec(D.SHAPE_CLASSES), seed=1)
rep = M.train(m, ds, epochs=1, lr=0.3, batch=16, seed=0)
assert np.isfinite(rep.final_loss())
gc, fr = S.gradcam(m, ds.images[0], 0)
want = np.maximum(S.cam_signed(m, ds.images[0], 0), 0) / fr.capture.z
np.testing.assert_allclose(gc.grid, want, rtol=1e-4, atol=1e-7)
print("numba dispatch ok")
"""
    env = dict(os.environ, NNVIZ_BACKEND="numba")
    out = subprocess.run([sys.executable, "-c", code], env=env,
                         capture_output=True, text=True, timeout=300)
    assert out.returncode == 0, out.stderr
    assert "numba dispatch ok" in out.stdout
