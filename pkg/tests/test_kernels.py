import os
import subprocess
import sys

import numpy as np
import pytest

from misa import _kernels_py, kernels

compiled = pytest.importorskip("misa._kernels")

CASES = {
    "elu": lambda impl, x, g: kernels.elu(x, impl),
    "elu_grad": lambda impl, x, g: kernels.elu_grad(x, g, impl),
    "logsumexp_last": lambda impl, x, g: kernels.logsumexp_last(x, impl),
    "softmax_last": lambda impl, x, g: kernels.softmax_last(x, impl=impl),
    "squash_logdet": lambda impl, x, g: kernels.squash_logdet(x, impl),
    "squash_logdet_grad": lambda impl, x, g: kernels.squash_logdet_grad(x, g, impl),
}


@pytest.mark.parametrize("name", sorted(CASES))
def test_compiled_matches_numpy_fallback(name, rng):
    x = 5.0 * rng.standard_normal((7, 9))
    g = rng.standard_normal((7, 9))
    fn = CASES[name]
    np.testing.assert_allclose(fn(compiled, x, g), fn(_kernels_py, x, g), rtol=1e-12, atol=1e-13)


@pytest.mark.parametrize("impl", [compiled, _kernels_py], ids=["compiled", "python"])
def test_logsumexp_edge_cases(impl):
    x = np.array([[0.0, 0.0, 0.0], [1000.0, 1000.0, -np.inf], [-np.inf, -np.inf, -np.inf]])
    out = kernels.logsumexp_last(x, impl)
    np.testing.assert_allclose(out[:2], [np.log(3.0), 1000.0 + np.log(2.0)])
    assert out[2] == -np.inf


@pytest.mark.parametrize("impl", [compiled, _kernels_py], ids=["compiled", "python"])
def test_squash_logdet_stable_for_large_inputs(impl):
    u = np.array([0.0, 30.0, -400.0])
    out = kernels.squash_logdet(u, impl)
    assert out[0] == pytest.approx(0.0, abs=1e-15)
    assert np.all(np.isfinite(out))
    assert out[2] == pytest.approx(2.0 * (np.log(2.0) - 400.0))


def test_pure_python_switch():
    env = dict(os.environ, MISA_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "import misa; print(misa.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
    assert kernels.BACKEND == "compiled"
