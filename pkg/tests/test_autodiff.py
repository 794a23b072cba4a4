import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from misa import autodiff as ad
from misa.nn import MlpParams, bind, init_mlp, mlp_apply

from _oracles import numpy_mlp


def central_diff(fn, x, h=1e-5):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (fn(xp) - fn(xm)) / (2 * h)
    return g


def grad_of(build, x):
    g = ad.Graph()
    xl = g.leaf("x")
    out = g.output("y", build(xl))
    ad.forward(g, {"x": x})
    return ad.backward(g, out)["x"]


def test_identity_and_square():
    g = ad.Graph()
    x = g.leaf("x")
    g.output("id", ad.add(x, 0.0))
    g.output("sq", ad.mul(x, x))
    out = ad.forward(g, {"x": np.array([1.0, 2.0, 3.0])})
    np.testing.assert_array_equal(out["id"], [1.0, 2.0, 3.0])
    out = ad.forward(g, {"x": np.array([2.0])})
    np.testing.assert_array_equal(out["sq"], [4.0])


def test_zero_weight_mlp_returns_last_bias(rng):
    net = init_mlp([3, 5, 2], rng)
    layers = tuple((np.zeros_like(w), b) for w, b in net.layers)
    out = mlp_apply(MlpParams(layers), rng.standard_normal((4, 3)))
    np.testing.assert_array_equal(out, np.broadcast_to(layers[-1][1], (4, 2)))


def test_square_derivative():
    assert grad_of(lambda x: ad.sum(ad.square(x)), np.array([3.0]))[0] == pytest.approx(6.0)


def test_log_mean_exp_symmetric_gradient():
    np.testing.assert_allclose(grad_of(ad.log_mean_exp, np.zeros(2)), [0.5, 0.5])


def test_mlp_gradient_matches_finite_differences(rng):
    net = init_mlp([3, 8, 1], rng)
    x0 = rng.standard_normal((5, 3))
    names = net.named("n")
    g = ad.Graph()
    bound = bind(g, net, "n")
    y = g.output("y", ad.sum(ad.tanh(mlp_apply(bound, g.leaf("x")))))
    ad.forward(g, {**names, "x": x0})
    grads = ad.backward(g, y)
    for name, value in names.items():
        def f(v, name=name):
            p = dict(names)
            p[name] = v
            return float(np.sum(np.tanh(mlp_apply(net.replace_named("n", p), x0))))
        fd = central_diff(f, value)
        rel = np.linalg.norm(grads[name] - fd) / max(np.linalg.norm(fd), 1e-12)
        assert rel < 1e-5, name


def test_mlp_forward_matches_matrix_arithmetic():
    rng = np.random.default_rng(7)
    net = init_mlp([2, 6, 6, 3], rng)
    probes = np.array([[0.0, 0.0], [1.0, -2.0], [0.3, 0.7]])
    np.testing.assert_allclose(mlp_apply(net, probes), numpy_mlp(net.layers, probes), rtol=0, atol=1e-14)


def test_identity_linear_layer():
    net = MlpParams(((np.eye(3), np.zeros(3)),))
    x = np.arange(6.0).reshape(2, 3)
    np.testing.assert_array_equal(mlp_apply(net, x), x)


OPS = {
    "exp": lambda x: ad.sum(ad.exp(x)),
    "tanh": lambda x: ad.sum(ad.tanh(x)),
    "elu": lambda x: ad.sum(ad.mul(ad.elu(x), ad.elu(x))),
    "logsumexp": lambda x: ad.sum(ad.logsumexp(x)),
    "lme": lambda x: ad.sum(ad.log_mean_exp(x)),
    "squash": lambda x: ad.sum(ad.squash_logdet(x)),
    "mean_max": lambda x: ad.add(ad.mean(ad.square(x)), ad.sum(ad.max(x, axis=-1))),
    "clip": lambda x: ad.sum(ad.square(ad.clip(x, -0.5, 0.5))),
    "minimum": lambda x: ad.sum(ad.minimum(x, ad.mul(x, -1.0))),
    "slice_concat": lambda x: ad.sum(ad.square(ad.concat((ad.slice_last(x, 0, 1), x), axis=-1))),
    "log": lambda x: ad.sum(ad.log(ad.add(ad.square(x), 1.0))),
}


@pytest.mark.parametrize("name", sorted(OPS))
@settings(max_examples=25, deadline=None)
@given(x=arrays(np.float64, (3, 4), elements=st.floats(-3, 3)))
def test_op_gradients_match_finite_differences(name, x):
    build = OPS[name]
    # keep clip/min/max kinks away from the finite-difference stencil
    if name in ("clip", "minimum", "mean_max", "elu"):
        x = x + 0.01 * np.sign(x) + (x == 0) * 0.013
        srt = np.sort(x, axis=-1)
        if name == "mean_max" and np.min(np.diff(srt, axis=-1)) < 1e-3:
            return
        if name == "clip" and np.min(np.abs(np.abs(x) - 0.5)) < 1e-3:
            return
    grad = grad_of(build, x)

    def f(v):
        return float(build(v))

    np.testing.assert_allclose(grad, central_diff(f, x), rtol=1e-5, atol=1e-6)


def test_logsumexp_overflow_safe():
    assert float(ad.logsumexp(np.array([1000.0, 1000.0]))) == pytest.approx(1000.0 + np.log(2.0))
    assert float(ad.log_mean_exp(np.array([1000.0, 1000.0]))) == pytest.approx(1000.0)


def test_stop_gradient_blocks_flow():
    grad = grad_of(lambda x: ad.sum(ad.mul(x, ad.stop_gradient(x))), np.array([2.0, -1.0]))
    np.testing.assert_allclose(grad, [2.0, -1.0])


def test_broadcasting_reduces_gradients():
    g = ad.Graph()
    x, b = g.leaf("x"), g.leaf("b")
    y = g.output("y", ad.sum(ad.mul(ad.add(x, b), 2.0)))
    ad.forward(g, {"x": np.ones((4, 3)), "b": np.zeros(3)})
    grads = ad.backward(g, y)
    np.testing.assert_array_equal(grads["b"], np.full(3, 8.0))


def test_unbound_leaf_error_names_leaf():
    g = ad.Graph()
    g.output("y", ad.add(g.leaf("x"), g.leaf("missing")))
    with pytest.raises(ad.GraphError, match="missing"):
        ad.forward(g, {"x": 1.0})


def test_backward_requires_fresh_forward():
    g = ad.Graph()
    y = g.output("y", ad.sum(ad.square(g.leaf("x"))))
    ad.forward(g, {"x": np.ones(2)})
    ad.backward(g, y)
    with pytest.raises(ad.GraphError):
        ad.backward(g, y)


def test_backward_on_unregistered_output_raises():
    g = ad.Graph()
    x = g.leaf("x")
    g.output("y", ad.sum(x))
    z = ad.sum(ad.square(x))
    ad.forward(g, {"x": np.ones(2)})
    with pytest.raises(ad.GraphError, match="not evaluated"):
        ad.backward(g, z)


def test_wrt_restricts_and_unused_leaves_get_zeros():
    g = ad.Graph()
    x, unused = g.leaf("x"), g.leaf("u")
    y = g.output("y", ad.sum(ad.square(x)))
    ad.forward(g, {"x": np.array([1.0, 2.0]), "u": np.ones(3)})
    grads = ad.backward(g, y)
    np.testing.assert_array_equal(grads["u"], np.zeros(3))
    assert set(ad.backward(*_fresh(g, y), wrt=["x"])) == {"x"}


def _fresh(g, y):
    ad.forward(g, {"x": np.array([1.0, 2.0]), "u": np.ones(3)})
    return g, y


def test_non_scalar_output_rejected():
    g = ad.Graph()
    y = g.output("y", ad.square(g.leaf("x")))
    ad.forward(g, {"x": np.ones(2)})
    with pytest.raises(ad.GraphError):
        ad.backward(g, y)


def test_division_by_node_is_rejected():
    g = ad.Graph()
    with pytest.raises(TypeError):
        _ = 1.0 / g.leaf("x")
    with pytest.raises(TypeError):
        _ = g.leaf("x") / g.leaf("y")
