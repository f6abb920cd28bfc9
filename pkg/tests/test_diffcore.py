import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nnipuq import diffcore as dc
from nnipuq.diffcore import NestingDepthError, NumericFailure, ParamVector, Tensor


def fd(f, x, h=1e-5):
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        g.flat[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def test_square_grad():
    x = Tensor(3.0, requires_grad=True)
    assert dc.grad(x * x, x).item() == 6.0


def test_disconnected_input_is_zero():
    x = Tensor(2.0, requires_grad=True)
    y = Tensor(5.0, requires_grad=True)
    gx, gy = dc.grad(x * 1.0, [x, y])
    assert gx.item() == 1.0 and gy.item() == 0.0


def test_sin_times_x_matches_fd():
    x = Tensor(1.0, requires_grad=True)
    g = dc.grad(dc.sin(x) * x, x).item()
    assert g == pytest.approx(np.cos(1) + np.sin(1), rel=1e-12)
    num = fd(lambda v: float(np.sin(v) * v), np.array(1.0))
    assert abs(g - num) / abs(num) < 1e-6


def test_grad_of_grad_hand_example():
    # E = theta r^2, L = (dE/dr)^2 -> dL/dtheta = 8 theta r^2 = 32 at theta=1, r=2
    theta = Tensor(1.0, requires_grad=True)
    r = Tensor(2.0, requires_grad=True)
    dEdr = dc.grad(theta * r * r, r, create_graph=True)
    assert dc.grad_of_grad(dEdr * dEdr, theta) == pytest.approx(32.0, abs=0)


def test_grad_of_grad_without_forces_equals_grad():
    theta = Tensor(np.array([0.3, -1.2]), requires_grad=True)
    L = (dc.tanh(theta) * theta).sum()
    assert np.array_equal(dc.grad_of_grad(L, theta), dc.grad(L, theta).data)


def test_nesting_depth_limit():
    x = Tensor(0.7, requires_grad=True)
    g1 = dc.grad(x ** 4, x, create_graph=True)
    g2 = dc.grad(g1, x, create_graph=True)
    with pytest.raises(NestingDepthError):
        dc.grad(g2, x)


def test_nonfinite_names_operation():
    x = Tensor(np.array([-1.0]), requires_grad=True)
    with pytest.raises(NumericFailure) as err:
        dc.log(x)
    assert "log" in str(err.value)


def _mlp_force_loss(theta_vals, r_vals, shapes):
    pv = ParamVector.from_shapes(shapes, theta_vals.copy())
    theta = Tensor(theta_vals, requires_grad=True)
    p = pv.views(theta)
    r = Tensor(r_vals, requires_grad=True)
    h = dc.tanh(r @ p["W0"] + p["b0"])
    E = (h @ p["W1"]).sum()
    F = -dc.grad(E, r, create_graph=True)
    L = (F * F).sum()
    return L, theta


def test_mlp_force_loss_grad_matches_fd(rng):
    shapes = [("W0", (3, 5)), ("b0", (5,)), ("W1", (5, 1))]
    n = sum(int(np.prod(s)) for _, s in shapes)
    th = rng.normal(size=n)
    r = rng.normal(size=(4, 3))
    L, theta = _mlp_force_loss(th, r, shapes)
    g = dc.grad_of_grad(L, theta)
    for i in rng.choice(n, size=5, replace=False):
        e = np.zeros(n)
        e[i] = 1e-4
        num = (_mlp_force_loss(th + e, r, shapes)[0].item() - _mlp_force_loss(th - e, r, shapes)[0].item()) / 2e-4
        assert abs(g[i] - num) <= 1e-3 * max(abs(num), 1e-8)


def _graph(x, c):
    return (dc.sin(x * c[0]) * dc.exp(x * c[1] * 0.3) + dc.tanh(x) * x * c[2] + dc.softplus(x * c[3])).sum()


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1.5, 1.5), min_size=4, max_size=4), st.lists(st.floats(-2, 2), min_size=3, max_size=3))
def test_random_smooth_graphs_first_and_second_order(c, xs):
    c = np.array(c)
    x0 = np.array(xs)
    x = Tensor(x0, requires_grad=True)
    g = dc.grad(_graph(x, c), x, create_graph=True)
    num = fd(lambda v: _graph(Tensor(v), c).item(), x0)
    assert np.allclose(g.data, num, rtol=1e-5, atol=1e-7)
    # second order: d/dx of sum(g^2)
    gg = dc.grad((g * g).sum(), x).data

    def first(v):
        t = Tensor(v, requires_grad=True)
        return (dc.grad(_graph(t, c), t).data ** 2).sum()
    num2 = fd(first, x0, h=1e-4)
    assert np.allclose(gg, num2, rtol=1e-3, atol=1e-5)


@settings(max_examples=50, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.lists(st.floats(-2, 2), min_size=3, max_size=3))
def test_linearity(a, b, xs):
    x = Tensor(np.array(xs), requires_grad=True)
    f = (dc.sin(x) * x).sum()
    g = (dc.tanh(x) ** 2).sum()
    lhs = dc.grad(f * a + g * b, x).data
    rhs = a * dc.grad(f, x).data + b * dc.grad(g, x).data
    assert np.allclose(lhs, rhs, rtol=1e-13, atol=1e-13)


def test_determinism_bitwise(rng):
    x0 = rng.normal(size=6)
    outs = []
    for _ in range(2):
        x = Tensor(x0, requires_grad=True)
        outs.append(dc.grad(dc.logsumexp(dc.sin(x) * x, axis=0), x).data)
    assert np.array_equal(outs[0], outs[1])


def test_param_vector_layout():
    pv = ParamVector.from_shapes([("a", (2, 3)), ("b", (4,))])
    assert len(pv) == 10
    pv.set_segment("b", [1, 2, 3, 4])
    assert pv.segment("b").tolist() == [1, 2, 3, 4]
    with pytest.raises(ValueError):
        ParamVector(np.zeros(5), {"a": (0, (3,)), "b": (2, (3,))})
    with pytest.raises(NumericFailure):
        ParamVector(np.array([np.nan]))
