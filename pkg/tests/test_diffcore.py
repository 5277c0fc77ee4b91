"""Reverse-mode autodiff engine: finite-difference oracles for every op."""

import numpy as np
import pytest
from scipy import sparse

from scmvae.diffcore import (
    ParamStore,
    Tensor,
    elu,
    gather_spiral,
    grad_check,
    linear,
    reparameterize,
    sparse_apply,
)
from scmvae.mesh import SpiralIndexSet

RNG = np.random.default_rng(1234)


def fd_grad(f, x, h=1e-6):
    """Central finite differences of a scalar function of an array."""
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def check_unary(op, x, h=1e-6, tol=1e-6):
    t = Tensor(x, requires_grad=True)
    out = op(t)
    out.sum().backward() if out.data.ndim else out.backward()
    fd = fd_grad(lambda a: float(op(Tensor(a)).data.sum()), x, h)
    np.testing.assert_allclose(t.grad, fd, rtol=tol, atol=tol)


# ---------------------------------------------------------------------------
# Elementwise and reduction ops vs finite differences


@pytest.mark.parametrize("op", [
    lambda t: t + 2.0,
    lambda t: 2.0 - t,
    lambda t: t * 3.5,
    lambda t: t / 2.0,
    lambda t: 1.0 / (t + 3.0),
    lambda t: -t,
    lambda t: t ** 3,
    lambda t: (t * t).exp(),
    lambda t: (t + 3.0).log(),
    lambda t: t.sum(),
    lambda t: t.sum(axis=0),
    lambda t: t.sum(axis=1, keepdims=True),
    lambda t: t.mean(),
    lambda t: t.mean(axis=1),
    lambda t: t.reshape(6, 2),
    lambda t: t.transpose(),
    lambda t: t[1:3, :2],
    lambda t: elu(t),
    lambda t: elu(t * 4.0, alpha=0.7),
])
def test_op_gradients(op):
    check_unary(op, RNG.standard_normal((4, 3)))


def test_add_mul_two_tensors():
    a = Tensor(RNG.standard_normal((4, 3)), requires_grad=True)
    b = Tensor(RNG.standard_normal((4, 3)), requires_grad=True)
    ((a * b) + (a - b)).sum().backward()
    np.testing.assert_allclose(a.grad, b.data + 1.0, atol=1e-12)
    np.testing.assert_allclose(b.grad, a.data - 1.0, atol=1e-12)


def test_broadcast_gradients():
    a = Tensor(RNG.standard_normal((4, 3)), requires_grad=True)
    b = Tensor(RNG.standard_normal((1, 3)), requires_grad=True)
    (a * b).sum().backward()
    np.testing.assert_allclose(b.grad, a.data.sum(axis=0, keepdims=True), atol=1e-12)
    np.testing.assert_allclose(a.grad, np.broadcast_to(b.data, (4, 3)), atol=1e-12)


def test_matmul_gradients():
    a = RNG.standard_normal((3, 4))
    b = RNG.standard_normal((4, 2))
    ta, tb = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
    (ta @ tb).sum().backward()
    np.testing.assert_allclose(
        ta.grad, fd_grad(lambda x: (x @ b).sum(), a), atol=1e-7)
    np.testing.assert_allclose(
        tb.grad, fd_grad(lambda x: (a @ x).sum(), b), atol=1e-7)


def test_batched_matmul_with_shared_weight():
    x = RNG.standard_normal((5, 3, 4))
    w = RNG.standard_normal((4, 2))
    tw = Tensor(w, requires_grad=True)
    (Tensor(x) @ tw).sum().backward()
    np.testing.assert_allclose(
        tw.grad, fd_grad(lambda a: (x @ a).sum(), w), atol=1e-7)


def test_gradient_accumulates_over_reuse():
    a = Tensor(np.array([2.0]), requires_grad=True)
    (a * a + a * 3.0).backward()  # d/da (a^2 + 3a) = 2a + 3
    np.testing.assert_allclose(a.grad, [7.0])


def test_backward_requires_scalar():
    a = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(ValueError):
        a.backward()


# ---------------------------------------------------------------------------
# Model ops


def test_linear_matches_fd():
    x = RNG.standard_normal((4, 5))
    w = RNG.standard_normal((5, 3))
    b = RNG.standard_normal(3)
    tw, tb = Tensor(w, requires_grad=True), Tensor(b, requires_grad=True)
    (linear(Tensor(x), tw, tb) ** 2).sum().backward()
    np.testing.assert_allclose(
        tw.grad, fd_grad(lambda a: ((x @ a + b) ** 2).sum(), w), rtol=1e-6, atol=1e-7)
    np.testing.assert_allclose(
        tb.grad, fd_grad(lambda a: ((x @ w + a) ** 2).sum(), b), rtol=1e-6, atol=1e-7)


def test_linear_shape_errors():
    with pytest.raises(ValueError):
        linear(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))), Tensor(np.ones(2)))
    with pytest.raises(ValueError):
        linear(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))), Tensor(np.ones(3)))


def small_spirals():
    # 3 vertices, spirals of length 2, pad marker 3
    return SpiralIndexSet(np.array([[0, 1], [1, 2], [2, 3]]), length=2,
                          dilation=1, pad_marker=3)


def test_gather_spiral_forward_values():
    s = small_spirals()
    x = np.arange(12, dtype=np.float64).reshape(1, 3, 4) + 1.0
    out = gather_spiral(Tensor(x), s)
    assert out.shape == (1, 3, 8)
    np.testing.assert_array_equal(out.data[0, 0], np.r_[x[0, 0], x[0, 1]])
    np.testing.assert_array_equal(out.data[0, 1], np.r_[x[0, 1], x[0, 2]])
    # padded slot gathers zeros
    np.testing.assert_array_equal(out.data[0, 2], np.r_[x[0, 2], np.zeros(4)])


def test_gather_spiral_gradient():
    s = small_spirals()
    x = RNG.standard_normal((2, 3, 4))
    t = Tensor(x, requires_grad=True)
    (gather_spiral(t, s) ** 2).sum().backward()

    def f(a):
        padded = np.concatenate([a, np.zeros((2, 1, 4))], axis=1)
        return float((padded[:, s.spirals, :] ** 2).sum())

    np.testing.assert_allclose(t.grad, fd_grad(f, x), rtol=1e-6, atol=1e-7)


def test_sparse_apply_forward_and_gradient():
    m = sparse.csr_matrix(np.array([[0.5, 0.5, 0.0], [0.0, 0.0, 1.0]]))
    x = RNG.standard_normal((2, 3, 4))
    t = Tensor(x, requires_grad=True)
    out = sparse_apply(m, t)
    assert out.shape == (2, 2, 4)
    np.testing.assert_allclose(out.data[0], m.toarray() @ x[0], atol=1e-14)
    (out ** 2).sum().backward()
    fd = fd_grad(lambda a: sum(float(((m.toarray() @ a[i]) ** 2).sum())
                               for i in range(2)), x)
    np.testing.assert_allclose(t.grad, fd, rtol=1e-6, atol=1e-7)


def test_reparameterize_deterministic_and_gradient():
    mu = RNG.standard_normal((3, 4))
    lv = RNG.standard_normal((3, 4)) * 0.1
    a = reparameterize(Tensor(mu), Tensor(lv), noise_seed=[1, 2])
    b = reparameterize(Tensor(mu), Tensor(lv), noise_seed=[1, 2])
    c = reparameterize(Tensor(mu), Tensor(lv), noise_seed=[1, 3])
    np.testing.assert_array_equal(a.data, b.data)
    assert not np.array_equal(a.data, c.data)
    # z = mu + exp(lv/2) * eps
    eps = np.random.default_rng([1, 2]).standard_normal((3, 4))
    np.testing.assert_allclose(a.data, mu + np.exp(lv / 2) * eps, atol=1e-14)

    tm, tl = Tensor(mu, requires_grad=True), Tensor(lv, requires_grad=True)
    (reparameterize(tm, tl, eps=eps) ** 2).sum().backward()
    np.testing.assert_allclose(
        tm.grad, fd_grad(lambda x: ((x + np.exp(lv / 2) * eps) ** 2).sum(), mu),
        rtol=1e-6, atol=1e-7)
    np.testing.assert_allclose(
        tl.grad, fd_grad(lambda x: ((mu + np.exp(x / 2) * eps) ** 2).sum(), lv),
        rtol=1e-6, atol=1e-7)


def test_reparameterize_eps_zero_returns_mu():
    mu = RNG.standard_normal((2, 3))
    z = reparameterize(Tensor(mu), Tensor(np.zeros((2, 3))), eps=0.0)
    np.testing.assert_array_equal(z.data, mu)


def test_reparameterize_shape_mismatch():
    with pytest.raises(ValueError):
        reparameterize(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4))))


# ---------------------------------------------------------------------------
# ParamStore and grad_check


def test_param_store_roundtrip():
    p = ParamStore()
    p.add("w", np.ones((2, 2)))
    p.add("b", np.zeros(2))
    state = p.state()
    p["w"].data[:] = 5.0
    p.load_state(state)
    np.testing.assert_array_equal(p["w"].data, np.ones((2, 2)))
    with pytest.raises(KeyError):
        p.add("w", np.ones(1))  # duplicate name


def test_grad_check_passes_on_correct_graph():
    p = ParamStore()
    p.add("w", RNG.standard_normal((3, 2)))
    x = RNG.standard_normal((5, 3))

    def closure():
        return ((Tensor(x) @ p["w"]) ** 2).mean()

    report = grad_check(closure, p, tol=1e-6)
    assert report["passed"]
    assert report["max_rel_error"] < 1e-6
    assert "w" in report["per_param"]


def test_grad_check_catches_wrong_gradient():
    p = ParamStore()
    p.add("w", RNG.standard_normal((3,)))

    def closure():
        w = p["w"]
        out = w * w  # correct value...
        out._backward = lambda: w._accumulate(np.ones(3))  # ...wrong gradient
        return out.sum()

    report = grad_check(closure, p, tol=1e-6)
    assert not report["passed"]


def test_grad_check_rejects_nonfinite_loss():
    p = ParamStore()
    p.add("w", np.zeros(2))

    def closure():
        return p["w"].log().sum()  # log(0) = -inf

    with pytest.raises(FloatingPointError):
        grad_check(closure, p, tol=1e-6)
