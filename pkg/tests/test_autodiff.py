"""Finite-difference verification of every autodiff primitive."""

import numpy as np
import pytest

from genvit import autodiff as ad


def numeric_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central finite differences of scalar f wrt every entry of x."""
    g = np.zeros_like(x)
    flat = x.ravel()
    gf = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * h)
    return g


def check_unary(op, x, **kw):
    t = ad.Tensor(x, requires_grad=True)
    out = op(t, **kw)
    loss = ad.sum_(ad.mul(out, out))
    loss.backward()

    def f(xv):
        return float((op(ad.Tensor(xv), **kw).data ** 2).sum())

    num = numeric_grad(f, x.copy())
    np.testing.assert_allclose(t.grad, num, rtol=1e-5, atol=1e-7)


RNG = np.random.default_rng(0)


@pytest.mark.parametrize(
    "op,kw",
    [
        (ad.exp, {}),
        (ad.tanh, {}),
        (ad.gelu, {}),
        (ad.softmax, {"axis": -1}),
        (ad.log_softmax, {"axis": -1}),
        (lambda t: ad.reshape(t, (6, 2)), {}),
        (lambda t: ad.transpose(t, (1, 0)), {}),
        (lambda t: ad.sum_(t, axis=0), {}),
        (lambda t: ad.mean(t, axis=1, keepdims=True), {}),
        (lambda t: ad.power(t, 3.0), {}),
    ],
)
def test_unary_ops(op, kw):
    x = RNG.normal(size=(3, 4)).astype(np.float64)
    check_unary(op, x, **kw)


def test_log_sqrt_positive_domain():
    x = RNG.uniform(0.5, 2.0, size=(3, 4))
    check_unary(ad.log, x)
    check_unary(ad.sqrt, x)


def test_binary_broadcast_ops():
    a = ad.Tensor(RNG.normal(size=(3, 4)), requires_grad=True)
    b = ad.Tensor(RNG.normal(size=(4,)), requires_grad=True)
    out = ad.div(ad.mul(ad.add(a, b), ad.sub(a, b)), ad.add(ad.mul(b, b), 2.0))
    loss = ad.sum_(out)
    loss.backward()

    def f_a(av):
        return float(((av + b.data) * (av - b.data) / (b.data**2 + 2.0)).sum())

    def f_b(bv):
        return float(((a.data + bv) * (a.data - bv) / (bv**2 + 2.0)).sum())

    np.testing.assert_allclose(a.grad, numeric_grad(f_a, a.data.copy()), rtol=1e-6, atol=1e-9)
    np.testing.assert_allclose(b.grad, numeric_grad(f_b, b.data.copy()), rtol=1e-6, atol=1e-9)


def test_matmul_2d_and_batched():
    a = ad.Tensor(RNG.normal(size=(2, 3, 4)), requires_grad=True)
    w = ad.Tensor(RNG.normal(size=(4, 5)), requires_grad=True)
    out = ad.matmul(a, w)
    ad.sum_(ad.mul(out, out)).backward()

    def f_a(av):
        return float(((av @ w.data) ** 2).sum())

    def f_w(wv):
        return float(((a.data @ wv) ** 2).sum())

    np.testing.assert_allclose(a.grad, numeric_grad(f_a, a.data.copy()), rtol=1e-5, atol=1e-8)
    np.testing.assert_allclose(w.grad, numeric_grad(f_w, w.data.copy()), rtol=1e-5, atol=1e-8)


def test_matmul_batched_both_sides():
    a = ad.Tensor(RNG.normal(size=(2, 2, 3, 4)), requires_grad=True)
    b = ad.Tensor(RNG.normal(size=(2, 2, 4, 3)), requires_grad=True)
    out = ad.matmul(a, b)
    ad.sum_(out).backward()

    def f_a(av):
        return float((av @ b.data).sum())

    np.testing.assert_allclose(a.grad, numeric_grad(f_a, a.data.copy()), rtol=1e-6, atol=1e-9)


def test_concat_and_take():
    a = ad.Tensor(RNG.normal(size=(2, 3)), requires_grad=True)
    b = ad.Tensor(RNG.normal(size=(4, 3)), requires_grad=True)
    cat = ad.concat([a, b], axis=0)
    idx = np.array([0, 5, 1, 1])
    out = ad.take(cat, idx)
    ad.sum_(ad.mul(out, out)).backward()

    def f_a(av):
        c = np.concatenate([av, b.data], axis=0)
        return float((c[idx] ** 2).sum())

    np.testing.assert_allclose(a.grad, numeric_grad(f_a, a.data.copy()), rtol=1e-6, atol=1e-9)
    # global row 5 is b's row 3; b rows 0..2 unused
    assert np.allclose(b.grad[:3], 0.0)
    assert not np.allclose(b.grad[3], 0.0)


def test_embedding_gather_scatter_adds_repeats():
    table = ad.Tensor(RNG.normal(size=(7, 4)), requires_grad=True)
    ids = np.array([[1, 1, 2], [6, 1, 0]])
    out = ad.take(table, ids)
    ad.sum_(out).backward()
    assert table.grad[1].sum() == pytest.approx(3 * 4)  # id 1 appears 3 times
    assert np.allclose(table.grad[3], 0.0)


def test_conv2d_gradients():
    x = ad.Tensor(RNG.normal(size=(2, 3, 6, 6)), requires_grad=True)
    w = ad.Tensor(RNG.normal(size=(4, 3, 3, 3)) * 0.3, requires_grad=True)
    b = ad.Tensor(RNG.normal(size=(4,)), requires_grad=True)
    out = ad.conv2d(x, w, b, stride=2, padding=1)
    assert out.shape == (2, 4, 3, 3)
    ad.sum_(ad.mul(out, out)).backward()

    def f(which):
        def inner(v):
            args = {"x": x.data, "w": w.data, "b": b.data}
            args[which] = v
            o = ad.conv2d(ad.Tensor(args["x"]), ad.Tensor(args["w"]), ad.Tensor(args["b"]), stride=2, padding=1)
            return float((o.data**2).sum())

        return inner

    np.testing.assert_allclose(x.grad, numeric_grad(f("x"), x.data.copy()), rtol=1e-5, atol=1e-7)
    np.testing.assert_allclose(w.grad, numeric_grad(f("w"), w.data.copy()), rtol=1e-5, atol=1e-7)
    np.testing.assert_allclose(b.grad, numeric_grad(f("b"), b.data.copy()), rtol=1e-5, atol=1e-7)


def test_upsample_nearest():
    x = ad.Tensor(RNG.normal(size=(1, 2, 3, 3)), requires_grad=True)
    out = ad.upsample_nearest_2x(x)
    assert out.shape == (1, 2, 6, 6)
    ad.sum_(ad.mul(out, out)).backward()

    def f(xv):
        o = xv.repeat(2, axis=-2).repeat(2, axis=-1)
        return float((o**2).sum())

    np.testing.assert_allclose(x.grad, numeric_grad(f, x.data.copy()), rtol=1e-6, atol=1e-9)


def test_no_grad_builds_no_graph():
    a = ad.Tensor(np.ones(3), requires_grad=True)
    with ad.no_grad():
        out = ad.mul(a, 2.0)
    assert out._backward is None and not out.requires_grad


def test_grad_accumulates_over_reuse():
    a = ad.Tensor(np.array([2.0]), requires_grad=True)
    out = ad.add(ad.mul(a, a), ad.mul(a, 3.0))  # a^2 + 3a -> grad 2a + 3 = 7
    out.backward(np.array([1.0]))
    assert a.grad[0] == pytest.approx(7.0)


def test_dtype_preserved_in_float32():
    a = ad.Tensor(np.ones((2, 2), dtype=np.float32), requires_grad=True)
    out = ad.gelu(ad.mul(ad.add(a, 1.5), 0.25))
    assert out.dtype == np.float32
    ad.sum_(out).backward()
    assert a.grad.dtype == np.float32
