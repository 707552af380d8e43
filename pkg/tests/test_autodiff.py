import numpy as np

from fairmeta import autodiff as ad

from conftest import central_diff


def scalar_fn_grad(f, x0):
    """Analytic gradient of f (built from tape ops) at flat vector x0."""
    leaf = ad.Node(x0)
    out = f(leaf)
    (g,) = ad.grad_values(out, [leaf])
    return g


def test_add_mul_diamond():
    # z = (x * y) + (x + y); dz/dx = y + 1, dz/dy = x + 1
    x = ad.Node(np.array(3.0))
    y = ad.Node(np.array(5.0))
    z = ad.add(ad.mul(x, y), ad.add(x, y))
    gx, gy = ad.grad_values(z, [x, y])
    assert gx == 6.0
    assert gy == 4.0


def test_repeated_use_accumulates():
    x = ad.Node(np.array(2.0))
    out = ad.mul(x, ad.mul(x, x))  # x^3
    (g,) = ad.grad_values(out, [x])
    assert g == 12.0


def test_operator_sugar_matches_functions():
    x = ad.Node(np.array([1.0, -2.0]))
    lhs = ad.sum_all((x * 3.0 - 1.0) + (-x))
    rhs = ad.sum_all(ad.add(ad.sub(ad.scale(x, 3.0), 1.0), ad.neg(x)))
    assert lhs.value == rhs.value


def test_matmul_gradient_finite_diff():
    rng = np.random.default_rng(0)
    A0 = rng.normal(size=(4, 3))
    B = rng.normal(size=(3, 2))

    def f(flat):
        return float((flat.reshape(4, 3) @ B).sum())

    def fn(leaf):
        return ad.sum_all(ad.matmul(ad.reshape(leaf, (4, 3)), ad.constant(B)))

    g = scalar_fn_grad(fn, A0.ravel())
    fd = central_diff(f, A0.ravel())
    assert np.allclose(g, fd, atol=1e-7)


def test_broadcast_bias_gradient():
    # (B, h) + (h,) pattern used by the network's bias terms
    rng = np.random.default_rng(1)
    Z = rng.normal(size=(6, 4))
    b0 = rng.normal(size=4)

    def f(flat):
        return float(np.maximum(Z + flat, 0.0).sum())

    def fn(leaf):
        return ad.sum_all(ad.relu(ad.add(ad.constant(Z), leaf)))

    g = scalar_fn_grad(fn, b0)
    fd = central_diff(f, b0)
    assert np.allclose(g, fd, atol=1e-7)


def test_relu_subgradient_zero_at_zero():
    x = ad.Node(np.array([0.0, -1.0, 2.0]))
    out = ad.sum_all(ad.relu(x))
    (g,) = ad.grad_values(out, [x])
    assert np.array_equal(g, [0.0, 0.0, 1.0])


def test_abs_subgradient_zero_at_zero():
    x = ad.Node(np.array([0.0, -3.0, 3.0]))
    out = ad.sum_all(ad.absolute(x))
    (g,) = ad.grad_values(out, [x])
    assert np.array_equal(g, [0.0, -1.0, 1.0])


def test_mean_all():
    x = ad.Node(np.array([1.0, 2.0, 3.0, 6.0]))
    m = ad.mean_all(x)
    assert m.item() == 3.0
    (g,) = ad.grad_values(m, [x])
    assert np.array_equal(g, np.full(4, 0.25))


def test_unused_leaf_gets_zero():
    x = ad.Node(np.array(1.0))
    y = ad.Node(np.array([2.0, 2.0]))
    out = ad.mul(x, x)
    gx, gy = ad.grad_values(out, [x, y])
    assert gx == 2.0
    assert np.array_equal(gy, np.zeros(2))


def test_backward_rejects_non_scalar():
    x = ad.Node(np.ones(3))
    try:
        ad.backward(ad.mul(x, x), [x])
    except ValueError as err:
        assert "scalar" in str(err)
    else:
        raise AssertionError("expected ValueError")


def test_double_backprop_quadratic_hvp():
    # f(x) = sum(x^2): Hessian is 2I, so HVP(v) = 2v for any v.
    rng = np.random.default_rng(2)
    x0 = rng.normal(size=5)
    v = rng.normal(size=5)
    leaf = ad.Node(x0)
    out = ad.sum_all(ad.mul(leaf, leaf))
    (g,) = ad.backward(out, [leaf])
    gv = ad.sum_all(ad.mul(g, ad.constant(v)))
    (hvp,) = ad.grad_values(gv, [leaf])
    assert np.allclose(hvp, 2.0 * v, atol=1e-12)


def test_double_backprop_cubic_hvp():
    # f(x) = sum(x^3): Hessian is diag(6x), HVP(v) = 6 x v.
    rng = np.random.default_rng(3)
    x0 = rng.normal(size=4)
    v = rng.normal(size=4)
    leaf = ad.Node(x0)
    out = ad.sum_all(ad.mul(leaf, ad.mul(leaf, leaf)))
    (g,) = ad.backward(out, [leaf])
    gv = ad.sum_all(ad.mul(g, ad.constant(v)))
    (hvp,) = ad.grad_values(gv, [leaf])
    assert np.allclose(hvp, 6.0 * x0 * v, atol=1e-12)


def test_double_backprop_piecewise_linear_is_zero():
    # relu is piecewise linear away from kinks: HVP must vanish.
    x0 = np.array([1.0, -2.0, 3.0])
    leaf = ad.Node(x0)
    out = ad.sum_all(ad.relu(leaf))
    (g,) = ad.backward(out, [leaf])
    gv = ad.sum_all(ad.mul(g, ad.constant(np.ones(3))))
    (hvp,) = ad.grad_values(gv, [leaf])
    assert np.array_equal(hvp, np.zeros(3))


def test_random_composition_finite_diff():
    # composition exercising matmul, relu, abs, broadcasting and reductions
    for seed in range(10):
        rng = np.random.default_rng(100 + seed)
        W = rng.normal(size=(3, 4))
        x0 = rng.normal(size=4)

        def fn(leaf):
            h = ad.relu(ad.matmul(ad.constant(W), ad.reshape(leaf, (4, 1))))
            return ad.add(ad.mean_all(ad.mul(h, h)), ad.absolute(ad.sum_all(leaf)))

        def f(flat):
            h = np.maximum(W @ flat.reshape(4, 1), 0.0)
            return float((h * h).mean() + abs(flat.sum()))

        g = scalar_fn_grad(fn, x0)
        fd = central_diff(f, x0)
        assert np.allclose(g, fd, atol=1e-6)
