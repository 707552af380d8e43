import numpy as np
import pytest

from fairmeta import network as net


def central_diff(f, x0, h=1e-5):
    """Central finite differences of a scalar function of a flat vector."""
    x0 = np.asarray(x0, dtype=np.float64)
    g = np.zeros_like(x0)
    for i in range(x0.size):
        e = np.zeros_like(x0)
        e[i] = h
        g[i] = (f(x0 + e) - f(x0 - e)) / (2.0 * h)
    return g


def assert_grad_close(analytic, fd, rtol=1e-4, small=1e-8):
    """Per-coordinate check: relative error below rtol, except near-zero
    coordinates which are compared absolutely."""
    analytic = np.asarray(analytic)
    fd = np.asarray(fd)
    assert analytic.shape == fd.shape
    for i, (a, d) in enumerate(zip(analytic, fd)):
        if abs(a) < small:
            assert abs(d - a) < small, f"coord {i}: analytic {a}, fd {d}"
        else:
            rel = abs(d - a) / abs(a)
            assert rel < rtol, f"coord {i}: analytic {a}, fd {d}, rel {rel}"


@pytest.fixture
def tiny_net():
    """Seeded 3-input (5, 5) network plus a random grouped batch."""
    rng = np.random.default_rng(1234)
    config = net.NetConfig(input_dim=3, hidden_sizes=(5, 5))
    params = net.init_params(config, rng)
    X = rng.normal(size=(8, 3))
    y = rng.normal(size=8)
    s = np.array([0, 1, 0, 1, 1, 0, 0, 1])
    return config, params, X, y, s


def random_problem(seed, n=3, hidden=(5, 5), batch=8):
    """Deterministic (params, X, y, s) tuple for property-style loops.

    Parameters are drawn from a continuous distribution (biases included)
    so relu/abs kinks almost surely sit away from the evaluation point,
    which central differences require.
    """
    rng = np.random.default_rng(seed)
    config = net.NetConfig(input_dim=n, hidden_sizes=hidden)
    params = net.MLPParams.zeros(config).with_flat(0.5 * rng.normal(size=config.dim))
    X = rng.normal(size=(batch, n))
    y = rng.normal(size=batch)
    s = np.zeros(batch, dtype=int)
    s[rng.permutation(batch)[: batch // 2]] = 1
    return params, X, y, s
