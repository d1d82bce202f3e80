import numpy as np
import pytest

from kstab.grid import GridSpec, gradient, hessian


def test_spec_validation():
    with pytest.raises(ValueError):
        GridSpec(10.0, 20, 1)
    with pytest.raises(ValueError):
        GridSpec(-1.0, 65, 1)
    with pytest.raises(ValueError):
        GridSpec(1.0, 65, 3)


def test_weights_integrate_gaussian():
    g = GridSpec(10.0, 129, 2)
    f = np.exp(-0.5 * np.sum(g.points**2, axis=1))
    assert np.dot(g.weights, f) == pytest.approx(2 * np.pi, rel=1e-12)


@pytest.mark.parametrize("m", [65, 129])
def test_fourth_order_derivatives_1d(m):
    g = GridSpec(4.0, m, 1)
    x = g.points[:, 0]
    f = np.sin(x) + 0.1 * x**3
    assert np.max(np.abs(gradient(g, f)[:, 0] - (np.cos(x) + 0.3 * x**2))) < 5e-4 * (65 / m) ** 4
    assert np.max(np.abs(hessian(g, f)[:, 0, 0] - (-np.sin(x) + 0.6 * x))) < 5e-3 * (65 / m) ** 3


def test_polynomial_derivatives_exact_2d():
    g = GridSpec(2.0, 33, 2)
    x, y = g.points.T
    f = x**3 * y + 2 * x * y**2 - y**3
    H = hessian(g, f)
    assert np.allclose(H[:, 0, 0], 6 * x * y, atol=1e-9)
    assert np.allclose(H[:, 0, 1], 3 * x**2 + 4 * y, atol=1e-9)
    assert np.allclose(H[:, 1, 1], 4 * x - 6 * y, atol=1e-9)
    G = gradient(g, f)
    assert np.allclose(G[:, 1], x**3 + 4 * x * y - 3 * y**2, atol=1e-9)
