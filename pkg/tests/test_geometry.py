import numpy as np
import pytest
from scipy.integrate import quad

import geometry
from errors import InputError, NumericalError

SEED = 20240611


def make_kernel(family, d):
    if family == geometry.FEJER:
        return geometry.fejer_kernel(16, d)
    if family == geometry.GAUSSIAN:
        A = np.array([[1.0, 0.3, 0.0], [0.3, 2.0, 0.2], [0.0, 0.2, 0.5]])[:d, :d]
        return geometry.gaussian_kernel(A)
    return geometry.laplace_kernel(np.array([1.0, 0.5, 2.0])[:d])


def random_points(kernel, n, rng):
    if kernel.family == geometry.FEJER:
        return rng.uniform(0.0, 1.0, (n, kernel.d))
    if kernel.family == geometry.GAUSSIAN:
        return rng.normal(0.0, 1.5, (n, kernel.d))
    return rng.uniform(0.0, 5.0, (n, kernel.d))


FAMILIES = [geometry.FEJER, geometry.GAUSSIAN, geometry.LAPLACE]
CASES = [(f, d) for f in FAMILIES for d in (1, 2, 3)]


@pytest.mark.parametrize('family,d', CASES)
def test_kernel_is_normalized_on_the_diagonal(family, d):
    kernel = make_kernel(family, d)
    X = random_points(kernel, 100, np.random.default_rng(SEED))
    assert np.allclose(geometry.kernel_eval(kernel, X, X), 1.0, atol=1e-12)


def test_kernel_eval_known_values():
    gauss = geometry.gaussian_kernel(np.eye(2))
    assert geometry.kernel_eval(gauss, [0.0, 0.0], [1.0, 1.0]) == pytest.approx(np.exp(-1.0), abs=1e-12)
    lap = geometry.laplace_kernel([1.0])
    assert geometry.kernel_eval(lap, 0.0, 2.0) == pytest.approx(2.0 * np.sqrt(3.0) / 4.0, abs=1e-12)


def test_fejer_kernel_is_nonnegative_and_bounded():
    kernel = geometry.fejer_kernel(30)
    t = np.linspace(0.0, 1.0, 2001)[:, None]
    vals = geometry.kernel_eval(kernel, t, np.zeros((1, 1)))
    assert np.all(vals >= -1e-15)
    assert np.all(vals <= 1.0 + 1e-12)


def test_fejer_integer_points_use_the_removable_singularity():
    kernel = geometry.fejer_kernel(8)
    assert geometry.kernel_eval(kernel, 0.0, 1.0) == pytest.approx(1.0, abs=1e-12)
    assert geometry.kernel_eval(kernel, 0.25, 0.25 + 1e-10) == pytest.approx(1.0, abs=1e-9)


@pytest.mark.parametrize('family,d', CASES)
def test_metric_tensor_matches_mixed_finite_differences(family, d):
    kernel = make_kernel(family, d)
    rng = np.random.default_rng(SEED + d)
    x = random_points(kernel, 1, rng)[0]
    if family == geometry.LAPLACE:
        x = x + 0.5
    H = geometry.metric_tensor(kernel, x)
    steps = 1e-4 / np.sqrt(np.diag(H))
    fd = np.empty((d, d))
    for i in range(d):
        for j in range(d):
            ei = np.eye(d)[i] * steps[i]
            ej = np.eye(d)[j] * steps[j]
            k = lambda a, b: geometry.kernel_eval(kernel, x + a, x + b)
            fd[i, j] = (k(ei, ej) - k(ei, -ej) - k(-ei, ej) + k(-ei, -ej)) / (4.0 * steps[i] * steps[j])
    scale = np.max(np.abs(H))
    assert np.allclose(fd, H, rtol=1e-5, atol=1e-5 * scale)


def test_metric_tensor_known_values():
    fejer = geometry.fejer_kernel(128)
    H = geometry.metric_tensor(fejer, [0.3])
    assert H[0, 0] == pytest.approx(np.pi ** 2 * 128 * 132 / 3.0, rel=1e-14)
    assert H[0, 0] == pytest.approx(55585.7, abs=0.1)
    gauss = geometry.gaussian_kernel(2.0 * np.eye(3))
    assert np.allclose(geometry.metric_tensor(gauss, np.zeros(3)), 0.5 * np.eye(3))
    lap = geometry.laplace_kernel([1.0, 1.0])
    assert np.allclose(geometry.metric_tensor(lap, [0.0, 0.0]), np.diag([0.25, 0.25]))


def test_fejer_constant_matches_second_derivative():
    kernel = geometry.fejer_kernel(128)
    C = geometry.fejer_constant(128)
    h = 1e-3 / np.sqrt(C)
    second = (geometry.kernel_eval(kernel, 0.0, h) - 2.0 + geometry.kernel_eval(kernel, 0.0, -h)) / h ** 2
    assert -second == pytest.approx(C, rel=1e-5)


def test_fejer_coefficients_are_a_probability_law():
    g = geometry.fejer_coefficients(30)
    assert g.shape == (31,)
    assert np.all(g >= 0)
    assert g[0] + 2.0 * g[1:].sum() == pytest.approx(1.0, abs=1e-12)


def test_odd_fejer_cutoff_is_rejected():
    with pytest.raises(InputError):
        geometry.fejer_kernel(31)


def test_fisher_distance_known_values():
    gauss = geometry.gaussian_kernel(np.eye(2))
    assert geometry.fisher_distance(gauss, [0.0, 0.0], [3.0, 4.0]) == pytest.approx(5.0)
    lap = geometry.laplace_kernel([1.0])
    # half-log chart: d_H(0, e - 1) = 1/2
    assert geometry.fisher_distance(lap, 0.0, np.e - 1.0) == pytest.approx(0.5, abs=1e-14)
    for kernel in (gauss, lap, geometry.fejer_kernel(8, 2)):
        x = np.full(kernel.d, 0.4)
        assert geometry.fisher_distance(kernel, x, x) == 0.0


def test_laplace_distance_matches_geodesic_length():
    lap = geometry.laplace_kernel([1.5])
    rng = np.random.default_rng(SEED)
    for x, xp in rng.uniform(0.0, 10.0, (20, 2)):
        length, _ = quad(lambda u: 1.0 / (2.0 * u + 3.0), min(x, xp), max(x, xp), epsabs=1e-13)
        assert geometry.fisher_distance(lap, x, xp) == pytest.approx(length, abs=1e-8)


@pytest.mark.parametrize('family', FAMILIES)
def test_fisher_distance_is_a_metric(family):
    kernel = make_kernel(family, 2)
    rng = np.random.default_rng(SEED)
    X, Y, Z = (random_points(kernel, 1000, rng) for _ in range(3))
    dxy = geometry.fisher_distance(kernel, X, Y)
    assert np.array_equal(dxy, geometry.fisher_distance(kernel, Y, X))
    slack = geometry.fisher_distance(kernel, X, Z) + geometry.fisher_distance(kernel, Z, Y) - dxy
    assert np.min(slack) >= -1e-12


def test_fejer_distance_is_torus_invariant():
    kernel = geometry.fejer_kernel(16, 2)
    x = np.array([0.3, 0.9])
    for k in range(2):
        assert geometry.fisher_distance(kernel, x, x + np.eye(2)[k]) <= 1e-9
    assert geometry.fisher_distance(kernel, [0.05, 0.0], [0.95, 0.0]) == pytest.approx(
        0.1 * np.sqrt(geometry.fejer_constant(16)))


@pytest.mark.parametrize('family,d', [(f, d) for f in FAMILIES for d in (1, 2)])
def test_derivative_normalization_on_the_diagonal(family, d):
    kernel = make_kernel(family, d)
    x = random_points(kernel, 1, np.random.default_rng(SEED))[0]
    assert np.allclose(geometry.kernel_deriv(kernel, 1, 0, x, x).value, 0.0, atol=1e-12)
    assert np.allclose(geometry.kernel_deriv(kernel, 0, 2, x, x).value, -np.eye(d), atol=1e-10)
    assert np.allclose(geometry.kernel_deriv(kernel, 1, 1, x, x).value, np.eye(d), atol=1e-10)


@pytest.mark.parametrize('family', FAMILIES)
@pytest.mark.parametrize('i,j', [(0, 1), (0, 2), (1, 1), (1, 2), (2, 2)])
def test_derivative_blocks_are_hermitian(family, i, j):
    kernel = make_kernel(family, 2)
    rng = np.random.default_rng(SEED)
    for x, xp in zip(random_points(kernel, 5, rng), random_points(kernel, 5, rng)):
        left = geometry.kernel_deriv(kernel, i, j, x, xp).value
        right = geometry.kernel_deriv(kernel, j, i, xp, x).value
        swapped = np.transpose(right, list(range(j, j + i)) + list(range(j)))
        assert np.allclose(left, np.conj(swapped), atol=1e-10)


def test_fejer_second_derivative_matches_finite_differences():
    kernel = geometry.fejer_kernel(128)
    C = geometry.fejer_constant(128)
    x, xp = 0.2, 0.2 + 0.3 / 128
    h = 1e-4 / np.sqrt(C)
    fd = (geometry.kernel_eval(kernel, x, xp + h) - 2.0 * geometry.kernel_eval(kernel, x, xp)
          + geometry.kernel_eval(kernel, x, xp - h)) / (h * h * C)
    value = geometry.kernel_deriv(kernel, 0, 2, x, xp).value[0, 0]
    assert value == pytest.approx(fd, rel=1e-5)


def test_gaussian_first_derivative_matches_closed_form():
    sigma = np.array([[2.0, 0.5], [0.5, 1.0]])
    kernel = geometry.gaussian_kernel(sigma)
    x, xp = np.array([0.3, -0.2]), np.array([1.1, 0.4])
    raw = -np.linalg.solve(sigma, x - xp) * geometry.kernel_eval(kernel, x, xp)
    expected = geometry.normalize_derivative(np.linalg.inv(sigma), raw)
    assert np.allclose(geometry.kernel_deriv(kernel, 1, 0, x, xp).value, expected, atol=1e-12)


class TestLaplaceIdentities:
    kernel = geometry.laplace_kernel([1.0])

    def pairs(self):
        rng = np.random.default_rng(SEED)
        return rng.uniform(0.0, 20.0, (100, 2))

    def test_value_is_sech_of_distance(self):
        for x, xp in self.pairs():
            dist = geometry.fisher_distance(self.kernel, x, xp)
            assert geometry.kernel_eval(self.kernel, x, xp) == pytest.approx(1.0 / np.cosh(dist), abs=1e-12)

    def test_first_derivative_is_tanh_times_value(self):
        for x, xp in self.pairs():
            dist = geometry.fisher_distance(self.kernel, x, xp)
            k10 = geometry.kernel_deriv(self.kernel, 1, 0, x, xp).value[0]
            value = geometry.kernel_eval(self.kernel, x, xp)
            assert abs(k10) == pytest.approx(np.tanh(dist) * value, abs=1e-8)

    def test_diagonal_constants(self):
        for x, _ in self.pairs():
            assert geometry.kernel_deriv(self.kernel, 1, 1, x, x).value[0, 0] == pytest.approx(1.0, abs=1e-8)
            assert geometry.kernel_deriv(self.kernel, 2, 2, x, x).value[0, 0, 0, 0] == pytest.approx(9.0, abs=1e-8)

    def test_negative_coordinates_are_rejected(self):
        with pytest.raises(InputError):
            geometry.kernel_eval(self.kernel, -0.1, 1.0)


def test_unsupported_derivative_order():
    with pytest.raises(InputError):
        geometry.kernel_deriv(geometry.gaussian_kernel(1.0), 3, 0, 0.0, 0.0)


def test_normalize_derivative_known_values():
    raw = np.array([[1.0, -2.0], [0.5, 3.0]])
    assert np.array_equal(geometry.normalize_derivative(np.eye(2), raw), raw)
    assert np.allclose(geometry.normalize_derivative(4.0 * np.eye(2), [8.0, 0.0]), [4.0, 0.0])
    expected = np.array([[1 / 4, 1 / 6], [1 / 6, 1 / 9]])
    assert np.allclose(geometry.normalize_derivative(np.diag([4.0, 9.0]), np.ones((2, 2))), expected)
    assert geometry.normalize_derivative(np.eye(2), 2.5) == 2.5


def test_normalize_derivative_rejects_non_spd():
    with pytest.raises(NumericalError):
        geometry.normalize_derivative(np.diag([1.0, -1.0]), [1.0, 1.0])


def test_metric_grid_is_uniform_in_the_chart():
    kernel = geometry.laplace_kernel([1.0])
    box = geometry.DomainBox((0.0,), (50.0,))
    X, spacing = geometry.metric_grid(kernel, box, 0.1)
    assert spacing == 0.1
    steps = np.diff(geometry.to_chart(kernel, X)[:, 0])
    assert np.allclose(steps, 0.1)
    assert np.all(X >= 0.0) and np.all(X <= 50.0)


def test_metric_grid_coarsens_beyond_max_points():
    kernel = geometry.gaussian_kernel(np.eye(2))
    box = geometry.DomainBox((0.0, 0.0), (10.0, 10.0))
    X, spacing = geometry.metric_grid(kernel, box, 0.01, max_points=1000)
    assert X.shape[0] <= 1000
    assert spacing > 0.01
