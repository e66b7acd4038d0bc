import dataclasses

import numpy as np
import pytest

import admissibility
import geometry
from admissibility import AdmissibilityParams, FEJER_CONSTANTS, GAUSSIAN_CONSTANTS, LAPLACE_CONSTANTS
from certificates import GridSpec
from errors import InputError, UnsupportedConstantsError

NEIGHBORHOOD = ('neighborhood_curvature', 'neighborhood_imag', 'neighborhood_decay', 'metric_lipschitz')


def condition(report, name):
    return next(c for c in report.conditions if c.condition == name)


def test_compute_h():
    B = {(1, 0): 1.0, (1, 2): 2.0}
    # min(0.1 / 64, 0.5 / 96, 2.5 / 56)
    assert admissibility.compute_h(B, 0.1, 0.5) == pytest.approx(0.1 / 64.0)


def test_params_fill_h_from_bounds():
    B = {(1, 0): 0.0, (1, 2): 0.0}
    params = AdmissibilityParams(r_near=0.5, Delta=4.0, eps0=0.32, eps2=0.32, s_max=2, B=B)
    assert params.h == pytest.approx(0.01)
    assert params.preamble_margin() == pytest.approx(0.32)


def test_gaussian_block_norms_at_the_diagonal():
    for d in (1, 2, 3):
        kernel = geometry.gaussian_kernel(np.eye(d))
        norms = admissibility.block_norms(kernel, np.zeros((1, d)), [(0, 0), (1, 1), (2, 2), (1, 0)])
        assert norms[(0, 0)][0] == pytest.approx(1.0)
        assert norms[(1, 1)][0] == pytest.approx(1.0)
        assert norms[(2, 2)][0] == pytest.approx(d + 2.0)
        assert norms[(1, 0)][0] == pytest.approx(0.0, abs=1e-12)


def test_gaussian_constants_hold_at_wide_separation():
    kernel = geometry.gaussian_kernel(1.0)
    params = AdmissibilityParams(Delta=40.0, s_max=2, source='gaussian', **GAUSSIAN_CONSTANTS)
    report = admissibility.verify_admissible(kernel, params)
    assert report.passed, report.failed
    assert report.params.h is not None
    assert report.measured_B[(2, 2)] == pytest.approx(3.0, rel=1e-6)
    assert report.margin('bound_orders') > 0
    frame = report.to_frame(kernel)
    assert {'condition', 'regime', 'measured', 'bound', 'margin', 'passed'} <= set(frame.columns)
    assert len(frame) == len(report.conditions)


def test_close_separation_fails_the_tail_decay():
    kernel = geometry.gaussian_kernel(1.0)
    params = AdmissibilityParams(Delta=4.0, s_max=2, **GAUSSIAN_CONSTANTS)
    report = admissibility.verify_admissible(kernel, params)
    assert not report.passed
    assert 'separation_00' in report.failed
    assert report.margin('separation_00') < 0


def test_separation_below_four_r_near_fails_the_preamble():
    kernel = geometry.gaussian_kernel(1.0)
    params = AdmissibilityParams(Delta=2.0, s_max=1, **GAUSSIAN_CONSTANTS)
    report = admissibility.verify_admissible(kernel, params)
    assert 'preamble' in report.failed


def test_verification_needs_delta():
    params = AdmissibilityParams(Delta=None, s_max=1, **GAUSSIAN_CONSTANTS)
    with pytest.raises(InputError):
        admissibility.verify_admissible(geometry.gaussian_kernel(1.0), params)


def test_laplace_neighborhood_conditions():
    kernel = geometry.laplace_kernel(1.0)
    params = AdmissibilityParams(Delta=100.0, s_max=2, **LAPLACE_CONSTANTS)
    report = admissibility.verify_admissible(kernel, params)
    for name in NEIGHBORHOOD:
        assert name not in report.failed


def test_strict_curvature_bound_fails():
    kernel = geometry.gaussian_kernel(1.0)
    constants = dict(GAUSSIAN_CONSTANTS, eps2=0.9)
    report = admissibility.verify_admissible(kernel, AdmissibilityParams(Delta=40.0, s_max=1, **constants))
    assert 'neighborhood_curvature' in report.failed


def test_laplace_separation_conventions():
    published = admissibility.laplace_separation(1, 2, 0.01, convention='published')
    assert published == pytest.approx(2.0 * np.log(2.0) + 2.0 * np.log(52.0 * 2 / 0.01))
    assert admissibility.laplace_separation(1, 2, 0.01) == pytest.approx(2.0 * published)


def test_fejer_constants_need_a_large_cutoff():
    with pytest.raises(UnsupportedConstantsError):
        admissibility.tabulated_constants(geometry.fejer_kernel(16), 2)


def test_unknown_convention():
    with pytest.raises(InputError):
        admissibility.tabulated_constants(geometry.gaussian_kernel(1.0), 2, convention='other')


def test_unresolved_constants_keep_delta_open():
    params = admissibility.tabulated_constants(geometry.gaussian_kernel(1.0), 3, resolve_delta=False)
    assert params.Delta is None
    assert params.s_max == 3
    assert params.r_near == pytest.approx(1.0 / np.sqrt(2.0))


def test_point_pair_realizes_the_chart_difference():
    kernel = geometry.laplace_kernel([1.0, 2.0])
    u = np.array([0.3, -0.4])
    x, xp = admissibility.point_pair(kernel, u)
    assert np.all(xp >= 0) and np.all(x >= 0)
    assert np.allclose(geometry.chart_difference(kernel, x, xp), u)


@pytest.mark.parametrize('d', [1, 2, 3, 4])
def test_sphere_points_lie_on_the_sphere(d):
    pts = admissibility.sphere_points(d, 2.0, 0.5)
    assert np.allclose(np.linalg.norm(pts, axis=1), 2.0)


@pytest.mark.slow
def test_minimal_separation_is_tight():
    kernel = geometry.gaussian_kernel(1.0)
    spec = GridSpec(max_refinements=1)
    template = AdmissibilityParams(Delta=None, s_max=2, **GAUSSIAN_CONSTANTS)
    delta = admissibility.minimal_certified_separation(kernel, 2, template, spec)
    assert 4.0 * template.r_near < delta < 40.0
    at = dataclasses.replace(template, Delta=delta)
    assert admissibility.verify_admissible(kernel, at, spec).passed
    below = dataclasses.replace(template, Delta=delta / 1.05)
    assert not admissibility.verify_admissible(kernel, below, spec).passed


def test_constant_metric_has_no_lipschitz_term():
    kernel = geometry.gaussian_kernel(2.0)
    params = AdmissibilityParams(Delta=40.0, s_max=2, **GAUSSIAN_CONSTANTS)
    report = admissibility.verify_admissible(kernel, params)
    assert report.passed, report.failed
    assert condition(report, 'metric_lipschitz').measured == 0.0


def test_laplace_metric_lipschitz_constant():
    kernel = geometry.laplace_kernel(1.0)
    params = AdmissibilityParams(Delta=100.0, s_max=2, **LAPLACE_CONSTANTS)
    report = admissibility.verify_admissible(kernel, params)
    # |1 - exp(-2u)| / |u| over |u| <= r_near peaks at u = -r_near
    measured = condition(report, 'metric_lipschitz').measured
    assert measured == pytest.approx((np.exp(0.2) - 1.0) / 0.1, rel=1e-6)
    assert 'metric_lipschitz' not in report.failed


def test_laplace_tabulated_constants_are_admissible():
    kernel = geometry.laplace_kernel(1.0)
    params = admissibility.tabulated_constants(kernel, 2)
    assert params.Delta == pytest.approx(admissibility.laplace_separation(1, 2, params.h))
    report = admissibility.verify_admissible(kernel, params)
    assert report.passed, report.failed


@pytest.mark.slow
def test_fejer_tabulated_constants_are_admissible():
    kernel = geometry.fejer_kernel(128)
    params = admissibility.tabulated_constants(kernel, 2)
    assert np.isfinite(params.Delta)
    assert params.Delta > 4.0 * params.r_near
    report = admissibility.verify_admissible(kernel, params)
    assert report.passed, report.failed
    assert condition(report, 'metric_lipschitz').measured == 0.0


def order_kernel(family, d):
    if family == geometry.FEJER:
        return geometry.fejer_kernel(16, d), FEJER_CONSTANTS
    if family == geometry.GAUSSIAN:
        return geometry.gaussian_kernel(np.eye(d)), GAUSSIAN_CONSTANTS
    return geometry.laplace_kernel([1.0, 0.5, 2.0][:d]), LAPLACE_CONSTANTS


@pytest.mark.parametrize('d', [1, 2, 3])
@pytest.mark.parametrize('family', [geometry.FEJER, geometry.GAUSSIAN, geometry.LAPLACE])
def test_measured_bounds_follow_the_stated_orders(family, d):
    kernel, constants = order_kernel(family, d)
    params = AdmissibilityParams(Delta=8.0, s_max=2, **constants)
    spec = GridSpec(far_spacing=0.25, near_spacing=0.05, max_points=20_000)
    measured, _, _, _ = admissibility.measure_uniform_bounds(kernel, params, spec)
    ratios = admissibility.bound_order_ratios(kernel, {order: val for order, (val, _) in measured.items()})
    assert ratios
    assert max(ratios.values()) <= admissibility.ORDER_FACTOR


@pytest.mark.slow
def test_gaussian_separation_grows_like_root_log():
    kernel = geometry.gaussian_kernel(1.0)
    spec = GridSpec(max_refinements=1)
    template = AdmissibilityParams(Delta=None, s_max=2, **GAUSSIAN_CONSTANTS)
    s_max = np.array([2, 8, 32, 128])
    deltas = np.array([admissibility.minimal_certified_separation(kernel, s, template, spec)
                       for s in s_max])
    assert np.all(np.diff(deltas) > 0)
    # Delta^2 is affine in log s_max
    slope, intercept = np.polyfit(np.log(s_max), deltas ** 2, 1)
    assert slope > 0
    residual = np.abs(slope * np.log(s_max) + intercept - deltas ** 2) / deltas ** 2
    assert residual.max() <= 0.05


@pytest.mark.slow
def test_fejer_separation_does_not_depend_on_the_cutoff():
    template = AdmissibilityParams(Delta=None, s_max=2, **FEJER_CONSTANTS)
    spec = GridSpec(max_refinements=1)
    deltas = [admissibility.minimal_certified_separation(geometry.fejer_kernel(f_c), 2, template, spec)
              for f_c in (128, 256)]
    assert deltas[1] == pytest.approx(deltas[0], rel=0.15)
