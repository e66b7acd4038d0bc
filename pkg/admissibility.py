"""
Admissible-kernel verification.

All three kernel families are translation invariant in their chart, so every
condition is a statement about chart differences u = z(x) - z(x') and
d_H(x, x') = |u|. The scans sample u by regime:

    near  |u| <= r_near
    gap   r_near <= |u| <= Delta/4
    tail  |u| >= Delta/4  (truncated where the kernel has decayed, or at the torus edge)
"""

import dataclasses
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.optimize import minimize

import console
import geometry
from certificates import PASS_TOL, GridSpec
from errors import CertificationError, InputError, UnsupportedConstantsError

UNIFORM_ORDERS = {(0, 0): 'global', (1, 0): 'global', (0, 2): 'near_or_tail',
                  (1, 1): 'near_or_tail', (1, 2): 'near_or_tail', (2, 2): 'diagonal'}
SEPARATION_ORDERS = ((0, 0), (1, 0), (1, 1), (0, 2), (1, 2))
TAIL_EXTENT = {geometry.GAUSSIAN: 8.0, geometry.LAPLACE: 30.0}
SEPARATION_REL_TOL = 0.01
SEARCH_SPAN = 1e6
ROUNDING_FACTOR = 64.0
BOUND_SLACK = 1e-6
# stated growth of the uniform bounds in d; measured values must stay within ORDER_FACTOR of them
BOUND_ORDERS = {
    geometry.FEJER: {(1, 0): lambda d: np.sqrt(d), (2, 2): lambda d: d + 1.0},
    geometry.GAUSSIAN: {(2, 2): lambda d: d + 1.0},
    geometry.LAPLACE: {(2, 2): lambda d: 16.0 * d + 9.0},
}
ORDER_FACTOR = 2.0

FEJER_MIN_FC = 128
FEJER_CONSTANTS = dict(r_near=1.0 / (8.0 * np.sqrt(2.0)), eps0=0.00097, eps2=0.941, C_H=0.0)
GAUSSIAN_CONSTANTS = dict(r_near=1.0 / np.sqrt(2.0), eps0=1.0 - np.exp(-0.25),
                          eps2=0.5 * np.exp(-0.25), C_H=0.0)
LAPLACE_CONSTANTS = dict(r_near=0.1, eps0=0.0049, eps2=0.38, C_H=2.5)
LAPLACE_PUBLISHED = dict(r_near=0.2, eps0=0.005, eps2=1.52, C_H=1.25)


def compute_h(B, eps0, eps2):
    """h = min(eps0/(32 B10 + 32), eps2/(32 B12 + 32), 5 eps2/(16 B12 + 24))."""
    return min(eps0 / (32.0 * B[(1, 0)] + 32.0),
               eps2 / (32.0 * B[(1, 2)] + 32.0),
               5.0 * eps2 / (16.0 * B[(1, 2)] + 24.0))


@dataclass
class AdmissibilityParams:
    r_near: float
    Delta: float
    eps0: float
    eps2: float
    s_max: int
    C_H: float = 0.0
    B: dict = None
    h: float = None
    source: str = 'custom'

    def __post_init__(self):
        if self.B is not None and self.h is None:
            self.h = compute_h(self.B, self.eps0, self.eps2)

    def with_bounds(self, B):
        return dataclasses.replace(self, B=dict(B), h=compute_h(B, self.eps0, self.eps2))

    def preamble_margin(self):
        """Smallest slack in 0 < r_near < Delta/4, eps0 in (0,1), eps2 in (0, r_near^-2)."""
        delta = self.Delta if self.Delta is not None else np.inf
        return float(min(delta / 4.0 - self.r_near, self.r_near, self.eps0, 1.0 - self.eps0,
                         self.eps2, self.r_near ** -2 - self.eps2))

    def imag_constant(self):
        r2 = self.eps2 * self.r_near ** 2
        return 0.5 * np.sqrt((2.0 - r2) / r2)


@dataclass
class ConditionResult:
    condition: str
    regime: str
    measured: float
    bound: float
    margin: float
    passed: bool
    worst_u: np.ndarray = field(default=None, repr=False)


@dataclass
class AdmissibilityReport:
    params: AdmissibilityParams
    conditions: list
    measured_B: dict

    @property
    def passed(self):
        return all(c.passed for c in self.conditions)

    @property
    def failed(self):
        return [c.condition for c in self.conditions if not c.passed]

    def margin(self, condition):
        return next(c.margin for c in self.conditions if c.condition == condition)

    def to_frame(self, kernel):
        rows = []
        for c in self.conditions:
            row = dict(condition=c.condition, regime=c.regime, measured=c.measured,
                       bound=c.bound, margin=c.margin, passed=c.passed)
            if c.worst_u is not None:
                x, xp = point_pair(kernel, c.worst_u)
                row.update({f"x_{k + 1}": v for k, v in enumerate(x)})
                row.update({f"xp_{k + 1}": v for k, v in enumerate(xp)})
            rows.append(row)
        return pd.DataFrame(rows)


def _reference_chart(kernel, reach):
    if kernel.family == geometry.LAPLACE:
        return 0.5 * np.log(kernel.alpha) + reach
    return np.zeros(kernel.d)


def point_pair(kernel, u):
    """A domain pair (x, x') whose chart difference is u."""
    u = np.asarray(u, dtype=float)
    z0 = _reference_chart(kernel, float(np.linalg.norm(u)) + 1.0)
    return geometry.from_chart(kernel, z0 + u), geometry.from_chart(kernel, z0)


def sphere_points(d, radius, spacing, max_points=None):
    """Points on the sphere |u| = radius at roughly the given spacing."""
    if radius <= 0:
        return np.zeros((1, d))
    if d == 1:
        return np.array([[-radius], [radius]])
    if d == 2:
        n = max(8, int(np.ceil(2.0 * np.pi * radius / spacing)))
        if max_points:
            n = min(n, max_points)
        theta = 2.0 * np.pi * np.arange(n) / n
        return radius * np.stack([np.cos(theta), np.sin(theta)], axis=1)
    if d == 3:
        n = max(16, int(np.ceil(4.0 * np.pi * (radius / spacing) ** 2)))
        if max_points:
            n = min(n, max_points)
        i = np.arange(n) + 0.5
        phi = np.arccos(1.0 - 2.0 * i / n)
        theta = np.pi * (1.0 + np.sqrt(5.0)) * i
        return radius * np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi),
                                  np.cos(phi)], axis=1)
    k = max(2, int(np.ceil(2.0 * radius / spacing)))
    axis = np.linspace(-1.0, 1.0, k + 1)
    C = np.stack(np.meshgrid(*([axis] * d), indexing='ij'), axis=-1).reshape(-1, d)
    C = C[np.max(np.abs(C), axis=1) >= 1.0 - 1e-12]
    return radius * C / np.linalg.norm(C, axis=1, keepdims=True)


def _sphere_count(d, radius, spacing):
    if radius <= 0:
        return 1
    if d == 1:
        return 2
    if d == 2:
        return max(8, 2.0 * np.pi * radius / spacing)
    return max(16, 4.0 * np.pi * (radius / spacing) ** (d - 1))


def annulus_samples(kernel, lo, hi, spacing, max_points):
    """Concentric spheres covering lo <= |u| <= hi, coarsened to at most ~max_points."""
    d = kernel.d
    if hi < lo:
        return np.zeros((0, d))
    while True:
        radii = np.linspace(lo, hi, max(1, int(np.ceil((hi - lo) / spacing)) + 1))
        total = sum(_sphere_count(d, r, spacing) for r in radii)
        if total <= max_points:
            break
        spacing *= 1.5
    pts = np.vstack([sphere_points(d, r, spacing) for r in radii])
    if kernel.family == geometry.FEJER:
        pts = pts[np.all(np.abs(pts) <= 0.5 * kernel._scale, axis=1)]
    return pts


def _tail_limit(kernel, Delta):
    if kernel.family == geometry.FEJER:
        return 0.5 * kernel._scale * np.sqrt(kernel.d)
    limit = Delta / 4.0 + TAIL_EXTENT[kernel.family]
    if kernel.domain_radius is not None:
        limit = min(limit, 2.0 * kernel.domain_radius)
    return limit


def regime_samples(kernel, params, grid_spec=None):
    spec = grid_spec or GridSpec()
    far_sp, near_sp = spec.spacings(params.r_near)
    quarter = params.Delta / 4.0
    limit = _tail_limit(kernel, params.Delta)
    near = annulus_samples(kernel, 0.0, params.r_near, near_sp, spec.max_points)
    gap = annulus_samples(kernel, params.r_near, min(quarter, limit), far_sp, spec.max_points)
    tail = annulus_samples(kernel, max(quarter, 0.0), limit, far_sp, spec.max_points)
    return dict(near=near, gap=gap, tail=tail, diag=np.zeros((1, kernel.d))), far_sp, near_sp


def block_norms(kernel, U, orders):
    """||K^(ij)|| at chart differences U, as spectral norms of the d^i x d^j unfoldings."""
    U = geometry.wrap_chart(kernel, np.atleast_2d(U))
    blocks = geometry.kernel_blocks(kernel, U, orders)
    d = kernel.d
    out = {}
    for (i, j), B in blocks.items():
        M = B.reshape(U.shape[0], d ** i, d ** j)
        if M.shape[1] == 1 or M.shape[2] == 1:
            out[(i, j)] = np.linalg.norm(M.reshape(U.shape[0], -1), axis=1)
        else:
            out[(i, j)] = np.linalg.norm(M, ord=2, axis=(-2, -1))
    return out


def _refine_max(kernel, fn, U, values, valid, spacing, starts):
    """Local maximization of fn from the best samples, restricted by valid(u)."""
    if U.shape[0] == 0:
        return -np.inf, None
    best = int(np.argmax(values))
    best_val, best_u = float(values[best]), U[best]
    for k in np.argsort(values)[::-1][:starts]:

        def objective(u):
            if not valid(u):
                return np.inf
            return -float(fn(u[None])[0])

        bounds = [(c - spacing, c + spacing) for c in U[k]]
        res = minimize(objective, U[k], method='Nelder-Mead', bounds=bounds,
                       options={'maxiter': 200, 'xatol': 1e-10, 'fatol': 1e-14})
        if np.isfinite(res.fun) and -res.fun > best_val:
            best_val, best_u = float(-res.fun), res.x
    return best_val, best_u


def _norm_fn(kernel, order):
    return lambda U: block_norms(kernel, U, [order])[order]


def _radius(kernel, u):
    return float(np.linalg.norm(geometry.wrap_chart(kernel, np.asarray(u))))


def _curvature_fn(kernel):
    def fn(U):
        K02 = geometry.kernel_blocks(kernel, geometry.wrap_chart(kernel, U), [(0, 2)])[(0, 2)]
        sym = 0.5 * (K02 + np.swapaxes(K02, -1, -2))
        return np.linalg.eigvalsh(sym)[:, -1]
    return fn


def _metric_fn(kernel, r_near):
    z0 = _reference_chart(kernel, r_near + 1.0)
    x0 = geometry.from_chart(kernel, z0)
    left = geometry.sym_matrix_power(geometry.metric_tensor(kernel, x0), -0.5)
    left_norm = np.linalg.norm(left, ord=2)

    def fn(U):
        X = geometry.from_chart(kernel, z0 + U)
        w, V = np.linalg.eigh(geometry.metric_tensor(kernel, X))
        root = np.einsum('nij,nj,nkj->nik', V, np.sqrt(w), V)
        D = np.eye(kernel.d) - left @ root
        normD = np.linalg.norm(D, ord=2, axis=(-2, -1))
        # I - H^-1/2 H^1/2 is only rounding for constant metrics
        scale = np.maximum(1.0, left_norm * np.sqrt(w.max(axis=-1)))
        floor = ROUNDING_FACTOR * np.finfo(float).eps * scale
        normD = np.where(normD <= floor, 0.0, normD)
        dist = np.linalg.norm(U, axis=1)
        ratio = normD / np.where(dist > 0, dist, 1.0)
        return np.where(dist > 0, ratio, 0.0)
    return fn


def bound_order_ratios(kernel, B):
    """Measured uniform bounds over their stated growth in d."""
    return {order: B[order] / ref(kernel.d) for order, ref in BOUND_ORDERS[kernel.family].items()}


def _condition(name, regime, measured, bound, worst_u=None, upper=True):
    margin = (bound - measured) if upper else (measured - bound)
    return ConditionResult(name, regime, float(measured), float(bound), float(margin),
                           bool(margin >= -PASS_TOL), worst_u)


def measure_uniform_bounds(kernel, params, grid_spec=None):
    """Suprema of ||K^(ij)|| over the regimes of the uniform-bound condition."""
    spec = grid_spec or GridSpec()
    samples, far_sp, near_sp = regime_samples(kernel, params, spec)
    everywhere = np.vstack([samples['near'], samples['gap'], samples['tail']])
    near_or_tail = np.vstack([samples['near'], samples['tail']])
    quarter = params.Delta / 4.0
    measured = {}
    for order, regime in UNIFORM_ORDERS.items():
        if regime == 'diagonal':
            measured[order] = (float(block_norms(kernel, samples['diag'], [order])[order][0]),
                               samples['diag'][0])
            continue
        U = everywhere if regime == 'global' else near_or_tail
        if regime == 'global':
            valid = lambda u: True
        else:
            valid = (lambda u: _radius(kernel, u) <= params.r_near
                     or _radius(kernel, u) > quarter)
        values = block_norms(kernel, U, [order])[order]
        spacing = near_sp if regime != 'global' else far_sp
        measured[order] = _refine_max(kernel, _norm_fn(kernel, order), U, values, valid,
                                      spacing, spec.ascent_starts)
    return measured, samples, far_sp, near_sp


def verify_admissible(kernel, params, grid_spec=None):
    """Check every admissibility condition; uniform bounds default to their measured suprema."""
    spec = grid_spec or GridSpec()
    if params.Delta is None:
        raise InputError("verification needs a separation Delta")
    measured, samples, far_sp, near_sp = measure_uniform_bounds(kernel, params, spec)
    measured_B = {order: val for order, (val, _) in measured.items()}
    used = params if params.B is not None else params.with_bounds(measured_B)
    conditions = [_condition('preamble', 'constants', -params.preamble_margin(), 0.0)]

    for order, (val, u) in measured.items():
        conditions.append(_condition(f"uniform_{order[0]}{order[1]}", UNIFORM_ORDERS[order],
                                     val, used.B[order], u))

    near = samples['near']
    quarter = params.Delta / 4.0
    r_near = params.r_near
    in_near = lambda u: _radius(kernel, u) <= r_near
    curvature = _curvature_fn(kernel)
    val, u = _refine_max(kernel, curvature, near, curvature(near), in_near, near_sp,
                         spec.ascent_starts)
    conditions.append(_condition('neighborhood_curvature', 'near', val, -params.eps2, u))
    # the three limit kernels are real, so Im K^(02) vanishes identically
    conditions.append(_condition('neighborhood_imag', 'near', 0.0,
                                 params.imag_constant() * params.eps2))

    outside = np.vstack([samples['gap'], samples['tail']])
    beyond = lambda u: _radius(kernel, u) >= r_near
    fn = _norm_fn(kernel, (0, 0))
    val, u = _refine_max(kernel, fn, outside, fn(outside), beyond, far_sp, spec.ascent_starts)
    conditions.append(_condition('neighborhood_decay', 'gap_and_tail',
                                 max(val, 0.0), 1.0 - params.eps0, u))

    tail = samples['tail']
    threshold = used.h / params.s_max
    in_tail = lambda u: _radius(kernel, u) >= quarter
    if tail.shape[0] == 0:
        console.debug("separation region is empty on this domain; condition holds vacuously")
    for order in SEPARATION_ORDERS:
        fn = _norm_fn(kernel, order)
        values = fn(tail) if tail.shape[0] else np.zeros(0)
        val, u = _refine_max(kernel, fn, tail, values, in_tail, far_sp, spec.ascent_starts)
        conditions.append(_condition(f"separation_{order[0]}{order[1]}", 'tail',
                                     max(val, 0.0), threshold, u))

    metric = _metric_fn(kernel, r_near)
    val, u = _refine_max(kernel, metric, near, metric(near), in_near, near_sp, spec.ascent_starts)
    conditions.append(_condition('metric_lipschitz', 'near', val, params.C_H, u))
    ratios = bound_order_ratios(kernel, measured_B)
    if ratios:
        conditions.append(_condition('bound_orders', 'constants', max(ratios.values()),
                                     ORDER_FACTOR))
    return AdmissibilityReport(used, conditions, measured_B)


def laplace_separation(d, s_max, h, convention='fisher'):
    """Sufficient Laplace separation; published form is in that convention's distance units."""
    threshold = 2.0 * d * np.log(2.0) + 2.0 * np.log(52.0 * d ** 1.5 * s_max / h)
    if convention == 'published':
        return threshold
    # Fisher distance is half the published one; the decay must hold from Delta/4 on
    return 4.0 * 0.5 * threshold


def _base_constants(kernel, convention):
    if kernel.family == geometry.FEJER:
        if kernel.f_c < FEJER_MIN_FC:
            raise UnsupportedConstantsError(
                f"tabulated fejer constants need f_c >= {FEJER_MIN_FC}, got {kernel.f_c}")
        return FEJER_CONSTANTS
    if kernel.family == geometry.GAUSSIAN:
        return GAUSSIAN_CONSTANTS
    return LAPLACE_PUBLISHED if convention == 'published' else LAPLACE_CONSTANTS


def tabulated_constants(kernel, s_max, convention='fisher', grid_spec=None, resolve_delta=True):
    """Tabulated admissibility constants of a kernel family, with Delta instantiated."""
    if convention not in ('fisher', 'published'):
        raise InputError(f"unknown convention '{convention}'")
    base = _base_constants(kernel, convention)
    source = f"{kernel.family}:{convention}"
    template = AdmissibilityParams(Delta=None, s_max=int(s_max), source=source, **base)
    if kernel.family == geometry.LAPLACE:
        # B depends on Delta only through the tail regime; two passes settle it
        delta = 4.0 * TAIL_EXTENT[geometry.LAPLACE]
        for _ in range(2):
            trial = dataclasses.replace(template, Delta=delta)
            measured, _, _, _ = measure_uniform_bounds(kernel, trial, grid_spec)
            # stored with slack so re-measuring at the final Delta reproduces them
            B = {order: val * (1.0 + BOUND_SLACK) for order, (val, _) in measured.items()}
            delta = laplace_separation(kernel.d, s_max, compute_h(B, template.eps0, template.eps2),
                                       convention)
        return dataclasses.replace(template, Delta=delta).with_bounds(B)
    if not resolve_delta:
        return template
    delta = minimal_certified_separation(kernel, s_max, template, grid_spec)
    return dataclasses.replace(template, Delta=delta)


def minimal_certified_separation(kernel, s_max, params_template, grid_spec=None,
                                 rel_tol=SEPARATION_REL_TOL):
    """Smallest Delta (to rel_tol) at which verify_admissible passes, by log-bisection."""
    r_near = params_template.r_near

    def passes(delta):
        params = dataclasses.replace(params_template, Delta=delta, s_max=int(s_max), B=None, h=None)
        report = verify_admissible(kernel, params, grid_spec)
        console.debug(f"Delta={delta:.6g}: {'pass' if report.passed else 'fail ' + ','.join(report.failed)}")
        return report.passed

    lo = 4.0 * r_near * (1.0 + 1e-9)
    hi = SEARCH_SPAN * r_near
    if kernel.family == geometry.LAPLACE and params_template.B is not None:
        hi = min(hi, laplace_separation(kernel.d, s_max, compute_h(params_template.B,
                                                                   params_template.eps0,
                                                                   params_template.eps2)))
    if passes(lo):
        return lo
    if not passes(hi):
        raise CertificationError(f"no certified separation in [{lo:.4g}, {hi:.4g}]", (lo, hi))
    while hi / lo > 1.0 + rel_tol:
        mid = np.sqrt(lo * hi)
        if passes(mid):
            hi = mid
        else:
            lo = mid
    return float(hi)
