"""
Vanishing-derivative pre-certificates, dual certificates and nondegeneracy checks.

Gamma_X stacks the columns sqrt(w) phi(x_i) and sqrt(w) d phi(x_i)[e_k]; the
Gram matrix Gamma^H Gamma has the block layout

    [ K^(00)(x_i, x_j)   K^(01)(x_i, x_j) ]
    [ K^(10)(x_i, x_j)   K^(11)(x_i, x_j) ]

(value rows first, then derivative rows ordered spike-major) and solving
gram [alpha; beta] = [sign(a); 0] gives the minimal-norm interpolating certificate.
"""

from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import linalg
from scipy.optimize import minimize

import console
import features
import geometry
from errors import ConditioningError, InputError

PASS_TOL = 1e-9
MIN_EIGENVALUE = 1e-10
UNIMODULAR_TOL = 1e-9
GRID_CHUNK = 2048
FAR_FRACTION = 10.0
NEAR_FRACTION = 50.0
SHELL_WIDTH = 2.0  # far shells span r_near .. SHELL_WIDTH * r_near around each spike


@dataclass(frozen=True, eq=False)
class GammaSystem:
    X: np.ndarray
    gram: np.ndarray
    rhs: np.ndarray
    kind: str
    smallest_eigenvalue: float
    columns: np.ndarray = None
    op: object = None
    kernel: object = None

    @property
    def s(self):
        return self.X.shape[0]

    @property
    def d(self):
        return self.X.shape[1]


@dataclass(frozen=True, eq=False)
class CertificateCoefficients:
    alpha: np.ndarray
    beta: np.ndarray
    kind: str
    eta: object = None


class Certificate:
    """A function x -> eta(x) with metric-normalized derivatives."""
    kernel = None

    def derivative(self, x, r):
        raise NotImplementedError

    def __call__(self, x):
        return self.derivative(x, 0)

    def scaled(self, factor):
        return ScaledCertificate(self, factor)


class AdjointCertificate(Certificate):
    """eta = Phi^* p."""

    def __init__(self, op, p):
        self.op = op
        self.p = np.asarray(p, dtype=complex)
        self.kernel = op.kernel

    def derivative(self, x, r):
        return features.adjoint_eval(self.op, self.p, x, r)


class LimitCertificate(Certificate):
    """eta(x) = sum_j alpha_j K(x, x_j) + K^(01)(x, x_j) beta_j."""

    def __init__(self, kernel, X, alpha, beta):
        self.kernel = kernel
        self.X = np.atleast_2d(X)
        self.alpha = np.asarray(alpha, dtype=complex)
        self.beta = np.asarray(beta, dtype=complex).reshape(self.X.shape)

    def derivative(self, x, r):
        if r not in (0, 1, 2):
            raise InputError(f"limit certificate derivatives go up to order 2, got {r}")
        x = geometry.check_points(self.kernel, x)
        single = x.ndim == 1
        xb = np.atleast_2d(x)
        out = np.empty((xb.shape[0],) + (self.kernel.d,) * r, dtype=complex)
        for start in range(0, xb.shape[0], GRID_CHUNK):
            chunk = xb[start:start + GRID_CHUNK]
            u = geometry.chart_difference(self.kernel, chunk[:, None, :], self.X[None, :, :])
            blocks = geometry.kernel_blocks(self.kernel, u, [(r, 0), (r, 1)])
            val = np.tensordot(blocks[(r, 0)], self.alpha, axes=([1], [0]))
            val = val + np.einsum('ns...k,sk->n...', blocks[(r, 1)], self.beta)
            out[start:start + GRID_CHUNK] = val
        return out[0] if single else out


class ScaledCertificate(Certificate):

    def __init__(self, base, factor):
        self.base = base
        self.factor = factor
        self.kernel = base.kernel

    def derivative(self, x, r):
        return self.factor * self.base.derivative(x, r)


def _check_positions(kernel, X):
    X = np.atleast_2d(geometry.check_points(kernel, X))
    if X.shape[0] < 1:
        raise InputError("at least one position is required")
    if X.shape[0] > 1:
        u = geometry.chart_difference(kernel, X[:, None, :], X[None, :, :])
        dist = np.linalg.norm(u, axis=-1) + np.eye(X.shape[0])
        if np.any(dist < 1e-12):
            raise InputError("positions must be pairwise distinct")
    return X


def _check_signs(signs, s):
    signs = np.atleast_1d(np.asarray(signs, dtype=complex))
    if signs.shape != (s,):
        raise InputError(f"expected {s} signs, got {signs.shape[0]}")
    if np.any(np.abs(np.abs(signs) - 1.0) > UNIMODULAR_TOL):
        raise InputError("signs must be unimodular")
    return signs


def signs_of(amplitudes):
    """sign(a) = a / |a|; zero amplitudes are rejected."""
    a = np.atleast_1d(np.asarray(amplitudes, dtype=complex))
    if np.any(np.abs(a) == 0):
        raise InputError("zero amplitudes have no sign")
    return a / np.abs(a)


def gamma_columns(op, X):
    """Gamma_X as an (m, s(d+1)) matrix."""
    s, d = X.shape
    omegas = op.freqs.omegas
    values = features.feature_derivatives(op.family, omegas, X, 0).T
    grads = features.feature_derivatives(op.family, omegas, X, 1)
    grads = np.transpose(grads, (1, 0, 2)).reshape(op.m, s * d)
    return op.sqrt_weights[:, None] * np.hstack([values, grads])


def _interpolation_rhs(signs, s, d):
    if signs is None:
        return None
    return np.concatenate([_check_signs(signs, s), np.zeros(s * d, dtype=complex)])


def _smallest_eigenvalue(gram):
    return float(linalg.eigvalsh(gram, subset_by_index=[0, 0])[0])


def build_gamma(op, X, signs=None):
    """Empirical metric-normalized Gram system Gamma^H Gamma; rhs is [signs; 0] if signs are given."""
    X = _check_positions(op.kernel, X)
    s, d = X.shape
    if s * (d + 1) > op.m:
        console.warning(f"s(d+1) = {s * (d + 1)} exceeds m = {op.m}: rank-deficient regime")
    G = gamma_columns(op, X)
    gram = G.conj().T @ G
    gram = 0.5 * (gram + gram.conj().T)
    rhs = _interpolation_rhs(signs, s, d)
    return GammaSystem(X, gram, rhs, 'empirical', _smallest_eigenvalue(gram),
                       columns=G, op=op, kernel=op.kernel)


def build_limit_gamma(kernel, X, signs=None):
    """Limit Gram system built from the K^(ij) blocks."""
    X = _check_positions(kernel, X)
    s, d = X.shape
    u = geometry.chart_difference(kernel, X[:, None, :], X[None, :, :])
    blocks = geometry.kernel_blocks(kernel, u, [(0, 0), (0, 1), (1, 0), (1, 1)])
    n = s * (d + 1)
    gram = np.zeros((n, n), dtype=complex)
    gram[:s, :s] = blocks[(0, 0)]
    gram[:s, s:] = blocks[(0, 1)].reshape(s, s * d)
    gram[s:, :s] = np.transpose(blocks[(1, 0)], (0, 2, 1)).reshape(s * d, s)
    gram[s:, s:] = np.transpose(blocks[(1, 1)], (0, 2, 1, 3)).reshape(s * d, s * d)
    return GammaSystem(X, gram, _interpolation_rhs(signs, s, d), 'limit',
                       _smallest_eigenvalue(gram), kernel=kernel)


def gram_distance(op, X):
    """Spectral distance between the empirical and the limit Gram matrices."""
    empirical = build_gamma(op, X).gram
    limit = build_limit_gamma(op.kernel, X).gram
    return float(np.linalg.norm(empirical - limit, ord=2))


def _solve(system, rhs):
    if system.smallest_eigenvalue <= MIN_EIGENVALUE:
        raise ConditioningError(
            f"Gram matrix is singular (smallest eigenvalue {system.smallest_eigenvalue:.3e})",
            system.smallest_eigenvalue)
    factor = linalg.cho_factor(system.gram, lower=True)
    return linalg.cho_solve(factor, rhs)


def precertificate(system, signs=None):
    """Solve gram [alpha; beta] = [signs; 0] and attach the certificate eta."""
    s, d = system.s, system.d
    if signs is not None:
        rhs = _interpolation_rhs(signs, s, d)
    elif system.rhs is not None:
        rhs = system.rhs
    else:
        raise InputError("precertificate needs signs or a system built with them")
    coef = _solve(system, rhs)
    alpha, beta = coef[:s], coef[s:].reshape(s, d)
    if system.kind == 'empirical':
        eta = AdjointCertificate(system.op, system.columns @ coef)
    else:
        eta = LimitCertificate(system.kernel, system.X, alpha, beta)
    return CertificateCoefficients(alpha, beta, system.kind, eta)


def dual_certificate(op, y, lam, mu):
    """eta_lambda = Phi^*((y - Phi mu) / lambda)."""
    if lam <= 0:
        raise InputError(f"lambda must be positive, got {lam}")
    residual = np.asarray(y, dtype=complex) - features.forward(op, mu)
    return AdjointCertificate(op, residual / lam)


def project_out(system, v):
    """Pi_X v: projection onto the orthogonal complement of range(Gamma_X)."""
    if system.columns is None:
        raise InputError("projection needs an empirical Gamma system")
    G = system.columns
    return v - G @ _solve(system, G.conj().T @ v)


@dataclass(frozen=True)
class DecompositionTerms:
    base: np.ndarray
    noise_term: np.ndarray
    taylor_term: np.ndarray

    @property
    def total(self):
        return self.base + self.noise_term + self.taylor_term


def certificate_decomposition(op, X, X0, a0, w, lam, signs, points):
    """
    Evaluate eta_X, Phi^* Pi_X w / lambda and Phi^* Pi_X Phi_{X0} a0 / lambda at points.
    Their sum is the dual certificate of any (a, X) satisfying the interpolation
    conditions for y = Phi_{X0} a0 + w.
    """
    if lam <= 0:
        raise InputError(f"lambda must be positive, got {lam}")
    system = build_gamma(op, X, signs)
    coef = precertificate(system)
    w = np.asarray(w, dtype=complex)
    truth = features.forward(op, features.DiscreteMeasure(a0, X0))
    noise_p = project_out(system, w) / lam
    taylor_p = project_out(system, truth) / lam
    return DecompositionTerms(coef.eta(points),
                              features.adjoint_eval(op, noise_p, points, 0),
                              features.adjoint_eval(op, taylor_p, points, 0))


@dataclass
class GridSpec:
    """Resolution of the certificate and admissibility scans (d_H units)."""
    far_spacing: float = None
    near_spacing: float = None
    box: geometry.DomainBox = None
    refine: bool = True
    max_refinements: int = 3
    max_points: int = 200_000
    ascent_starts: int = 5

    def spacings(self, r_near):
        far = self.far_spacing if self.far_spacing is not None else r_near / FAR_FRACTION
        near = self.near_spacing if self.near_spacing is not None else r_near / NEAR_FRACTION
        return far, near


@dataclass
class NondegeneracyReport:
    eps0_measured: float
    eps2_measured: float
    worst_far_point: np.ndarray
    worst_near_point: np.ndarray
    passed: bool
    eps0: float
    eps2: float
    r_near: float
    max_abs_eta: float
    hessian_margin: float
    overlap: bool
    refinements: int
    points: np.ndarray = field(repr=False, default=None)
    abs_eta: np.ndarray = field(repr=False, default=None)
    region: np.ndarray = field(repr=False, default=None)
    margin: np.ndarray = field(repr=False, default=None)

    @property
    def hessian_passed(self):
        return self.hessian_margin >= -PASS_TOL

    def to_frame(self):
        frame = pd.DataFrame(self.points, columns=[f"x_{k + 1}" for k in range(self.points.shape[1])])
        frame['abs_eta'] = self.abs_eta
        frame['region'] = self.region
        frame['margin'] = self.margin
        return frame


def ball_offsets(d, r_lo, r_hi, spacing, max_points=None):
    """Lattice offsets with r_lo <= |o| <= r_hi (chart units); contains +-r_hi on each axis."""
    n = max(1, int(np.ceil(r_hi / spacing)))
    if max_points is not None and (2 * n + 1) ** d > max_points:
        n = max(1, int(0.5 * (max_points ** (1.0 / d) - 1)))
    axis = np.linspace(-r_hi, r_hi, 2 * n + 1)
    O = np.stack(np.meshgrid(*([axis] * d), indexing='ij'), axis=-1).reshape(-1, d)
    radius = np.linalg.norm(O, axis=1)
    return O[(radius >= r_lo - 1e-12) & (radius <= r_hi + 1e-12)]


def _around_spikes(kernel, X, offsets, box):
    Z = geometry.to_chart(kernel, X)
    pts = geometry.from_chart(kernel, (Z[:, None, :] + offsets[None, :, :]).reshape(-1, kernel.d))
    keep = np.all(np.isfinite(pts), axis=1)
    if kernel.family == geometry.LAPLACE:
        keep &= np.all(pts >= 0, axis=1)
    if box is not None:
        keep &= geometry.in_box(kernel, pts, box)
    return pts[keep]


def _nearest_spike(kernel, X, pts):
    u = geometry.chart_difference(kernel, pts[:, None, :], X[None, :, :])
    dist = np.linalg.norm(u, axis=-1)
    return dist.min(axis=1), dist


def _abs_eta(eta, pts):
    out = np.empty(pts.shape[0])
    for start in range(0, pts.shape[0], GRID_CHUNK):
        out[start:start + GRID_CHUNK] = np.abs(eta(pts[start:start + GRID_CHUNK]))
    return out


def _polish(kernel, objective, starts, spacing):
    """Local minimization of a chart objective from a few starting points."""
    best_val, best_x = np.inf, None
    for x0 in starts:
        z0 = geometry.to_chart(kernel, x0)
        bounds = [(c - spacing, c + spacing) for c in z0]
        res = minimize(objective, z0, method='Nelder-Mead', bounds=bounds,
                       options={'maxiter': 200, 'xatol': 1e-10, 'fatol': 1e-14})
        if res.fun < best_val:
            best_val, best_x = float(res.fun), geometry.from_chart(kernel, res.x)
    return best_val, best_x


def _scan(eta, kernel, X, r_near, eps0, eps2, box, far_sp, near_sp, spec):
    d = kernel.d
    far_grid, far_sp = geometry.metric_grid(kernel, box, far_sp, spec.max_points)
    shells = _around_spikes(kernel, X, ball_offsets(d, r_near, SHELL_WIDTH * r_near, near_sp,
                                                    spec.max_points), box)
    balls = _around_spikes(kernel, X, ball_offsets(d, 0.0, r_near, near_sp, spec.max_points), None)
    pts = np.vstack([far_grid, shells, balls])
    dmin, dall = _nearest_spike(kernel, X, pts)
    abs_eta = _abs_eta(eta, pts)
    far = dmin >= r_near - 1e-12
    near = dmin <= r_near + 1e-12
    overlap = bool(np.any(np.sum(dall <= r_near, axis=1) > 1))

    margin = np.full(pts.shape[0], np.inf)
    margin[far] = (1.0 - abs_eta[far]) - eps0
    near_margin = (1.0 - abs_eta) - eps2 * dmin ** 2
    margin[near] = np.minimum(margin[near], near_margin[near])
    region = np.where(far & near, 'boundary', np.where(far, 'far', 'near'))

    def far_objective(z):
        x = geometry.from_chart(kernel, z)
        if kernel.family == geometry.LAPLACE and np.any(x < 0):
            return np.inf
        if not geometry.in_box(kernel, x[None], box)[0]:
            return np.inf
        if _nearest_spike(kernel, X, x[None])[0][0] < r_near:
            return np.inf
        return 1.0 - abs(eta(x[None])[0])

    def near_objective(z):
        x = geometry.from_chart(kernel, z)
        if kernel.family == geometry.LAPLACE and np.any(x < 0):
            return np.inf
        dist = _nearest_spike(kernel, X, x[None])[0][0]
        if dist <= 1e-9 or dist > r_near:
            return np.inf
        return (1.0 - abs(eta(x[None])[0])) / dist ** 2

    eps0_measured, worst_far = np.inf, None
    if np.any(far):
        idx = np.flatnonzero(far)
        order = idx[np.argsort(1.0 - abs_eta[idx])]
        eps0_measured, worst_far = float(1.0 - abs_eta[order[0]]), pts[order[0]]
        val, x = _polish(kernel, far_objective, pts[order[:spec.ascent_starts]], far_sp)
        if val < eps0_measured:
            eps0_measured, worst_far = val, x

    eps2_measured, worst_near = np.inf, None
    inner = near & (dmin > 1e-9)
    if np.any(inner):
        idx = np.flatnonzero(inner)
        ratio = (1.0 - abs_eta[idx]) / dmin[idx] ** 2
        order = idx[np.argsort(ratio)]
        eps2_measured, worst_near = float(np.min(ratio)), pts[order[0]]
        val, x = _polish(kernel, near_objective, pts[order[:spec.ascent_starts]], near_sp)
        if val < eps2_measured:
            eps2_measured, worst_near = val, x

    passed = (eps0_measured >= eps0 - PASS_TOL) and (eps2_measured >= eps2 - PASS_TOL)
    centre = np.abs(eta(X))
    passed = passed and bool(np.all(centre <= 1.0 + PASS_TOL))
    return dict(eps0_measured=eps0_measured, eps2_measured=eps2_measured,
                worst_far_point=worst_far, worst_near_point=worst_near, passed=passed,
                max_abs_eta=float(max(abs_eta.max(), centre.max())), overlap=overlap,
                points=pts, abs_eta=abs_eta, region=region, margin=margin)


def _hessian_margin(eta, X, signs, eps2):
    worst = np.inf
    for x, sign in zip(X, signs):
        hess = np.conj(sign) * eta.derivative(x, 2)
        sym = np.real(0.5 * (hess + hess.T))
        worst = min(worst, -float(np.linalg.eigvalsh(np.atleast_2d(sym))[-1]) - eps2)
    return worst


def check_nondegeneracy(eta, a, X, r_near, eps0, eps2, grid_spec=None):
    """Grid-verified (eps0, eps2)-nondegeneracy of a certificate in the Fisher metric."""
    kernel = eta.kernel
    signs = signs_of(a)
    X = _check_positions(kernel, X)
    if signs.shape[0] != X.shape[0]:
        raise InputError(f"{signs.shape[0]} amplitudes for {X.shape[0]} positions")
    spec = grid_spec or GridSpec()
    box = spec.box or geometry.default_box(kernel, X, 2.0 * r_near)
    far_sp, near_sp = spec.spacings(r_near)

    result = _scan(eta, kernel, X, r_near, eps0, eps2, box, far_sp, near_sp, spec)
    decisions = [result['passed']]
    refinements = 0
    while spec.refine and refinements < spec.max_refinements:
        if len(decisions) >= 2 and decisions[-1] == decisions[-2]:
            break
        refinements += 1
        far_sp, near_sp = 0.5 * far_sp, 0.5 * near_sp
        result = _scan(eta, kernel, X, r_near, eps0, eps2, box, far_sp, near_sp, spec)
        decisions.append(result['passed'])
    if result['overlap']:
        console.warning("near regions of distinct spikes overlap; points assigned to the closest spike")
    return NondegeneracyReport(eps0=eps0, eps2=eps2, r_near=r_near,
                               hessian_margin=_hessian_margin(eta, X, signs, eps2),
                               refinements=refinements, **result)
