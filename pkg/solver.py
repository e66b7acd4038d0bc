"""
BLASSO solver over measures.

    min_mu  1/2 ||Phi mu - y||^2 + lambda |mu|(X)

Conditional gradient with sliding: each outer iteration scans the residual
certificate on a chart grid, adds the best atom found by multi-start ascent,
re-solves the amplitudes on the support and then moves amplitudes and
positions jointly. Steps are taken in chart coordinates, where the Fisher
metric is Euclidean.
"""

import time
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.optimize import linear_sum_assignment, minimize

import console
import features
import geometry
from errors import InputError

DROP_TOL = 1e-10
MONOTONE_TOL = 1e-12
DEFAULT_GRID_SPACING = 0.1
DEFAULT_MERGE_RADIUS = 0.05
GAP_CHECK_EVERY = 10
GRID_MAX_POINTS = 200_000


@dataclass
class SolverConfig:
    lam: float
    max_atoms: int = 50
    grid_init_spacing: float = DEFAULT_GRID_SPACING
    local_steps: int = 200
    atom_merge_radius: float = DEFAULT_MERGE_RADIUS
    tol_gap: float = 1e-8
    tol_grad: float = 1e-6
    max_outer_iters: int = 100
    seed: int = 0
    box: geometry.DomainBox = None
    ascent_starts: int = 10
    lasso_tol: float = 1e-10
    lasso_max_iter: int = 50_000

    def __post_init__(self):
        if not self.lam > 0:
            raise InputError(f"lambda must be positive, got {self.lam}")
        for name in ('tol_gap', 'tol_grad', 'grid_init_spacing', 'atom_merge_radius', 'lasso_tol'):
            if not getattr(self, name) > 0:
                raise InputError(f"{name} must be positive")


@dataclass
class SolveResult:
    measure: features.DiscreteMeasure
    certificate_max: float
    gap: float
    objective: float
    iterations: int
    converged: bool
    trace: pd.DataFrame = field(default=None, repr=False)
    message: str = ''


@dataclass
class StabilityReport:
    spike_count_match: bool
    sign_match: bool
    amplitude_error: float
    position_error: float
    bound_rhs: float
    bound_satisfied: bool
    matching: tuple = field(default=None, repr=False)


def objective(op, y, lam, mu):
    residual = features.forward(op, mu) - y
    return 0.5 * float(np.vdot(residual, residual).real) + lam * mu.total_variation


def soft_threshold(a, tau):
    """Complex soft-thresholding a * max(0, 1 - tau/|a|)."""
    mag = np.abs(a)
    with np.errstate(divide='ignore', invalid='ignore'):
        shrink = np.where(mag > tau, 1.0 - tau / np.where(mag > 0, mag, 1.0), 0.0)
    return a * shrink


def _lasso_value(A, y, lam, a):
    r = A @ a - y
    return 0.5 * float(np.vdot(r, r).real) + lam * float(np.sum(np.abs(a)))


def _lasso_gap(A, y, lam, a):
    r = y - A @ a
    corr = np.max(np.abs(A.conj().T @ r)) if A.shape[1] else 0.0
    nu = r * min(1.0, lam / corr) if corr > 0 else r
    dual = 0.5 * float(np.vdot(y, y).real) - 0.5 * float(np.vdot(y - nu, y - nu).real)
    return _lasso_value(A, y, lam, a) - dual


def lasso_on_support(op, X, y, lam, a0=None, tol=1e-10, max_iter=50_000):
    """Amplitudes minimizing 1/2 ||Phi_X a - y||^2 + lambda ||a||_1 (FISTA with restart)."""
    if lam <= 0:
        raise InputError(f"lambda must be positive, got {lam}")
    y = np.asarray(y, dtype=complex)
    A = features.phi_matrix(op, X)
    s = A.shape[1]
    zero = np.zeros(s, dtype=complex)
    if s == 0 or np.max(np.abs(A.conj().T @ y)) <= lam:
        return zero
    L = float(np.linalg.norm(A, ord=2)) ** 2
    x = zero.copy() if a0 is None else np.asarray(a0, dtype=complex).copy()
    start_value = _lasso_value(A, y, lam, x)
    best, best_value = x.copy(), start_value
    z, t = x.copy(), 1.0
    value = start_value
    for k in range(1, max_iter + 1):
        grad = A.conj().T @ (A @ z - y)
        x_new = soft_threshold(z - grad / L, lam / L)
        new_value = _lasso_value(A, y, lam, x_new)
        if new_value > value:
            # function-value restart
            z, t = x.copy(), 1.0
            continue
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        z = x_new + ((t - 1.0) / t_new) * (x_new - x)
        x, t, value = x_new, t_new, new_value
        if value < best_value:
            best, best_value = x.copy(), value
        if k % GAP_CHECK_EVERY == 0 and _lasso_gap(A, y, lam, best) <= tol * max(1.0, best_value):
            break
    else:
        console.debug(f"lasso stopped at max_iter={max_iter}, gap {_lasso_gap(A, y, lam, best):.3e}")
    return best


def _search_box(kernel, config):
    if config.box is not None:
        return config.box
    if kernel.family == geometry.FEJER:
        return geometry.DomainBox((0.0,) * kernel.d, (1.0,) * kernel.d)
    raise InputError("a search box is required for non-periodic kernels")


def _chart_limits(kernel, box):
    if kernel.family == geometry.FEJER:
        return [(None, None)] * kernel.d
    zlo, zhi = geometry.chart_bounds(kernel, box)
    return list(zip(zlo, zhi))


def _certificate_peak(op, kernel, p, grid, box, starts):
    """max |Phi^* p| by grid scan followed by ascent in chart coordinates."""
    values = np.abs(features.adjoint_eval(op, p, grid, 0))
    limits = _chart_limits(kernel, box)

    def neg_sq(z):
        x = geometry.from_chart(kernel, z)
        if kernel.family == geometry.LAPLACE:
            x = np.maximum(x, 0.0)
        eta = features.adjoint_eval(op, p, x, 0)
        grad = features.adjoint_eval(op, p, x, 1)
        return -float(abs(eta)) ** 2, -2.0 * np.real(np.conj(eta) * grad)

    best = int(np.argmax(values))
    best_x, best_val = grid[best], float(values[best])
    for k in np.argsort(values)[::-1][:starts]:
        z0 = geometry.to_chart(kernel, grid[k])
        res = minimize(neg_sq, z0, jac=True, method='L-BFGS-B', bounds=limits)
        val = np.sqrt(max(-res.fun, 0.0))
        if val > best_val:
            x = geometry.from_chart(kernel, res.x)
            if kernel.family == geometry.FEJER:
                x = x - np.floor(x)
            best_x, best_val = x, float(val)
    return best_x, best_val


def duality_gap(op, y, lam, mu, grid=None, peak=None):
    """Primal value minus the dual value of the rescaled residual (y - Phi mu)/lambda."""
    if lam <= 0:
        raise InputError(f"lambda must be positive, got {lam}")
    y = np.asarray(y, dtype=complex)
    p = (y - features.forward(op, mu)) / lam
    if peak is None:
        if grid is None:
            raise InputError("duality gap needs a grid or a certificate peak")
        pts = grid if mu.s == 0 else np.vstack([grid, mu.positions])
        peak = float(np.max(np.abs(features.adjoint_eval(op, p, pts, 0))))
    p = p / max(1.0, peak)
    primal = objective(op, y, lam, mu)
    diff = y / lam - p
    dual = 0.5 * float(np.vdot(y, y).real) - 0.5 * lam ** 2 * float(np.vdot(diff, diff).real)
    return primal - dual


def _slide_objective(op, y, lam, s, d):
    sw = op.sqrt_weights
    omegas = op.freqs.omegas
    kernel = op.kernel

    def fun(var):
        a = var[:s] + 1j * var[s:2 * s]
        Z = var[2 * s:].reshape(s, d)
        X = geometry.from_chart(kernel, Z)
        if kernel.family == geometry.LAPLACE:
            X = np.maximum(X, 0.0)
        F = sw[:, None] * features.feature_matrix(op.family, omegas, X).T
        r = F @ a - y
        G = sw[:, None, None] * np.transpose(features.feature_derivatives(op.family, omegas, X, 1),
                                             (1, 0, 2))
        g = F.conj().T @ r
        h = np.einsum('msd,m->sd', G.conj(), r)
        mag = np.abs(a)
        unit = np.where(mag > 0, a / np.where(mag > 0, mag, 1.0), 0.0)
        value = 0.5 * float(np.vdot(r, r).real) + lam * float(mag.sum())
        grad_a = g + lam * unit
        grad_z = np.real(a[:, None] * np.conj(h))
        return value, np.concatenate([grad_a.real, grad_a.imag, grad_z.ravel()])

    return fun


def _slide(op, y, lam, mu, box, steps):
    """Joint local descent on (a, X); kept only if the objective decreases."""
    s, d = mu.positions.shape
    kernel = op.kernel
    Z = geometry.to_chart(kernel, mu.positions)
    var0 = np.concatenate([mu.amplitudes.real, mu.amplitudes.imag, Z.ravel()])
    fun = _slide_objective(op, y, lam, s, d)
    start = fun(var0)[0]
    bounds = [(None, None)] * (2 * s) + _chart_limits(kernel, box) * s
    res = minimize(fun, var0, jac=True, method='L-BFGS-B', bounds=bounds,
                   options={'maxiter': steps, 'ftol': 1e-15, 'gtol': 1e-12})
    if not res.fun < start:
        return mu, False
    a = res.x[:s] + 1j * res.x[s:2 * s]
    X = geometry.from_chart(kernel, res.x[2 * s:].reshape(s, d))
    if kernel.family == geometry.FEJER:
        X = X - np.floor(X)
    elif kernel.family == geometry.LAPLACE:
        X = np.maximum(X, 0.0)
    return features.DiscreteMeasure(a, X), True


def merge_atoms(kernel, mu, radius):
    """Merge atoms closer than `radius` in d_H (amplitudes summed) and drop null atoms."""
    a, X = mu.amplitudes.copy(), mu.positions.copy()
    keep = np.abs(a) >= DROP_TOL
    a, X = a[keep], X[keep]
    merged = True
    while merged and a.size > 1:
        merged = False
        u = geometry.chart_difference(kernel, X[:, None, :], X[None, :, :])
        dist = np.linalg.norm(u, axis=-1) + np.diag(np.full(a.size, np.inf))
        i, j = np.unravel_index(np.argmin(dist), dist.shape)
        if dist[i, j] < radius:
            wi, wj = abs(a[i]), abs(a[j])
            # chart offset of j from i, weighted by amplitude
            offset = -u[i, j] * wj / max(wi + wj, 1e-300)
            z = geometry.to_chart(kernel, X[i]) + offset
            xi = geometry.from_chart(kernel, z)
            if kernel.family == geometry.FEJER:
                xi = xi - np.floor(xi)
            X[i] = xi
            a[i] = a[i] + a[j]
            a, X = np.delete(a, j), np.delete(X, j, axis=0)
            merged = True
    keep = np.abs(a) >= DROP_TOL
    return features.DiscreteMeasure(a[keep], X[keep])


def solve_blasso(op, kernel, y, config):
    """Conditional-gradient BLASSO solver with sliding; never fails silently."""
    lam = config.lam
    y = np.asarray(y, dtype=complex)
    d = kernel.d
    box = _search_box(kernel, config)
    grid, _ = geometry.metric_grid(kernel, box, config.grid_init_spacing, GRID_MAX_POINTS)
    mu = features.empty_measure(d)
    value = objective(op, y, lam, mu)
    rows = []
    converged = False
    message = 'iteration cap reached'
    t0 = time.perf_counter()
    it = 0
    for it in range(1, config.max_outer_iters + 1):
        p = (y - features.forward(op, mu)) / lam
        x_new, peak = _certificate_peak(op, kernel, p, grid, box, config.ascent_starts)
        gap = duality_gap(op, y, lam, mu, peak=peak)
        rows.append(dict(iteration=it, objective=value, gap=gap, atoms=mu.s, certificate_max=peak))
        if peak <= 1.0 + config.tol_grad:
            converged, message = True, 'certificate bound reached'
            break
        if gap <= config.tol_gap * (1.0 + abs(value)):
            converged, message = True, 'duality gap reached'
            break
        if mu.s >= config.max_atoms:
            message = f"max_atoms={config.max_atoms} reached"
            break

        X = np.vstack([mu.positions, x_new[None, :]])
        a0 = np.concatenate([mu.amplitudes, [0.0]])
        a = lasso_on_support(op, X, y, lam, a0, config.lasso_tol, config.lasso_max_iter)
        candidate = features.DiscreteMeasure(a, X)
        candidate, _ = _slide(op, y, lam, candidate, box, config.local_steps)
        merged = merge_atoms(kernel, candidate, config.atom_merge_radius)
        if merged.s != candidate.s:
            a = lasso_on_support(op, merged.positions, y, lam, merged.amplitudes,
                                 config.lasso_tol, config.lasso_max_iter)
            merged = merge_atoms(kernel, features.DiscreteMeasure(a, merged.positions),
                                 config.atom_merge_radius)
        if objective(op, y, lam, merged) <= objective(op, y, lam, candidate) + MONOTONE_TOL:
            candidate = merged
        else:
            candidate = merge_atoms(kernel, candidate, 0.0)
        new_value = objective(op, y, lam, candidate)
        if new_value > value + MONOTONE_TOL:
            # reject the step; the certificate peak cannot be improved from here
            message = 'no improving step'
            console.warning(f"outer iteration {it}: objective would increase, stopping")
            break
        mu, value = candidate, new_value

    p = (y - features.forward(op, mu)) / lam
    _, peak = _certificate_peak(op, kernel, p, grid, box, config.ascent_starts)
    gap = duality_gap(op, y, lam, mu, peak=peak)
    if not converged:
        converged = peak <= 1.0 + config.tol_grad or gap <= config.tol_gap * (1.0 + abs(value))
    if not converged:
        console.warning(f"solver did not converge ({message}): gap {gap:.3e}, max|eta| {peak:.6f}")
    console.debug(f"solve_blasso: {it} iterations, {mu.s} atoms, "
                  f"{1000.0 * (time.perf_counter() - t0):.1f} ms")
    return SolveResult(mu, peak, gap, value, it, bool(converged), pd.DataFrame(rows), message)


def match_spikes(kernel, X, X0):
    """Minimum-cost assignment of recovered to true positions under d_H."""
    if X.shape[0] == 0 or X0.shape[0] == 0:
        return np.zeros(0, dtype=int), np.zeros(0, dtype=int)
    cost = geometry.fisher_distance(kernel, X[:, None, :], X0[None, :, :])
    return linear_sum_assignment(np.atleast_2d(cost))


def stability_report(result, truth, kernel, lam, w_norm):
    """Support-stability diagnostics of a recovered measure against the ground truth."""
    if truth.s < 1:
        raise InputError("stability report needs at least one true spike")
    mu = result.measure if isinstance(result, SolveResult) else result
    rows, cols = match_spikes(kernel, mu.positions, truth.positions)
    a, a0 = mu.amplitudes[rows], truth.amplitudes[cols]
    amplitude_error = float(np.linalg.norm(a - a0))
    if rows.size:
        dist = geometry.fisher_distance(kernel, mu.positions[rows], truth.positions[cols])
        position_error = float(np.sqrt(np.sum(np.atleast_1d(dist) ** 2)))
    else:
        position_error = 0.0
    count_match = mu.s == truth.s
    sign_match = bool(count_match and rows.size == truth.s and np.all(
        np.real(np.conj(a0 / np.abs(a0)) * a / np.where(np.abs(a) > 0, np.abs(a), 1.0)) > 0))
    rhs = float(np.sqrt(truth.s) * (lam + w_norm) / np.min(np.abs(truth.amplitudes)))
    return StabilityReport(count_match, sign_match, amplitude_error, position_error, rhs,
                           bool(amplitude_error + position_error <= rhs), (rows, cols))
