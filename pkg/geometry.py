"""
Limit kernels, Fisher-Rao geometry and metric-normalized derivatives.

Each supported kernel is a product of one-dimensional profiles in a chart
where its metric tensor becomes the identity:

    fejer     z = sqrt(C) x              (torus; differences wrapped into [-1/2, 1/2))
    gaussian  z = Sigma^{-1/2} x
    laplace   z_i = log(x_i + alpha_i) / 2

so that K(x, x') = prod_k f(z_k - z'_k), d_H(x, x') = ||z - z'|| and the
normalized derivatives are chart derivatives. The Laplace chart has a
nonzero connection term (psi''/psi' = 2) which enters the second-order slots.
"""

import itertools
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import linalg

import console
from errors import InputError, NumericalError

FEJER = 'fejer'
GAUSSIAN = 'gaussian'
LAPLACE = 'laplace'
FAMILIES = (FEJER, GAUSSIAN, LAPLACE)

EIG_FLOOR = 1e-14
FEJER_SERIES_CUTOFF = 1e-8
SERIES_CHUNK = 8192
MAX_ORDER = 4

# sign of Re(i^r e^{i theta}) written as +-cos / +-sin
_TRIG_SIGN = (1.0, -1.0, -1.0, 1.0, 1.0)


@dataclass(frozen=True, eq=False)
class LimitKernel:
    """Closed-form limit kernel of one of the three supported families."""
    family: str
    d: int
    f_c: int = None
    sigma: np.ndarray = None
    alpha: np.ndarray = None
    domain_radius: float = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise InputError(f"unknown kernel family '{self.family}'")
        if int(self.d) < 1:
            raise InputError(f"dimension must be >= 1, got {self.d}")
        if self.family == FEJER:
            if self.f_c is None or int(self.f_c) < 1:
                raise InputError("fejer kernel needs f_c >= 1")
            if int(self.f_c) % 2:
                raise InputError(f"fejer kernel needs an even f_c, got {self.f_c}")
            object.__setattr__(self, '_scale', np.sqrt(fejer_constant(self.f_c)))
            object.__setattr__(self, '_coeffs', fejer_coefficients(self.f_c))
            object.__setattr__(self, '_connection', 0.0)
        elif self.family == GAUSSIAN:
            sigma = np.atleast_2d(np.asarray(self.sigma, dtype=float))
            if sigma.shape != (self.d, self.d):
                raise InputError(f"sigma must be {self.d}x{self.d}, got {sigma.shape}")
            object.__setattr__(self, 'sigma', sigma)
            object.__setattr__(self, '_whiten', sym_matrix_power(sigma, -0.5))
            object.__setattr__(self, '_unwhiten', sym_matrix_power(sigma, 0.5))
            object.__setattr__(self, '_precision', sym_matrix_power(sigma, -1.0))
            object.__setattr__(self, '_connection', 0.0)
        else:
            alpha = np.atleast_1d(np.asarray(self.alpha, dtype=float))
            if alpha.shape != (self.d,) or np.any(alpha <= 0) or not np.all(np.isfinite(alpha)):
                raise InputError(f"alpha must hold {self.d} positive reals")
            object.__setattr__(self, 'alpha', alpha)
            object.__setattr__(self, '_connection', 2.0)

    @property
    def connection(self):
        return self._connection


@dataclass(frozen=True)
class DerivBlock:
    """Normalized derivative block K^(ij): i slots on x, j slots on x'."""
    order: tuple
    value: np.ndarray


@dataclass(frozen=True)
class DomainBox:
    """Axis-aligned box in domain units."""
    lower: tuple
    upper: tuple

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float)
        hi = np.asarray(self.upper, dtype=float)
        if lo.shape != hi.shape or np.any(hi < lo):
            raise InputError(f"invalid box {self.lower} .. {self.upper}")


def fejer_kernel(f_c, d=1, domain_radius=None):
    return LimitKernel(FEJER, int(d), f_c=int(f_c), domain_radius=domain_radius)


def gaussian_kernel(sigma, domain_radius=None):
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    return LimitKernel(GAUSSIAN, sigma.shape[0], sigma=sigma, domain_radius=domain_radius)


def laplace_kernel(alpha, domain_radius=None):
    alpha = np.atleast_1d(np.asarray(alpha, dtype=float))
    return LimitKernel(LAPLACE, alpha.shape[0], alpha=alpha, domain_radius=domain_radius)


def fejer_constant(f_c):
    """C_{f_c} = -kappa''(0) = pi^2 f_c (f_c + 4) / 3."""
    return np.pi ** 2 * f_c * (f_c + 4) / 3.0


def fejer_coefficients(f_c):
    """Fourier coefficients g(j), j = 0..f_c, of the squared Fejer kernel."""
    s = f_c // 2 + 1
    k = np.arange(-(s - 1), s)
    tri = 1.0 - np.abs(k) / s
    g = np.convolve(tri, tri) / s ** 2
    g = g / g.sum()
    return g[f_c:]


def sym_matrix_power(H, power):
    """H^power for a symmetric positive definite H, via eigendecomposition."""
    H = np.atleast_2d(np.asarray(H, dtype=float))
    if H.shape[0] != H.shape[1] or not np.allclose(H, H.T, rtol=1e-10, atol=1e-12):
        raise NumericalError("matrix is not symmetric")
    w, V = linalg.eigh(H)
    if w[0] <= 0 or not np.all(np.isfinite(w)):
        raise NumericalError(f"matrix is not SPD (smallest eigenvalue {w[0]:.3e})")
    w = np.maximum(w, EIG_FLOOR * w[-1])
    return (V * w ** power) @ V.T


def check_points(kernel, x):
    """Validate points of shape (..., d); a scalar is accepted when d == 1."""
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 0:
        if kernel.d != 1:
            raise InputError(f"scalar point given for d={kernel.d}")
        arr = arr.reshape(1)
    if arr.shape[-1] != kernel.d:
        raise InputError(f"points must have last dimension {kernel.d}, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InputError("points must be finite")
    if kernel.family == LAPLACE and np.any(arr < 0):
        raise InputError("laplace domain requires nonnegative coordinates")
    return arr


def to_chart(kernel, x):
    x = check_points(kernel, x)
    if kernel.family == FEJER:
        return kernel._scale * x
    if kernel.family == GAUSSIAN:
        return x @ kernel._whiten
    return 0.5 * np.log(x + kernel.alpha)


def from_chart(kernel, z):
    z = np.asarray(z, dtype=float)
    if kernel.family == FEJER:
        return z / kernel._scale
    if kernel.family == GAUSSIAN:
        return z @ kernel._unwhiten
    return np.exp(2.0 * z) - kernel.alpha


def wrap_torus(t):
    """Representative of t modulo 1 in [-1/2, 1/2)."""
    return t - np.floor(t + 0.5)


def chart_difference(kernel, x, xp):
    """z(x) - z(x'), with the torus wrap for fejer."""
    x = check_points(kernel, x)
    xp = check_points(kernel, xp)
    if kernel.family == FEJER:
        return kernel._scale * wrap_torus(x - xp)
    return to_chart(kernel, x) - to_chart(kernel, xp)


def wrap_chart(kernel, u):
    """Bring a chart difference back to its principal representative."""
    if kernel.family == FEJER:
        return kernel._scale * wrap_torus(u / kernel._scale)
    return u


def _fejer_series(t, coeffs):
    flat = np.ravel(t)
    out = np.empty((flat.size, MAX_ORDER + 1))
    j = np.arange(1, coeffs.size)
    two_pi_j = 2.0 * np.pi * j
    weights = [2.0 * coeffs[1:] * two_pi_j ** r for r in range(MAX_ORDER + 1)]
    for start in range(0, flat.size, SERIES_CHUNK):
        theta = np.outer(flat[start:start + SERIES_CHUNK], two_pi_j)
        cos, sin = np.cos(theta), np.sin(theta)
        for r in range(MAX_ORDER + 1):
            trig = cos if r % 2 == 0 else sin
            out[start:start + SERIES_CHUNK, r] = _TRIG_SIGN[r] * (trig @ weights[r])
    out[:, 0] += coeffs[0]
    return out.reshape(np.shape(t) + (MAX_ORDER + 1,))


def _fejer_value(t, f_c, coeffs):
    s = f_c // 2 + 1
    shape = np.shape(t)
    t = wrap_torus(np.atleast_1d(np.asarray(t, dtype=float)))
    sin_t = np.sin(np.pi * t)
    small = np.abs(sin_t) < FEJER_SERIES_CUTOFF
    with np.errstate(divide='ignore', invalid='ignore'):
        val = (np.sin(np.pi * s * t) / (s * sin_t)) ** 4
    if np.any(small):
        # removable singularity at integers
        val[small] = _fejer_series(t[small], coeffs)[:, 0]
    return val.reshape(shape)


def profile_value(kernel, u):
    """One-dimensional profile f(u), elementwise."""
    u = np.asarray(u, dtype=float)
    if kernel.family == FEJER:
        return _fejer_value(u / kernel._scale, kernel.f_c, kernel._coeffs)
    if kernel.family == GAUSSIAN:
        return np.exp(-0.5 * u ** 2)
    with np.errstate(over='ignore'):
        return 1.0 / np.cosh(u)


def profile_derivatives(kernel, u):
    """f^(r)(u) for r = 0..4, stacked on a new last axis."""
    u = np.asarray(u, dtype=float)
    if kernel.family == FEJER:
        out = _fejer_series(u / kernel._scale, kernel._coeffs)
        out = out * kernel._scale ** -np.arange(MAX_ORDER + 1)
        out[..., 0] = profile_value(kernel, u)
        return out
    if kernel.family == GAUSSIAN:
        f = np.exp(-0.5 * u ** 2)
        u2 = u * u
        hermite = (np.ones_like(u), u, u2 - 1.0, u2 * u - 3.0 * u, u2 * u2 - 6.0 * u2 + 3.0)
        return np.stack([(-1) ** r * h * f for r, h in enumerate(hermite)], axis=-1)
    with np.errstate(over='ignore'):
        S = 1.0 / np.cosh(u)
    T = np.tanh(u)
    S2 = S * S
    return np.stack([S,
                     -S * T,
                     S * (1.0 - 2.0 * S2),
                     -S * T * (1.0 - 6.0 * S2),
                     S * (1.0 - 20.0 * S2 + 24.0 * S2 * S2)], axis=-1)


@lru_cache(maxsize=None)
def _table_coefficients(connection):
    """Coefficients of P_n(D) P_m(-D) on f, f', .., f''''; shape (3, 3, 5)."""
    slot = ([1.0], [0.0, 1.0], [0.0, -connection, 1.0])
    coef = np.zeros((3, 3, MAX_ORDER + 1))
    for n, m in itertools.product(range(3), repeat=2):
        right = np.array(slot[m]) * (-1.0) ** np.arange(len(slot[m]))
        poly = np.convolve(slot[n], right)
        coef[n, m, :poly.size] = poly
    return coef


def slot_tables(kernel, u):
    """Normalized 1-D tables T[n][m](u_k) for n, m in 0..2; shape (..., d, 3, 3)."""
    prof = profile_derivatives(kernel, u)
    return np.einsum('...r,nmr->...nm', prof, _table_coefficients(kernel.connection))


def assemble_block(tables, i, j):
    """K^(ij) from per-coordinate tables; result shape (...,) + (d,)*(i+j)."""
    d = tables.shape[-3]
    lead = tables.shape[:-3]
    out = np.empty(lead + (d,) * (i + j))
    for idx in itertools.product(range(d), repeat=i + j):
        n = np.bincount(np.asarray(idx[:i], dtype=int), minlength=d)
        m = np.bincount(np.asarray(idx[i:], dtype=int), minlength=d)
        val = np.ones(lead)
        for k in range(d):
            val = val * tables[..., k, n[k], m[k]]
        out[(Ellipsis,) + idx] = val
    return out


def kernel_blocks(kernel, u, orders):
    """Batched K^(ij) at chart differences u (..., d) for each (i, j) in orders."""
    tables = slot_tables(kernel, u)
    return {order: assemble_block(tables, *order) for order in orders}


def _check_order(i, j):
    if i not in (0, 1, 2) or j not in (0, 1, 2):
        raise InputError(f"unsupported derivative order ({i}, {j})")


def kernel_eval(kernel, x, xp):
    """K(x, x'); broadcasts over leading point axes."""
    u = chart_difference(kernel, x, xp)
    val = np.prod(profile_value(kernel, u), axis=-1)
    return float(val) if np.ndim(val) == 0 else val


def kernel_deriv(kernel, i, j, x, xp):
    """Metric-normalized K^(ij)(x, x')."""
    _check_order(i, j)
    u = chart_difference(kernel, x, xp)
    return DerivBlock((i, j), assemble_block(slot_tables(kernel, u), i, j))


def metric_tensor(kernel, x):
    """H_x = grad_1 grad_2 K(x, x); shape (..., d, d)."""
    x = check_points(kernel, x)
    lead = x.shape[:-1]
    if kernel.family == FEJER:
        H = fejer_constant(kernel.f_c) * np.eye(kernel.d)
    elif kernel.family == GAUSSIAN:
        H = kernel._precision
    else:
        diag = (2.0 * (x + kernel.alpha)) ** -2
        return diag[..., :, None] * np.eye(kernel.d)
    return np.broadcast_to(H, lead + H.shape).copy()


def fisher_distance(kernel, x, xp):
    """Geodesic distance d_H(x, x')."""
    dist = np.linalg.norm(chart_difference(kernel, x, xp), axis=-1)
    return float(dist) if np.ndim(dist) == 0 else dist


def normalize_derivative(H, raw):
    """Apply H^{-1/2} to every slot of a raw derivative array."""
    raw = np.asarray(raw)
    r = raw.ndim
    if r == 0:
        return raw.copy()
    if r > 3:
        raise InputError(f"derivative order {r} not supported")
    Q = sym_matrix_power(H, -0.5)
    if any(n != Q.shape[0] for n in raw.shape):
        raise InputError(f"derivative shape {raw.shape} does not match metric {Q.shape}")
    out = raw
    for axis in range(r):
        out = np.moveaxis(np.tensordot(Q, out, axes=([1], [axis])), 0, axis)
    return out


def chart_bounds(kernel, box):
    """Chart-space bounding box of a domain box."""
    lo = np.asarray(box.lower, dtype=float)
    hi = np.asarray(box.upper, dtype=float)
    if kernel.family == GAUSSIAN:
        corners = np.array(list(itertools.product(*zip(lo, hi))))
        z = corners @ kernel._whiten
        return z.min(axis=0), z.max(axis=0)
    if kernel.family == FEJER:
        return kernel._scale * lo, kernel._scale * hi
    return to_chart(kernel, lo), to_chart(kernel, hi)


def in_box(kernel, x, box, tol=1e-12):
    lo = np.asarray(box.lower, dtype=float)
    hi = np.asarray(box.upper, dtype=float)
    if kernel.family == FEJER:
        return np.ones(x.shape[:-1], dtype=bool)
    return np.all((x >= lo - tol) & (x <= hi + tol), axis=-1)


def box_radius(kernel, box):
    """Half the chart diagonal of a box, i.e. its radius in d_H units."""
    zlo, zhi = chart_bounds(kernel, box)
    return 0.5 * float(np.linalg.norm(zhi - zlo))


def default_box(kernel, positions, margin):
    """Bounding box of the positions inflated by `margin` in d_H units."""
    X = np.atleast_2d(check_points(kernel, positions))
    if kernel.family == FEJER:
        lo, hi = X.min(axis=0) - margin / kernel._scale, X.max(axis=0) + margin / kernel._scale
        full = (hi - lo) >= 1.0
        lo = np.where(full, 0.0, lo)
        hi = np.where(full, 1.0, hi)
        return DomainBox(tuple(lo), tuple(hi))
    if kernel.family == GAUSSIAN:
        # inflate along each domain axis by the d_H margin
        step = margin * np.sqrt(np.diag(kernel.sigma))
        return DomainBox(tuple(X.min(axis=0) - step), tuple(X.max(axis=0) + step))
    Z = to_chart(kernel, X)
    lo = np.maximum(from_chart(kernel, Z.min(axis=0) - margin), 0.0)
    hi = from_chart(kernel, Z.max(axis=0) + margin)
    return DomainBox(tuple(lo), tuple(hi))


def metric_grid(kernel, box, spacing, max_points=None):
    """
    Grid of the box that is uniform in the chart with step `spacing` (d_H units).
    Returns (points, spacing_used); the step grows when max_points would be exceeded.
    """
    zlo, zhi = chart_bounds(kernel, box)
    extent = np.maximum(zhi - zlo, 0.0)
    counts = np.floor(extent / spacing).astype(int) + 1
    requested = spacing
    while max_points is not None and np.prod(counts.astype(float)) > max_points:
        ratio = np.prod(counts.astype(float)) / max_points
        spacing = spacing * max(ratio ** (1.0 / kernel.d), 1.01)
        counts = np.floor(extent / spacing).astype(int) + 1
    if spacing > requested:
        console.warning(f"grid spacing coarsened from {requested:.4g} to {spacing:.4g} "
                        f"to stay under {max_points} points")
    axes = [np.linspace(lo, lo + (n - 1) * spacing, n) if n > 1 else np.array([0.5 * (lo + hi)])
            for lo, hi, n in zip(zlo, zhi, counts)]
    Z = np.stack(np.meshgrid(*axes, indexing='ij'), axis=-1).reshape(-1, kernel.d)
    X = from_chart(kernel, Z)
    if kernel.family == LAPLACE:
        X = np.maximum(X, 0.0)
    return X[in_box(kernel, X, box)], float(spacing)
