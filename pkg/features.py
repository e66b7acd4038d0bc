"""
Random feature families and the measurement operator.

    y_k = sqrt(w_k) * sum_i a_i phi_{omega_k}(x_i)        (w_k = 1/m when sampled)
    (Phi^* p)(x) = sum_k sqrt(w_k) conj(phi_{omega_k}(x)) p_k

so that Re<Phi mu, p> = Re sum_i conj(a_i) (Phi^* p)(x_i) with <u, v> = sum conj(u) v.
Derivatives are metric-normalized with respect to the family's limit kernel.
"""

import itertools
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy.optimize import minimize

import geometry
from errors import InputError

DISCRETE_FOURIER = 'discrete_fourier'
GAUSSIAN_FOURIER = 'gaussian_fourier'
LAPLACE_FEATURES = 'laplace'
GMM_SKETCH = 'gmm_sketch'
KINDS = (DISCRETE_FOURIER, GAUSSIAN_FOURIER, LAPLACE_FEATURES, GMM_SKETCH)
FOURIER_KINDS = (DISCRETE_FOURIER, GAUSSIAN_FOURIER, GMM_SKETCH)

FREQ_BLOCK = 256
GRID_CHUNK = 4096
MAX_DERIV = 3
BOUND_GRID_POINTS = 400
BOUND_PROBE_CHUNK = 64


@dataclass(frozen=True, eq=False)
class FeatureFamily:
    """Feature map phi_omega together with its frequency law Lambda."""
    kind: str
    d: int
    f_c: int = None
    sigma: np.ndarray = None
    alpha: np.ndarray = None
    c: float = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InputError(f"unknown feature family '{self.kind}'")
        if self.kind == DISCRETE_FOURIER:
            kernel = geometry.fejer_kernel(self.f_c, self.d)
        elif self.kind == LAPLACE_FEATURES:
            kernel = geometry.laplace_kernel(self.alpha)
            object.__setattr__(self, 'alpha', kernel.alpha)
        else:
            sigma = np.atleast_2d(np.asarray(self.sigma, dtype=float))
            base = geometry.gaussian_kernel(sigma)
            object.__setattr__(self, 'sigma', base.sigma)
            object.__setattr__(self, '_sigma_inv_sqrt', base._whiten)
            if self.kind == GAUSSIAN_FOURIER:
                kernel = base
            else:
                c = 1.0 / self.d if self.c is None else float(self.c)
                if c <= 0:
                    raise InputError(f"frequency scale c must be positive, got {c}")
                object.__setattr__(self, 'c', c)
                kernel = geometry.gaussian_kernel((2.0 + 1.0 / c) * base.sigma)
        if kernel.d != self.d:
            raise InputError(f"family dimension {self.d} does not match parameters ({kernel.d})")
        object.__setattr__(self, '_kernel', kernel)

    @property
    def kernel(self):
        """The limit kernel K = E[conj(phi(x)) phi(x')]."""
        return self._kernel

    @property
    def amplitude_constant(self):
        """GMM normalizing constant C = (1 + 2c)^{d/4}; 1 otherwise."""
        if self.kind == GMM_SKETCH:
            return (1.0 + 2.0 * self.c) ** (self.d / 4.0)
        return 1.0


def discrete_fourier(f_c, d=1):
    return FeatureFamily(DISCRETE_FOURIER, int(d), f_c=int(f_c))


def gaussian_fourier(sigma):
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    return FeatureFamily(GAUSSIAN_FOURIER, sigma.shape[0], sigma=sigma)


def laplace_features(alpha):
    alpha = np.atleast_1d(np.asarray(alpha, dtype=float))
    return FeatureFamily(LAPLACE_FEATURES, alpha.shape[0], alpha=alpha)


def gmm_sketch(sigma, c=None):
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    return FeatureFamily(GMM_SKETCH, sigma.shape[0], sigma=sigma, c=c)


@dataclass(frozen=True, eq=False)
class FrequencySet:
    """m frequency vectors; `weights` is None for i.i.d. draws (uniform 1/m)."""
    omegas: np.ndarray
    seed: int = None
    weights: np.ndarray = None

    def __post_init__(self):
        omegas = np.atleast_2d(np.asarray(self.omegas, dtype=float))
        if omegas.shape[0] < 1:
            raise InputError("a frequency set needs m >= 1")
        object.__setattr__(self, 'omegas', omegas)
        if self.weights is not None:
            weights = np.asarray(self.weights, dtype=float)
            if weights.shape != (omegas.shape[0],) or np.any(weights < 0):
                raise InputError("weights must be nonnegative, one per frequency")
            object.__setattr__(self, 'weights', weights)

    @property
    def m(self):
        return self.omegas.shape[0]

    def to_frame(self):
        frame = pd.DataFrame(self.omegas, columns=[f"omega_{k + 1}" for k in range(self.omegas.shape[1])])
        frame.insert(0, 'index', np.arange(self.m))
        if self.weights is not None:
            frame['weight'] = self.weights
        return frame

    def to_csv(self, path):
        self.to_frame().to_csv(path, index=False, float_format='%.17g')


def read_frequencies(path, seed=None):
    """Load a FrequencySet written by FrequencySet.to_csv."""
    frame = pd.read_csv(path)
    cols = [c for c in frame.columns if c.startswith('omega_')]
    weights = frame['weight'].to_numpy() if 'weight' in frame.columns else None
    return FrequencySet(frame[cols].to_numpy(dtype=float), seed=seed, weights=weights)


@dataclass(frozen=True, eq=False)
class MeasurementOperator:
    family: FeatureFamily
    freqs: FrequencySet

    def __post_init__(self):
        omegas = self.freqs.omegas
        if omegas.shape[1] != self.family.d:
            raise InputError(f"frequencies are {omegas.shape[1]}-dimensional, family is {self.family.d}")
        if self.family.kind == DISCRETE_FOURIER:
            if np.any(np.abs(omegas) > self.family.f_c) or np.any(omegas != np.round(omegas)):
                raise InputError("discrete fourier frequencies must be integers with |omega| <= f_c")
        weights = self.freqs.weights
        if weights is None:
            weights = np.full(self.freqs.m, 1.0 / self.freqs.m)
        object.__setattr__(self, '_sqrt_w', np.sqrt(weights))

    @property
    def m(self):
        return self.freqs.m

    @property
    def d(self):
        return self.family.d

    @property
    def kernel(self):
        return self.family.kernel

    @property
    def sqrt_weights(self):
        return self._sqrt_w


@dataclass(frozen=True, eq=False)
class DiscreteMeasure:
    """Atomic measure sum_i a_i delta_{x_i} with complex amplitudes."""
    amplitudes: np.ndarray
    positions: np.ndarray

    def __post_init__(self):
        a = np.atleast_1d(np.asarray(self.amplitudes, dtype=complex))
        X = np.asarray(self.positions, dtype=float)
        if X.ndim == 1:
            X = X.reshape(a.shape[0], -1) if a.shape[0] else X.reshape(0, max(X.size, 1))
        if X.shape[0] != a.shape[0]:
            raise InputError(f"{a.shape[0]} amplitudes but {X.shape[0]} positions")
        object.__setattr__(self, 'amplitudes', a)
        object.__setattr__(self, 'positions', X)

    @property
    def s(self):
        return self.amplitudes.shape[0]

    @property
    def total_variation(self):
        return float(np.sum(np.abs(self.amplitudes)))

    def scaled(self, factor):
        return DiscreteMeasure(factor * self.amplitudes, self.positions)


def empty_measure(d):
    return DiscreteMeasure(np.zeros(0, dtype=complex), np.zeros((0, d)))


def _block_rng(seed, block):
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(block,))))


def _draw(family, rng, n):
    d = family.d
    if family.kind == DISCRETE_FOURIER:
        g = family.kernel._coeffs
        probs = np.concatenate([g[:0:-1], g])
        lattice = np.arange(-family.f_c, family.f_c + 1)
        return rng.choice(lattice, size=(n, d), p=probs / probs.sum()).astype(float)
    if family.kind == LAPLACE_FEATURES:
        return rng.exponential(scale=1.0 / (2.0 * family.alpha), size=(n, d))
    z = rng.standard_normal((n, d))
    if family.kind == GMM_SKETCH:
        z = np.sqrt(family.c) * z
    return z @ family._sigma_inv_sqrt


def sample_frequencies(family, m, seed):
    """m i.i.d. draws from the family's law; block k of FREQ_BLOCK draws uses its own substream."""
    m = int(m)
    if m < 1:
        raise InputError(f"m must be >= 1, got {m}")
    n_blocks = -(-m // FREQ_BLOCK)
    blocks = [_draw(family, _block_rng(int(seed), b), FREQ_BLOCK) for b in range(n_blocks)]
    return FrequencySet(np.concatenate(blocks)[:m], seed=int(seed))


def exact_frequencies(family):
    """Every lattice frequency of a discrete Fourier family with its weight Lambda(omega)."""
    if family.kind != DISCRETE_FOURIER:
        raise InputError("exact expectation mode needs a finite frequency set")
    f_c, d = family.f_c, family.d
    g = family.kernel._coeffs
    lattice = np.arange(-f_c, f_c + 1)
    omegas = np.array(list(itertools.product(lattice, repeat=d)), dtype=float)
    weights = np.prod(g[np.abs(omegas).astype(int)], axis=1)
    return FrequencySet(omegas, seed=None, weights=weights / weights.sum())


def exact_operator(family):
    return MeasurementOperator(family, exact_frequencies(family))


def _as_batch(family, x):
    x = geometry.check_points(family.kernel, x)
    single = x.ndim == 1
    return np.atleast_2d(x), single


def feature_matrix(family, omegas, x):
    """phi_{omega_k}(x_n); shape (N, m), complex."""
    x = np.atleast_2d(x)
    if family.kind == LAPLACE_FEATURES:
        scale = np.exp(0.5 * np.sum(np.log((x + family.alpha) / family.alpha), axis=1))
        return (scale[:, None] * np.exp(-x @ omegas.T)).astype(complex)
    phase = x @ omegas.T
    if family.kind == DISCRETE_FOURIER:
        phase = 2.0 * np.pi * phase
    F = np.exp(1j * phase)
    if family.kind == GMM_SKETCH:
        quad = np.einsum('kd,de,ke->k', omegas, family.sigma, omegas)
        F = F * (family.amplitude_constant * np.exp(-0.5 * quad))[None, :]
    return F


def chart_frequencies(family, omegas):
    """Frequencies expressed in the kernel chart (Fourier kinds)."""
    if family.kind == DISCRETE_FOURIER:
        return 2.0 * np.pi * omegas / family.kernel._scale
    return omegas @ family.kernel._unwhiten


def slot_multipliers(family, omegas, x):
    """Per-coordinate factors of the n-th normalized derivative, n = 0..3; shape (N, m, d, 4)."""
    x = np.atleast_2d(x)
    if family.kind in FOURIER_KINDS:
        w = 1j * chart_frequencies(family, omegas)[None, :, :]
        mult = np.stack([np.ones_like(w), w, w ** 2, w ** 3], axis=-1)
        return np.broadcast_to(mult, (x.shape[0],) + mult.shape[1:])
    a = (x + family.alpha)[:, None, :]
    V = 1.0 - 2.0 * a * omegas[None, :, :]
    return np.stack([np.ones_like(V), V, V * V - 2.0, V ** 3 - 6.0 * V + 8.0], axis=-1).astype(complex)


def feature_derivatives(family, omegas, x, r):
    """Normalized r-th derivatives d^r phi_{omega_k}(x_n); shape (N, m) + (d,)*r."""
    if r not in range(MAX_DERIV + 1):
        raise InputError(f"derivative order {r} not supported (0..{MAX_DERIV})")
    F = feature_matrix(family, omegas, x)
    if r == 0:
        return F
    mult = slot_multipliers(family, omegas, x)
    d = family.d
    out = np.empty(F.shape + (d,) * r, dtype=complex)
    for idx in itertools.product(range(d), repeat=r):
        counts = np.bincount(np.asarray(idx, dtype=int), minlength=d)
        val = F.copy()
        for k in range(d):
            if counts[k]:
                val = val * mult[:, :, k, counts[k]]
        out[(Ellipsis,) + idx] = val
    return out


def phi_matrix(op, X):
    """Columns sqrt(w) * phi(x_i); shape (m, s)."""
    X = np.atleast_2d(geometry.check_points(op.kernel, X))
    return op.sqrt_weights[:, None] * feature_matrix(op.family, op.freqs.omegas, X).T


def forward(op, mu):
    """y = Phi mu."""
    if mu.s == 0:
        return np.zeros(op.m, dtype=complex)
    F = feature_matrix(op.family, op.freqs.omegas, geometry.check_points(op.kernel, mu.positions))
    return op.sqrt_weights * np.sum(mu.amplitudes[:, None] * F, axis=0)


def adjoint_eval(op, p, x, r=0):
    """
    Normalized r-th derivative of Phi^* p at x.
    A single point gives shape (d,)*r; a batch (N, d) gives (N,) + (d,)*r.
    """
    if r not in range(MAX_DERIV + 1):
        raise InputError(f"derivative order {r} not supported (0..{MAX_DERIV})")
    xb, single = _as_batch(op.family, x)
    coef = op.sqrt_weights * np.asarray(p, dtype=complex)
    out = np.empty((xb.shape[0],) + (op.d,) * r, dtype=complex)
    for start in range(0, xb.shape[0], GRID_CHUNK):
        D = feature_derivatives(op.family, op.freqs.omegas, xb[start:start + GRID_CHUNK], r)
        out[start:start + GRID_CHUNK] = np.tensordot(coef, D.conj(), axes=([0], [1]))
    return out[0] if single else out


def empirical_kernel(op, i, j, x, xp):
    """Empirical K^(ij)(x, x') = sum_k w_k conj(d^i phi_k(x)) (x) d^j phi_k(x')."""
    if i not in (0, 1, 2) or j not in (0, 1, 2):
        raise InputError(f"unsupported derivative order ({i}, {j})")
    d = op.d
    x = geometry.check_points(op.kernel, x).reshape(1, d)
    xp = geometry.check_points(op.kernel, xp).reshape(1, d)
    w = op.sqrt_weights ** 2
    left = feature_derivatives(op.family, op.freqs.omegas, x, i)[0].reshape(op.m, -1)
    right = feature_derivatives(op.family, op.freqs.omegas, xp, j)[0].reshape(op.m, -1)
    block = (left.conj().T * w) @ right
    return geometry.DerivBlock((i, j), block.reshape((d,) * (i + j)))


@dataclass(frozen=True)
class FeatureBounds:
    """Empirical quantiles of L_r(omega) = sup_x ||d^r phi_omega(x)||, r = 0..3."""
    values: tuple
    quantile: float
    m_probe: int
    formula: tuple = None


def _derivative_norms(D, r):
    if r == 0:
        return np.abs(D)
    if r == 1:
        return np.linalg.norm(D, axis=-1)
    if r == 2:
        return np.linalg.norm(D, ord=2, axis=(-2, -1))
    return np.sqrt(np.sum(np.abs(D) ** 2, axis=(-3, -2, -1)))


def _local_sup(family, omega, r, z0, zlo, zhi, spacing):
    kernel = family.kernel

    def objective(z):
        x = geometry.from_chart(kernel, z)
        if family.kind == LAPLACE_FEATURES:
            x = np.maximum(x, 0.0)
        D = feature_derivatives(family, omega[None, :], x[None, :], r)[0, 0]
        return -float(_derivative_norms(D[None], r)[0])

    bounds = [(max(lo, c - spacing), min(hi, c + spacing)) for c, lo, hi in zip(z0, zlo, zhi)]
    res = minimize(objective, z0, method='L-BFGS-B', bounds=bounds)
    return -min(res.fun, objective(z0))


def laplace_bound_formula(alpha, radius, quantile):
    """Closed-form L_r bound for distinct alpha (hypoexponential tail of ||omega||_1)."""
    alpha = np.asarray(alpha, dtype=float)
    d = alpha.size
    if np.unique(alpha).size != d:
        return None
    delta = 1.0 - quantile
    beta = np.array([np.prod([alpha[j] / (alpha[j] - alpha[i]) for j in range(d) if j != i])
                     for i in range(d)])
    span = radius + alpha.max()
    L0 = float(np.prod(np.sqrt(1.0 + radius / alpha)))
    tail = np.sqrt(d) + np.max(np.log(d * np.abs(beta) * L0 * span / (delta * alpha)) / alpha)
    return tuple(L0 * (span * tail) ** r for r in range(MAX_DERIV + 1))


def estimate_feature_bounds(family, box, m_probe, seed, spacing=None, quantile=0.99):
    """Per-draw suprema over a chart grid of the box plus local ascent; returns their quantile."""
    if int(m_probe) < 1:
        raise InputError(f"m_probe must be >= 1, got {m_probe}")
    kernel = family.kernel
    freqs = sample_frequencies(family, m_probe, seed)
    zlo, zhi = geometry.chart_bounds(kernel, box)
    if spacing is None:
        spacing = max(float(np.max(zhi - zlo)), 1e-12) / 19.0
    grid, spacing = geometry.metric_grid(kernel, box, spacing, max_points=BOUND_GRID_POINTS)
    sups = np.zeros((MAX_DERIV + 1, freqs.m))
    for start in range(0, freqs.m, BOUND_PROBE_CHUNK):
        omegas = freqs.omegas[start:start + BOUND_PROBE_CHUNK]
        for r in range(MAX_DERIV + 1):
            norms = _derivative_norms(feature_derivatives(family, omegas, grid, r), r)
            best = np.argmax(norms, axis=0)
            sups[r, start:start + omegas.shape[0]] = norms[best, np.arange(omegas.shape[0])]
            if family.kind in FOURIER_KINDS:
                # derivative norms of Fourier features do not depend on x
                continue
            for k, omega in enumerate(omegas):
                z0 = geometry.to_chart(kernel, grid[best[k]])
                sups[r, start + k] = max(sups[r, start + k],
                                         _local_sup(family, omega, r, z0, zlo, zhi, spacing))
    values = tuple(float(np.quantile(sups[r], quantile)) for r in range(MAX_DERIV + 1))
    formula = None
    if family.kind == LAPLACE_FEATURES:
        formula = laplace_bound_formula(family.alpha, float(np.max(box.upper)), quantile)
    return FeatureBounds(values, quantile, int(m_probe), formula)
