"""
Compressive Gaussian mixture learning.

Draw a dataset from a mixture with known shared covariance, compress it into
averaged random Fourier features and recover the mixture by solving the
BLASSO over the component means.
"""

from dataclasses import dataclass

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy.optimize import linear_sum_assignment

import console
import features
import geometry
import solver
from errors import InputError

DATA_CHUNK = 16384
SKETCH_CHUNK = 4096
PHASE_TOL = 0.1
WEIGHT_SUM_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class GmmModel:
    """Mixture sum_i w_i N(x_i, Sigma) with a shared, known covariance."""
    weights: np.ndarray
    means: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        weights = np.atleast_1d(np.asarray(self.weights, dtype=float))
        means = np.atleast_2d(np.asarray(self.means, dtype=float))
        sigma = geometry.gaussian_kernel(self.sigma).sigma
        if means.shape != (weights.shape[0], sigma.shape[0]):
            raise InputError(f"means of shape {means.shape} do not match "
                             f"{weights.shape[0]} weights in dimension {sigma.shape[0]}")
        if np.any(weights < 0) or abs(weights.sum() - 1.0) > WEIGHT_SUM_TOL:
            raise InputError("mixture weights must be nonnegative and sum to 1")
        object.__setattr__(self, 'weights', weights)
        object.__setattr__(self, 'means', means)
        object.__setattr__(self, 'sigma', sigma)

    @property
    def s(self):
        return self.weights.shape[0]

    @property
    def d(self):
        return self.means.shape[1]

    def to_text(self, path):
        """gmm.* lines in the experiment config grammar."""
        def rows(arr):
            return '; '.join(', '.join(f"{v:.17g}" for v in row) for row in np.atleast_2d(arr))
        lines = [f"# components = {self.s}",
                 f"gmm.weights = {rows(self.weights)}",
                 f"gmm.means = {rows(self.means)}",
                 f"gmm.sigma = {rows(self.sigma)}"]
        with open(path, 'w') as f:
            f.write('\n'.join(lines) + '\n')


@dataclass(frozen=True, eq=False)
class Sketch:
    """y_k = (1/sqrt(m)) * (1/n) sum_j exp(i <omega_k, z_j>)."""
    values: np.ndarray
    freqs: features.FrequencySet
    n: int

    def to_frame(self):
        return pd.DataFrame({'index': np.arange(self.values.shape[0]),
                             'real': self.values.real, 'imag': self.values.imag})


@dataclass(frozen=True)
class GmmFit:
    model: GmmModel
    result: solver.SolveResult
    max_phase: float
    flagged: bool
    message: str = ''


@dataclass(frozen=True)
class GmmEvaluation:
    component_count_match: bool
    mean_errors: np.ndarray
    max_mean_error: float
    weight_error: float
    matching: tuple

    def to_frame(self, fitted, truth):
        rows, cols = self.matching
        frame = pd.DataFrame({'true_index': cols, 'fitted_index': rows,
                              'true_weight': truth.weights[cols],
                              'fitted_weight': fitted.weights[rows],
                              'mean_error': self.mean_errors})
        for k in range(truth.d):
            frame[f"true_mean_{k + 1}"] = truth.means[cols, k]
            frame[f"fitted_mean_{k + 1}"] = fitted.means[rows, k]
        return frame.sort_values('true_index').reset_index(drop=True)


def _chunk_rng(seed, chunk):
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(chunk,))))


def _sample_chunk(model, chunk_size, seed, chunk, chol):
    rng = _chunk_rng(seed, chunk)
    labels = rng.choice(model.s, size=chunk_size, p=model.weights)
    noise = rng.standard_normal((chunk_size, model.d))
    return model.means[labels] + noise @ chol.T


def sample_gmm(model, n, seed, n_jobs=1):
    """n i.i.d. draws; chunk k of DATA_CHUNK points uses its own substream."""
    n = int(n)
    if n < 1:
        raise InputError(f"n must be >= 1, got {n}")
    chol = np.linalg.cholesky(model.sigma)
    n_chunks = -(-n // DATA_CHUNK)
    chunks = Parallel(n_jobs=n_jobs)(
        delayed(_sample_chunk)(model, DATA_CHUNK, int(seed), k, chol) for k in range(n_chunks))
    return np.concatenate(chunks)[:n]


def _chunk_sum(omegas, Z):
    return np.exp(1j * (Z @ omegas.T)).sum(axis=0)


def compute_sketch(dataset, freqs, n_jobs=1):
    """Empirical sketch of a dataset; chunk partial sums are reduced in chunk order."""
    Z = np.atleast_2d(np.asarray(dataset, dtype=float))
    if Z.shape[0] < 1:
        raise InputError("cannot sketch an empty dataset")
    if Z.shape[1] != freqs.omegas.shape[1]:
        raise InputError(f"data dimension {Z.shape[1]} does not match frequencies "
                         f"({freqs.omegas.shape[1]})")
    parts = Parallel(n_jobs=n_jobs)(
        delayed(_chunk_sum)(freqs.omegas, Z[k:k + SKETCH_CHUNK])
        for k in range(0, Z.shape[0], SKETCH_CHUNK))
    total = np.zeros(freqs.m, dtype=complex)
    for part in parts:
        total += part
    return Sketch(total / (Z.shape[0] * np.sqrt(freqs.m)), freqs, Z.shape[0])


def exact_sketch(model, freqs):
    """Infinite-sample sketch from the mixture characteristic function."""
    omegas = freqs.omegas
    quad = np.einsum('kd,de,ke->k', omegas, model.sigma, omegas)
    cf = np.exp(1j * (omegas @ model.means.T)) @ model.weights * np.exp(-0.5 * quad)
    return Sketch(cf / np.sqrt(freqs.m), freqs, np.inf)


def sketch_noise(sketch, model):
    """||empirical - exact|| in raw sketch units."""
    return float(np.linalg.norm(sketch.values - exact_sketch(model, sketch.freqs).values))


def data_box(dataset):
    Z = np.atleast_2d(np.asarray(dataset, dtype=float))
    return geometry.DomainBox(tuple(Z.min(axis=0)), tuple(Z.max(axis=0)))


def learn_gmm(sketch, sigma, lam, solver_config, c=None, box=None):
    """
    Solve the BLASSO over component means from a sketch, then project the
    amplitudes onto positive weights summing to one.
    """
    if not lam > 0:
        raise InputError(f"lambda must be positive, got {lam}")
    family = features.gmm_sketch(sigma, c)
    op = features.MeasurementOperator(family, sketch.freqs)
    config = solver_config
    if box is not None or config.lam != lam:
        params = dict(vars(config))
        params.update(lam=lam, box=box if box is not None else config.box)
        config = solver.SolverConfig(**params)
    y = family.amplitude_constant * sketch.values
    result = solver.solve_blasso(op, family.kernel, y, config)

    a = result.measure.amplitudes
    if a.size == 0:
        console.warning("no mixture component recovered")
        return GmmFit(None, result, 0.0, True, 'no atoms recovered')
    phases = np.abs(np.angle(a))
    max_phase = float(phases.max())
    flagged = max_phase > PHASE_TOL
    weights = np.maximum(a.real, 0.0)
    keep = weights > 0
    if not np.any(keep):
        console.warning("every recovered amplitude has a nonpositive real part")
        return GmmFit(None, result, max_phase, True, 'no positive amplitudes')
    message = ''
    if flagged:
        message = f"amplitude phase {max_phase:.3f} rad exceeds {PHASE_TOL}"
        console.warning(message)
    weights = weights[keep] / weights[keep].sum()
    model = GmmModel(weights, result.measure.positions[keep], family.sigma)
    return GmmFit(model, result, max_phase, bool(flagged), message)


def evaluate_gmm(fitted, truth):
    """Match fitted to true means with minimum total ||.||_{Sigma^-1} cost."""
    kernel = geometry.gaussian_kernel(truth.sigma)
    if fitted is None or fitted.s == 0:
        return GmmEvaluation(False, np.zeros(0), np.inf, 1.0, (np.zeros(0, int), np.zeros(0, int)))
    cost = geometry.fisher_distance(kernel, fitted.means[:, None, :], truth.means[None, :, :])
    rows, cols = linear_sum_assignment(np.atleast_2d(cost))
    errors = np.atleast_2d(cost)[rows, cols]
    weight_error = float(np.abs(fitted.weights[rows] - truth.weights[cols]).sum()
                         + np.delete(fitted.weights, rows).sum()
                         + np.delete(truth.weights, cols).sum())
    return GmmEvaluation(fitted.s == truth.s, errors, float(errors.max()), weight_error, (rows, cols))
