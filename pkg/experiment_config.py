"""
Experiment configuration files and output artifacts.

Grammar (one entry per line):

    # comment
    section.key = value

Values are read as bool (true/false), int, float, complex (1+2j) or string;
rows separated by ';' and entries by ',' give vectors and matrices
("0.1, 0.2; 0.5, 0.7" is a 2x2 matrix). Unknown keys, duplicate keys and
ill-typed values raise ConfigError naming the key.
"""

import dataclasses
import os
import re
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path

import joblib
import numpy as np
import pandas as pd

import admissibility
import features
import geometry
import sketch
import solver
from certificates import GridSpec
from errors import BlassoError, ConfigError

FLOAT_FORMAT = '%.17g'
THREADS_ENV = 'BLASSO_THREADS'
NOISE_STREAM = 1 << 30
LAMBDA_FLOOR = 1e-12
NOISE_MODELS = ('none', 'gaussian', 'file')
FEATURE_MODES = ('sampled', 'exact')
CONVENTIONS = ('fisher', 'published')

_KEY = re.compile(r'^[a-z][a-z0-9_]*(\.[a-z][a-z0-9_]*)+$')

# key -> (kind, default)
SCHEMA = {
    'experiment.name': ('str', 'experiment'),
    'experiment.out': ('str', 'results'),
    'experiment.seeds': ('ints', [0]),
    'experiment.threads': ('int', None),

    'kernel.family': ('str', None),
    'kernel.d': ('int', 1),
    'kernel.f_c': ('int', None),
    'kernel.sigma': ('matrix', None),
    'kernel.alpha': ('vector', None),

    'features.m': ('int', 200),
    'features.mode': ('str', 'sampled'),

    'truth.amplitudes': ('cvector', None),
    'truth.positions': ('matrix', None),

    'noise.model': ('str', 'none'),
    'noise.sigma_w': ('float', 0.0),
    'noise.file': ('str', None),

    'solver.lambda': ('float', None),
    'solver.max_atoms': ('int', 50),
    'solver.grid_init_spacing': ('float', solver.DEFAULT_GRID_SPACING),
    'solver.local_steps': ('int', 200),
    'solver.atom_merge_radius': ('float', None),
    'solver.tol_gap': ('float', 1e-8),
    'solver.tol_grad': ('float', 1e-6),
    'solver.max_outer_iters': ('int', 100),
    'solver.box_margin': ('float', 3.0),

    'sweep.lambda': ('floats', None),
    'sweep.m': ('ints', None),
    'sweep.sigma_w': ('floats', None),

    'certify.convention': ('str', 'fisher'),
    'certify.s_max': ('int', None),
    'certify.r_near': ('float', None),
    'certify.eps0': ('float', None),
    'certify.eps2': ('float', None),
    'certify.c_h': ('float', None),
    'certify.delta': ('float', None),

    'grid.far_spacing': ('float', None),
    'grid.near_spacing': ('float', None),
    'grid.refine': ('bool', True),
    'grid.max_refinements': ('int', 3),
    'grid.max_points': ('int', 200_000),
    'grid.ascent_starts': ('int', 5),

    'gmm.weights': ('vector', None),
    'gmm.means': ('matrix', None),
    'gmm.sigma': ('matrix', None),
    'gmm.n': ('int', None),
    'gmm.m': ('int', None),
    'gmm.c': ('float', None),
    'gmm.mean_tol': ('float', 0.1),
    'gmm.n_grid': ('ints', None),
}

R_NEAR = {geometry.FEJER: admissibility.FEJER_CONSTANTS['r_near'],
          geometry.GAUSSIAN: admissibility.GAUSSIAN_CONSTANTS['r_near'],
          geometry.LAPLACE: admissibility.LAPLACE_CONSTANTS['r_near']}


def parse_scalar(raw):
    raw = raw.strip()
    if raw.lower() in ('true', 'false'):
        return raw.lower() == 'true'
    for cast in (int, float, complex):
        try:
            return cast(raw)
        except ValueError:
            pass
    return raw


def parse_value(raw):
    """Scalar, or a list of rows for ';' / ',' separated values."""
    if ';' in raw or ',' in raw:
        return [[parse_scalar(v) for v in row.split(',')] for row in raw.split(';')]
    return parse_scalar(raw)


def parse_text(text):
    """Raw `key -> value string` mapping of a config file body."""
    entries = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split('#', 1)[0].strip()
        if not line:
            continue
        if '=' not in line:
            raise ConfigError(line, f"line {lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split('=', 1))
        if not _KEY.match(key):
            raise ConfigError(key, f"line {lineno}: malformed key")
        if key not in SCHEMA:
            raise ConfigError(key, f"line {lineno}: unknown key")
        if key in entries:
            raise ConfigError(key, f"line {lineno}: duplicate key")
        entries[key] = raw
    return entries


def _rows(value):
    return value if isinstance(value, list) else [[value]]


def _is_real(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def coerce(key, raw, kind):
    value = parse_value(raw)
    bad = ConfigError(key, f"cannot read '{raw}' as {kind}")
    if kind == 'str':
        if not raw:
            raise bad
        return raw
    if kind == 'bool':
        if not isinstance(value, bool):
            raise bad
        return value
    if kind == 'int':
        if not isinstance(value, int) or isinstance(value, bool):
            raise bad
        return value
    if kind == 'float':
        if not _is_real(value):
            raise bad
        return float(value)
    flat = [v for row in _rows(value) for v in row]
    if kind == 'ints':
        if not flat or not all(isinstance(v, int) and not isinstance(v, bool) for v in flat):
            raise bad
        return flat
    if kind in ('floats', 'vector'):
        if not flat or not all(_is_real(v) for v in flat):
            raise bad
        return [float(v) for v in flat] if kind == 'floats' else np.array(flat, dtype=float)
    if kind == 'cvector':
        if not flat or not all(isinstance(v, (int, float, complex)) and not isinstance(v, bool)
                               for v in flat):
            raise bad
        return np.array(flat, dtype=complex)
    rows = _rows(value)
    if len({len(r) for r in rows}) != 1 or not all(_is_real(v) for r in rows for v in r):
        raise bad
    return np.array(rows, dtype=float)


@dataclass(frozen=True, eq=False)
class KernelSpec:
    family: str
    d: int
    f_c: int = None
    sigma: np.ndarray = None
    alpha: np.ndarray = None
    m: int = 200
    mode: str = 'sampled'

    def limit_kernel(self):
        return self.feature_family().kernel

    def feature_family(self):
        if self.family == geometry.FEJER:
            return features.discrete_fourier(self.f_c, self.d)
        if self.family == geometry.GAUSSIAN:
            return features.gaussian_fourier(self.sigma)
        return features.laplace_features(self.alpha)

    def operator(self, seed, m=None):
        family = self.feature_family()
        if self.mode == 'exact':
            return features.exact_operator(family)
        return features.MeasurementOperator(
            family, features.sample_frequencies(family, self.m if m is None else m, seed))


@dataclass(frozen=True, eq=False)
class TruthSpec:
    amplitudes: np.ndarray
    positions: np.ndarray

    def measure(self):
        return features.DiscreteMeasure(self.amplitudes, self.positions)


@dataclass(frozen=True, eq=False)
class NoiseSpec:
    model: str = 'none'
    sigma_w: float = 0.0
    vector: np.ndarray = None

    def sample(self, m, seed, sigma_w=None):
        """Noise vector w; gaussian draws have variance sigma_w^2/m per coordinate."""
        sigma_w = self.sigma_w if sigma_w is None else sigma_w
        if self.model == 'file':
            if self.vector.shape[0] != m:
                raise ConfigError('noise.file', f"noise file has {self.vector.shape[0]} entries, m={m}")
            return self.vector.copy()
        if sigma_w == 0.0:
            return np.zeros(m, dtype=complex)
        rng = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence(int(seed), spawn_key=(NOISE_STREAM,))))
        z = rng.standard_normal(m) + 1j * rng.standard_normal(m)
        return z * sigma_w / np.sqrt(2.0 * m)


@dataclass(frozen=True)
class SweepSpec:
    lambdas: tuple
    ms: tuple
    sigma_ws: tuple


@dataclass(frozen=True)
class CertifySpec:
    convention: str = 'fisher'
    s_max: int = None
    r_near: float = None
    eps0: float = None
    eps2: float = None
    C_H: float = None
    delta: float = None

    @property
    def custom(self):
        return any(v is not None for v in (self.r_near, self.eps0, self.eps2, self.C_H))


@dataclass(frozen=True, eq=False)
class GmmSpec:
    weights: np.ndarray
    means: np.ndarray
    sigma: np.ndarray
    n: int
    m: int
    c: float = None
    mean_tol: float = 0.1
    n_grid: tuple = None

    def model(self):
        return sketch.GmmModel(self.weights, self.means, self.sigma)


@dataclass(frozen=True, eq=False)
class ExperimentConfig:
    name: str
    out: Path
    seeds: tuple
    threads: int
    kernel: KernelSpec
    truth: TruthSpec
    noise: NoiseSpec
    sweep: SweepSpec
    certify: CertifySpec
    gmm: GmmSpec
    grid: GridSpec
    solver_params: dict
    lam: float
    box_margin: float
    entries: dict

    @property
    def config_hash(self):
        hashed = {k: v for k, v in self.entries.items()
                  if k not in ('experiment.out', 'experiment.threads')}
        return joblib.hash(sorted(hashed.items()))

    def require(self, *sections):
        for section in sections:
            if getattr(self, section) is None:
                raise ConfigError(section, f"section '{section}' is required for this command")

    def solver_config(self, lam=None, box=None, merge_radius=None):
        lam = self.lam if lam is None else lam
        if lam is None:
            raise ConfigError('solver.lambda', "a regularization parameter is required")
        params = dict(self.solver_params)
        if params.get('atom_merge_radius') is None:
            params['atom_merge_radius'] = merge_radius or solver.DEFAULT_MERGE_RADIUS
        return solver.SolverConfig(lam=lam, box=box, **params)

    def search_box(self, kernel):
        """Recovery domain: the torus for fejer, truth bounding box inflated otherwise."""
        if kernel.family == geometry.FEJER or self.truth is None:
            return None
        return geometry.default_box(kernel, self.truth.positions, self.box_margin)


def _kernel_spec(values):
    family = values['kernel.family']
    if family is None:
        return None
    if family not in geometry.FAMILIES:
        raise ConfigError('kernel.family', f"unknown family '{family}'")
    mode = values['features.mode']
    if mode not in FEATURE_MODES:
        raise ConfigError('features.mode', f"expected one of {FEATURE_MODES}")
    if values['features.m'] < 1:
        raise ConfigError('features.m', "m must be >= 1")
    needed = {geometry.FEJER: 'kernel.f_c', geometry.GAUSSIAN: 'kernel.sigma',
              geometry.LAPLACE: 'kernel.alpha'}[family]
    if values[needed] is None:
        raise ConfigError(needed, f"required for the {family} kernel")
    spec = KernelSpec(family, values['kernel.d'], values['kernel.f_c'], values['kernel.sigma'],
                      values['kernel.alpha'], values['features.m'], mode)
    try:
        family_obj = spec.feature_family()
    except BlassoError as exc:
        raise ConfigError(needed, str(exc)) from exc
    if mode == 'exact' and family != geometry.FEJER:
        raise ConfigError('features.mode', "exact mode needs the fejer kernel")
    return dataclasses.replace(spec, d=family_obj.d)


def _truth_spec(values, kernel_spec):
    amplitudes, positions = values['truth.amplitudes'], values['truth.positions']
    if amplitudes is None and positions is None:
        return None
    if amplitudes is None or positions is None:
        key = 'truth.amplitudes' if amplitudes is None else 'truth.positions'
        raise ConfigError(key, "amplitudes and positions go together")
    if positions.shape[0] != amplitudes.shape[0]:
        raise ConfigError('truth.positions',
                          f"{positions.shape[0]} positions for {amplitudes.shape[0]} amplitudes")
    if np.any(amplitudes == 0):
        raise ConfigError('truth.amplitudes', "amplitudes must be nonzero")
    if kernel_spec is not None:
        try:
            geometry.check_points(kernel_spec.limit_kernel(), positions)
        except BlassoError as exc:
            raise ConfigError('truth.positions', str(exc)) from exc
    return TruthSpec(amplitudes, positions)


def _noise_spec(values, base):
    model = values['noise.model']
    if model not in NOISE_MODELS:
        raise ConfigError('noise.model', f"expected one of {NOISE_MODELS}")
    sigma_w = values['noise.sigma_w']
    if sigma_w < 0:
        raise ConfigError('noise.sigma_w', "noise level must be nonnegative")
    if model == 'none' and sigma_w > 0:
        raise ConfigError('noise.sigma_w', "noise.model = none takes no noise level")
    vector = None
    if model == 'file':
        name = values['noise.file']
        if name is None:
            raise ConfigError('noise.file', "required for the file noise model")
        path = Path(name) if Path(name).is_absolute() else base / name
        if not path.exists():
            raise ConfigError('noise.file', f"file not found: {path}")
        frame = pd.read_csv(path, float_precision='round_trip')
        if not {'real', 'imag'} <= set(frame.columns):
            raise ConfigError('noise.file', "expected columns 'real' and 'imag'")
        vector = frame['real'].to_numpy(float) + 1j * frame['imag'].to_numpy(float)
    return NoiseSpec(model, sigma_w, vector)


def _sweep_spec(values, config_m, lam, sigma_w):
    keys = ('sweep.lambda', 'sweep.m', 'sweep.sigma_w')
    if all(values[k] is None for k in keys):
        return None
    lambdas = values['sweep.lambda'] or ([lam] if lam is not None else None)
    if lambdas is None:
        raise ConfigError('sweep.lambda', "a lambda grid or solver.lambda is required")
    if any(v < 0 for v in lambdas):
        raise ConfigError('sweep.lambda', "lambda values must be nonnegative")
    ms = values['sweep.m'] or [config_m]
    if any(v < 1 for v in ms):
        raise ConfigError('sweep.m', "m values must be >= 1")
    sigma_ws = values['sweep.sigma_w'] or [sigma_w]
    if any(v < 0 for v in sigma_ws):
        raise ConfigError('sweep.sigma_w', "noise levels must be nonnegative")
    return SweepSpec(tuple(lambdas), tuple(ms), tuple(sigma_ws))


def _certify_spec(values):
    convention = values['certify.convention']
    if convention not in CONVENTIONS:
        raise ConfigError('certify.convention', f"expected one of {CONVENTIONS}")
    for key in ('certify.r_near', 'certify.eps0', 'certify.eps2', 'certify.delta'):
        if values[key] is not None and values[key] <= 0:
            raise ConfigError(key, "must be positive")
    if values['certify.s_max'] is not None and values['certify.s_max'] < 1:
        raise ConfigError('certify.s_max', "must be >= 1")
    return CertifySpec(convention, values['certify.s_max'], values['certify.r_near'],
                       values['certify.eps0'], values['certify.eps2'], values['certify.c_h'],
                       values['certify.delta'])


def _gmm_spec(values):
    keys = ('gmm.weights', 'gmm.means', 'gmm.sigma', 'gmm.n', 'gmm.m')
    if all(values[k] is None for k in keys):
        return None
    for key in keys:
        if values[key] is None:
            raise ConfigError(key, "required for the gmm pipeline")
    spec = GmmSpec(values['gmm.weights'], values['gmm.means'], values['gmm.sigma'],
                   values['gmm.n'], values['gmm.m'], values['gmm.c'], values['gmm.mean_tol'],
                   tuple(values['gmm.n_grid']) if values['gmm.n_grid'] else None)
    if spec.n < 1 or (spec.n_grid and min(spec.n_grid) < 1):
        raise ConfigError('gmm.n', "sample counts must be >= 1")
    if spec.m < 1:
        raise ConfigError('gmm.m', "m must be >= 1")
    if spec.c is not None and spec.c <= 0:
        raise ConfigError('gmm.c', "frequency scale must be positive")
    try:
        spec.model()
    except BlassoError as exc:
        raise ConfigError('gmm.weights', str(exc)) from exc
    return spec


def _threads(values, override):
    if override is not None:
        threads, key = override, '--threads'
    elif values['experiment.threads'] is not None:
        threads, key = values['experiment.threads'], 'experiment.threads'
    else:
        raw = os.environ.get(THREADS_ENV, '1')
        try:
            threads, key = int(raw), THREADS_ENV
        except ValueError:
            raise ConfigError(THREADS_ENV, f"cannot read '{raw}' as int") from None
    if threads < 1 and threads != -1:
        raise ConfigError(key, "thread count must be >= 1 (or -1 for all cores)")
    return threads


def build_config(entries, base=Path('.'), out=None, seeds=None, threads=None):
    """Typed, validated ExperimentConfig from raw entries and CLI overrides."""
    values = {key: default for key, (_, default) in SCHEMA.items()}
    for key, raw in entries.items():
        values[key] = coerce(key, raw, SCHEMA[key][0])
    if seeds is not None:
        values['experiment.seeds'] = seeds
    seeds = tuple(values['experiment.seeds'])
    if len(set(seeds)) != len(seeds):
        raise ConfigError('experiment.seeds', "seeds must be distinct")
    if any(s < 0 for s in seeds):
        raise ConfigError('experiment.seeds', "seeds must be nonnegative")

    lam = values['solver.lambda']
    if lam is not None and not lam > 0:
        raise ConfigError('solver.lambda', f"lambda must be positive, got {lam}")
    solver_params = {k.split('.', 1)[1]: values[k] for k in SCHEMA
                     if k.startswith('solver.') and k not in ('solver.lambda', 'solver.box_margin')}
    for key in ('grid_init_spacing', 'tol_gap', 'tol_grad'):
        if not solver_params[key] > 0:
            raise ConfigError(f"solver.{key}", "must be positive")
    if solver_params['atom_merge_radius'] is not None and not solver_params['atom_merge_radius'] > 0:
        raise ConfigError('solver.atom_merge_radius', "must be positive")
    for key in ('max_atoms', 'max_outer_iters', 'local_steps'):
        if solver_params[key] < 1:
            raise ConfigError(f"solver.{key}", "must be >= 1")

    kernel = _kernel_spec(values)
    if kernel is not None and solver_params['atom_merge_radius'] is None:
        solver_params['atom_merge_radius'] = R_NEAR[kernel.family] / 4.0

    grid = GridSpec(values['grid.far_spacing'], values['grid.near_spacing'], None,
                    values['grid.refine'], values['grid.max_refinements'],
                    values['grid.max_points'], values['grid.ascent_starts'])
    return ExperimentConfig(
        name=values['experiment.name'],
        out=Path(out if out is not None else values['experiment.out']),
        seeds=seeds,
        threads=_threads(values, threads),
        kernel=kernel,
        truth=_truth_spec(values, kernel),
        noise=_noise_spec(values, base),
        sweep=_sweep_spec(values, values['features.m'], lam, values['noise.sigma_w']),
        certify=_certify_spec(values),
        gmm=_gmm_spec(values),
        grid=grid,
        solver_params=solver_params,
        lam=lam,
        box_margin=values['solver.box_margin'],
        entries=dict(entries),
    )


def load_config(path, out=None, seeds=None, threads=None):
    path = Path(path)
    if not path.is_file():
        raise ConfigError('--config', f"config file not found: {path}")
    return build_config(parse_text(path.read_text()), path.parent, out, seeds, threads)


def parse_seeds(raw):
    """--seeds value: comma-separated nonnegative integers."""
    try:
        return [int(v) for v in raw.split(',') if v.strip()]
    except ValueError:
        raise ConfigError('--seeds', f"cannot read '{raw}' as a list of integers") from None


@dataclass(frozen=True)
class RunMeta:
    config_hash: str
    seeds: tuple
    version: str
    command: str

    def text(self):
        return (f"config_hash = {self.config_hash}\n"
                f"seeds = {', '.join(str(s) for s in self.seeds)}\n"
                f"version = {self.version}\n"
                f"command = {self.command}\n")


def sidecar_path(path):
    path = Path(path)
    return path.with_name(path.stem + '.meta.txt')


def write_table(frame, path, meta):
    """CSV with 17 significant digits plus its metadata sidecar."""
    path = Path(path)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    sidecar_path(path).write_text(meta.text())
    return path


def write_summary(path, title, stats):
    """Plain-text run statistics, rewritten at the end of every command."""
    with open(path, 'w') as f:
        f.write(f"=== {title} ===\n")
        for label, value in stats.items():
            f.write(f"{label}: {value}\n")
        f.write(f"Last Updated: {datetime.now().strftime('%Y-%m-%d %H:%M:%S')}\n")
