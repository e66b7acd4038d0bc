import numpy as np
import pandas as pd
import pytest

import experiment_config as ec
from errors import ConfigError

BASE = {
    'kernel.family': 'gaussian',
    'kernel.sigma': '1.0',
    'truth.amplitudes': '1; -0.5j',
    'truth.positions': '0; 4',
    'solver.lambda': '0.1',
}


def build(extra=None, **kwargs):
    entries = dict(BASE, **(extra or {}))
    return ec.build_config(entries, **kwargs)


def test_scalar_parsing():
    assert ec.parse_scalar('true') is True
    assert ec.parse_scalar(' 3 ') == 3
    assert ec.parse_scalar('2.5') == 2.5
    assert ec.parse_scalar('1-2j') == 1 - 2j
    assert ec.parse_scalar('gaussian') == 'gaussian'


def test_matrix_values():
    value = ec.coerce('kernel.sigma', '1, 0.2; 0.2, 0.5', 'matrix')
    assert np.array_equal(value, [[1.0, 0.2], [0.2, 0.5]])
    with pytest.raises(ConfigError) as info:
        ec.coerce('kernel.sigma', '1, 0.2; 0.2', 'matrix')
    assert info.value.key == 'kernel.sigma'


def test_file_grammar_errors():
    assert ec.parse_text('# header\nkernel.d = 2  # inline\n\n') == {'kernel.d': '2'}
    for text in ('kernel.d 2', 'Kernel.d = 2', 'kernel.dimension = 2', 'kernel.d = 1\nkernel.d = 2'):
        with pytest.raises(ConfigError):
            ec.parse_text(text)


def test_defaults(monkeypatch):
    monkeypatch.delenv(ec.THREADS_ENV, raising=False)
    config = build()
    assert config.seeds == (0,)
    assert config.threads == 1
    assert config.kernel.m == 200
    assert config.noise.model == 'none'
    assert config.sweep is None and config.gmm is None
    assert config.solver_params['atom_merge_radius'] == pytest.approx(ec.R_NEAR['gaussian'] / 4)
    assert np.array_equal(config.truth.amplitudes, [1.0, -0.5j])
    assert config.truth.positions.shape == (2, 1)


def test_thread_precedence(monkeypatch):
    monkeypatch.setenv(ec.THREADS_ENV, '3')
    assert build().threads == 3
    assert build({'experiment.threads': '2'}).threads == 2
    assert build({'experiment.threads': '2'}, threads=4).threads == 4
    monkeypatch.setenv(ec.THREADS_ENV, 'many')
    with pytest.raises(ConfigError):
        build()


@pytest.mark.parametrize('extra', [
    {'experiment.seeds': '1, 1'},
    {'experiment.seeds': '-1'},
    {'solver.lambda': '0'},
    {'solver.tol_gap': '-1e-3'},
    {'kernel.family': 'cauchy'},
    {'features.mode': 'exact'},
    {'noise.sigma_w': '0.1'},
    {'noise.model': 'file'},
    {'truth.amplitudes': '1; 0'},
    {'truth.positions': '0'},
    {'sweep.lambda': '0.1, -0.1'},
    {'certify.convention': 'other'},
    {'gmm.weights': '0.5, 0.5'},
])
def test_invalid_entries(extra):
    with pytest.raises(ConfigError):
        build(extra)


def test_missing_family_parameter():
    with pytest.raises(ConfigError) as info:
        ec.build_config({'kernel.family': 'laplace'})
    assert info.value.key == 'kernel.alpha'


def test_laplace_truth_must_be_nonnegative():
    with pytest.raises(ConfigError):
        ec.build_config({'kernel.family': 'laplace', 'kernel.alpha': '1',
                         'truth.amplitudes': '1', 'truth.positions': '-0.5'})


def test_config_hash_ignores_output_and_threads():
    a = build({'experiment.out': 'x', 'experiment.threads': '1'})
    b = build({'experiment.out': 'y', 'experiment.threads': '3'})
    c = build({'solver.lambda': '0.2'})
    assert a.config_hash == b.config_hash
    assert a.config_hash != c.config_hash


def test_sweep_falls_back_to_scalar_settings():
    config = build({'sweep.m': '10, 20', 'noise.model': 'gaussian', 'noise.sigma_w': '0.5'})
    assert config.sweep.lambdas == (0.1,)
    assert config.sweep.ms == (10, 20)
    assert config.sweep.sigma_ws == (0.5,)


def test_gaussian_noise_is_seeded_and_scaled():
    noise = ec.NoiseSpec('gaussian', 0.3)
    w = noise.sample(20_000, 1)
    assert np.array_equal(w, noise.sample(20_000, 1))
    assert np.linalg.norm(w) == pytest.approx(0.3, rel=0.02)
    assert np.array_equal(ec.NoiseSpec().sample(5, 1), np.zeros(5))


def test_noise_file(tmp_path):
    pd.DataFrame({'real': [0.1, 0.2], 'imag': [0.0, -0.1]}).to_csv(tmp_path / 'w.csv', index=False)
    config = build({'noise.model': 'file', 'noise.file': 'w.csv'}, base=tmp_path)
    assert np.allclose(config.noise.sample(2, 0), [0.1, 0.2 - 0.1j])
    with pytest.raises(ConfigError):
        config.noise.sample(3, 0)


def test_search_box():
    config = build({'solver.box_margin': '2'})
    box = config.search_box(config.kernel.limit_kernel())
    assert box.lower == pytest.approx((-2.0,))
    assert box.upper == pytest.approx((6.0,))
    fejer = ec.build_config({'kernel.family': 'fejer', 'kernel.f_c': '8'})
    assert fejer.search_box(fejer.kernel.limit_kernel()) is None


def test_exact_mode_operator():
    config = ec.build_config({'kernel.family': 'fejer', 'kernel.f_c': '8', 'features.mode': 'exact'})
    assert config.kernel.operator(seed=0).m == 17


def test_tables_carry_a_sidecar(tmp_path):
    meta = ec.RunMeta('abc', (0, 1), '1.0.0', 'blasso_cli recover')
    path = ec.write_table(pd.DataFrame({'v': [1.0 / 3.0]}), tmp_path / 'table.csv', meta)
    assert pd.read_csv(path, float_precision='round_trip')['v'].iloc[0] == 1.0 / 3.0
    sidecar = (tmp_path / 'table.meta.txt').read_text()
    assert 'config_hash = abc' in sidecar
    assert 'seeds = 0, 1' in sidecar


def test_summary_block(tmp_path):
    ec.write_summary(tmp_path / 'summary.txt', 'BLASSO recover', {'Runs': 3})
    lines = (tmp_path / 'summary.txt').read_text().splitlines()
    assert lines[0] == '=== BLASSO recover ==='
    assert lines[1] == 'Runs: 3'
    assert lines[2].startswith('Last Updated: ')


def test_seed_list():
    assert ec.parse_seeds('0, 2,5') == [0, 2, 5]
    with pytest.raises(ConfigError):
        ec.parse_seeds('a,b')
