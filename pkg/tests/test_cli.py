import textwrap

import pandas as pd
import pytest

import blasso_cli

RECOVER = """
    experiment.name = recover_test
    experiment.seeds = 0, 1
    kernel.family = gaussian
    kernel.sigma = 1.0
    features.m = 50
    truth.amplitudes = 1
    truth.positions = 0.5
    solver.lambda = 0.05
"""

CERTIFY = """
    kernel.family = gaussian
    kernel.sigma = 1.0
    truth.amplitudes = 1; -1
    truth.positions = 0.0; 25.0
    certify.delta = 40
"""

SWEEP = """
    kernel.family = gaussian
    kernel.sigma = 1.0
    truth.amplitudes = 1
    truth.positions = 0.0
    sweep.lambda = 0, 0.05
    sweep.m = 30
"""

GMM = """
    experiment.seeds = 0
    gmm.weights = 0.5, 0.5
    gmm.means = -3; 3
    gmm.sigma = 1
    gmm.n = 20000
    gmm.m = 60
    solver.lambda = 0.02
"""


def write_config(tmp_path, body, name='run.cfg'):
    path = tmp_path / name
    path.write_text(textwrap.dedent(body))
    return path


def run(tmp_path, command, body, out='out', *extra):
    cfg = write_config(tmp_path, body)
    return blasso_cli.main([command, '--config', str(cfg), '--out', str(tmp_path / out), '--quiet', *extra])


def test_recover_writes_tables_and_a_result_line(tmp_path, capsys):
    assert run(tmp_path, 'recover', RECOVER) == 0
    out = tmp_path / 'out'
    for name in ('recover.csv', 'traces.csv', 'spikes.csv', 'lambda_curves.csv', 'summary.txt'):
        assert (out / name).exists()
    assert (out / 'recover.meta.txt').read_text().startswith('config_hash = ')
    runs = pd.read_csv(out / 'recover.csv')
    assert list(runs.columns) == blasso_cli.RUN_COLUMNS
    assert list(runs['seed']) == [0, 1]
    assert runs['spike_count'].tolist() == [1, 1]
    assert capsys.readouterr().out.startswith('recover: runs=2 bound_satisfied=')


def test_recover_is_deterministic(tmp_path):
    assert run(tmp_path, 'recover', RECOVER, 'a') == 0
    assert run(tmp_path, 'recover', RECOVER, 'b', '--threads', '2') == 0
    first = pd.read_csv(tmp_path / 'a' / 'recover.csv').drop(columns='runtime_ms')
    second = pd.read_csv(tmp_path / 'b' / 'recover.csv').drop(columns='runtime_ms')
    pd.testing.assert_frame_equal(first, second)
    pd.testing.assert_frame_equal(pd.read_csv(tmp_path / 'a' / 'spikes.csv'),
                                  pd.read_csv(tmp_path / 'b' / 'spikes.csv'))


def test_seed_override(tmp_path, capsys):
    assert run(tmp_path, 'recover', RECOVER, 'out', '--seeds', '4') == 0
    assert pd.read_csv(tmp_path / 'out' / 'recover.csv')['seed'].tolist() == [4]
    assert 'seeds = 4' in (tmp_path / 'out' / 'recover.meta.txt').read_text()


def test_certify_prints_the_verdict(tmp_path, capsys):
    assert run(tmp_path, 'certify', CERTIFY) == 0
    line = capsys.readouterr().out.strip()
    assert line.startswith('certify: PASS kernel=gaussian admissible=pass nondegenerate=pass')
    margins = pd.read_csv(tmp_path / 'out' / 'margins.csv')
    premise = margins[margins['condition'] == 'separation']
    assert not premise['passed'].iloc[0]
    constants = pd.read_csv(tmp_path / 'out' / 'constants.csv')
    assert 'Delta' in set(constants['name'])
    assert (tmp_path / 'out' / 'certificate_grid.csv').exists()


def test_sweep_skips_a_zero_lambda(tmp_path, capsys):
    assert run(tmp_path, 'sweep', SWEEP) == 0
    assert capsys.readouterr().out.strip() == 'sweep: cells=2 skipped=1 runs=1'
    frontier = pd.read_csv(tmp_path / 'out' / 'frontier.csv')
    skipped = frontier[frontier['lambda'] == 0]
    assert skipped['skipped'].iloc[0]
    assert skipped['success_fraction'].isna().iloc[0]


@pytest.mark.slow
def test_gmm_pipeline(tmp_path, capsys):
    assert run(tmp_path, 'gmm', GMM) == 0
    assert capsys.readouterr().out.startswith('gmm: runs=1')
    runs = pd.read_csv(tmp_path / 'out' / 'gmm_runs.csv')
    assert runs['seed'].tolist() == [0]


@pytest.mark.parametrize('body', [
    RECOVER.replace('solver.lambda = 0.05', 'solver.lambda = -0.05'),
    RECOVER + '    solver.lamda = 0.1\n',
    RECOVER + '    solver.lambda = 0.1\n',
    RECOVER.replace('kernel.sigma = 1.0', 'kernel.sigma = wide'),
    RECOVER.replace('experiment.seeds = 0, 1', 'experiment.seeds = 1, 1'),
])
def test_configuration_errors_exit_2_before_writing(tmp_path, body):
    assert run(tmp_path, 'recover', body) == 2
    assert not (tmp_path / 'out').exists()


def test_missing_section_is_a_configuration_error(tmp_path):
    assert run(tmp_path, 'recover', GMM) == 2
    assert run(tmp_path, 'gmm', RECOVER) == 2
    assert not (tmp_path / 'out').exists()


def test_missing_config_file(tmp_path):
    assert blasso_cli.main(['recover', '--config', str(tmp_path / 'absent.cfg')]) == 2


def test_parser_exits(capsys):
    assert blasso_cli.main(['--version']) == 0
    assert blasso_cli.__version__ in capsys.readouterr().out
    assert blasso_cli.main([]) == 2


def test_plot_table_is_long_format():
    frame = pd.DataFrame({'lambda': [0.1, 0.2], 'a': [1.0, 2.0], 'b': [3.0, 4.0]})
    table = blasso_cli.plot_table(frame, 'lambda', ['a', 'b'])
    assert list(table.columns) == ['x', 'y', 'series']
    assert table['series'].tolist() == ['a', 'a', 'b', 'b']
    assert table['y'].tolist() == [1.0, 2.0, 3.0, 4.0]
