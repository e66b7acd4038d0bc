"""
BLASSO experiment runner.

    python blasso_cli.py recover --config configs/fejer_recover.cfg
    python blasso_cli.py sweep   --config configs/gaussian_sweep.cfg --threads 4
    python blasso_cli.py certify --config configs/gaussian_certify.cfg
    python blasso_cli.py gmm     --config configs/gmm_demo.cfg --seeds 0,1,2

Every command writes CSV tables (with .meta.txt sidecars) and summary.txt into
the output directory; logs go to stderr, one result line goes to stdout.
Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""

import argparse
import dataclasses
import itertools
import sys
import time
import traceback

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

import admissibility
import certificates
import console
import features
import geometry
import sketch
import solver
from errors import BlassoError, ConfigError
from experiment_config import (LAMBDA_FLOOR, R_NEAR, RunMeta, load_config, parse_seeds,
                               write_summary, write_table)

__version__ = '1.0.0'

RUN_COLUMNS = ['seed', 'm', 'lambda', 'w_norm', 'spike_count', 'sign_match', 'amplitude_error',
               'position_error', 'bound_rhs', 'bound_satisfied', 'gap', 'converged', 'runtime_ms']


def plot_table(frame, x, columns):
    """Long-format plot data: one (x, y, series) row per point of each curve."""
    parts = [pd.DataFrame({'x': frame[x].to_numpy(), 'y': frame[c].to_numpy(), 'series': c})
             for c in columns]
    return pd.concat(parts, ignore_index=True)


def _position_columns(prefix, X):
    return {f"{prefix}_{k + 1}": X[:, k] for k in range(X.shape[1])}


def recover_one(config, seed, lam, m=None, sigma_w=None):
    """One seeded recovery: sample frequencies and noise, solve, compare to the truth."""
    op = config.kernel.operator(seed, m)
    kernel = op.kernel
    truth = config.truth.measure()
    w = config.noise.sample(op.m, seed, sigma_w)
    w_norm = float(np.linalg.norm(w))
    row = dict(seed=seed, m=op.m, **{'lambda': lam}, w_norm=w_norm)
    if lam < LAMBDA_FLOOR:
        console.warning(f"lambda={lam:g} is below the precision floor {LAMBDA_FLOOR:g}; cell skipped")
        row.update(skipped=True)
        return row, None
    y = features.forward(op, truth) + w
    cfg = config.solver_config(lam, config.search_box(kernel))
    t0 = time.perf_counter()
    result = solver.solve_blasso(op, kernel, y, cfg)
    runtime_ms = 1000.0 * (time.perf_counter() - t0)
    report = solver.stability_report(result, truth, kernel, lam, w_norm)
    row.update(spike_count=result.measure.s,
               spike_count_match=report.spike_count_match,
               sign_match=report.sign_match,
               amplitude_error=report.amplitude_error,
               position_error=report.position_error,
               bound_rhs=report.bound_rhs,
               bound_satisfied=report.bound_satisfied,
               gap=result.gap,
               converged=result.converged,
               runtime_ms=runtime_ms,
               skipped=False)
    return row, result


def _spike_rows(seed, lam, result):
    mu = result.measure
    frame = pd.DataFrame({'seed': seed, 'lambda': lam, 'index': np.arange(mu.s),
                          'amplitude_real': mu.amplitudes.real,
                          'amplitude_imag': mu.amplitudes.imag,
                          **_position_columns('x', mu.positions)})
    return frame


def _trace_rows(seed, lam, result):
    frame = result.trace.copy()
    frame.insert(0, 'lambda', lam)
    frame.insert(0, 'seed', seed)
    return frame


def _meta(config, command):
    return RunMeta(config.config_hash, config.seeds, __version__, command)


def _lambdas(config):
    if config.lam is not None:
        return [config.lam]
    if config.sweep is not None:
        return list(config.sweep.lambdas)
    raise ConfigError('solver.lambda', "a regularization parameter is required")


def run_recovery(config, command):
    """recover: per-seed stability rows, solver traces, recovered spikes and lambda curves."""
    lambdas = _lambdas(config)
    console.banner('BLASSO RECOVERY', config.name)
    console.field('Kernel', config.kernel.family)
    console.field('Seeds', ', '.join(str(s) for s in config.seeds))
    console.field('Lambda', ', '.join(f"{v:g}" for v in lambdas))
    config.out.mkdir(parents=True, exist_ok=True)

    tasks = [(seed, lam) for lam in lambdas for seed in config.seeds]
    outputs = Parallel(n_jobs=config.threads)(
        delayed(recover_one)(config, seed, lam) for seed, lam in tasks)

    rows = [row for row, _ in outputs if not row.get('skipped')]
    runs = pd.DataFrame(rows, columns=RUN_COLUMNS)
    meta = _meta(config, command)
    write_table(runs, config.out / 'recover.csv', meta)
    done = [(seed, lam, res) for (seed, lam), (_, res) in zip(tasks, outputs) if res is not None]
    if done:
        write_table(pd.concat([_trace_rows(*item) for item in done], ignore_index=True),
                    config.out / 'traces.csv', meta)
        write_table(pd.concat([_spike_rows(*item) for item in done], ignore_index=True),
                    config.out / 'spikes.csv', meta)
    if not runs.empty:
        curves = (runs.groupby('lambda', sort=True)[['amplitude_error', 'position_error', 'bound_rhs']]
                  .mean().reset_index())
        write_table(plot_table(curves, 'lambda', ['amplitude_error', 'position_error', 'bound_rhs']),
                    config.out / 'lambda_curves.csv', meta)

    satisfied = int(runs['bound_satisfied'].sum()) if not runs.empty else 0
    skipped = len(outputs) - len(rows)
    write_summary(config.out / 'summary.txt', 'BLASSO recover', {
        'Runs': len(rows), 'Bound satisfied': satisfied, 'Bound violated': len(rows) - satisfied,
        'Unconverged': int((~runs['converged'].astype(bool)).sum()) if not runs.empty else 0,
        'Skipped': skipped})
    console.success(f"{satisfied}/{len(rows)} runs satisfied the stability bound")
    print(f"recover: runs={len(rows)} bound_satisfied={satisfied} skipped={skipped}")
    return 0


def run_sweep(config, command):
    """sweep: success frontier over the (lambda, m, sigma_w) grid."""
    sweep = config.sweep
    cells = list(itertools.product(sweep.lambdas, sweep.ms, sweep.sigma_ws))
    console.banner('BLASSO SWEEP', config.name)
    console.field('Cells', len(cells))
    console.field('Seeds per cell', len(config.seeds))
    config.out.mkdir(parents=True, exist_ok=True)

    tasks = [(cell, seed) for cell in cells for seed in config.seeds]
    outputs = Parallel(n_jobs=config.threads)(
        delayed(recover_one)(config, seed, lam, m, sigma_w) for (lam, m, sigma_w), seed in tasks)

    runs, frontier = [], []
    for k, (lam, m, sigma_w) in enumerate(cells):
        block = [row for row, _ in outputs[k * len(config.seeds):(k + 1) * len(config.seeds)]]
        skipped = any(row.get('skipped') for row in block)
        successes = 0 if skipped else sum(bool(r['spike_count_match'] and r['sign_match'])
                                           for r in block)
        frontier.append({'lambda': lam, 'm': m, 'sigma_w': sigma_w, 'seeds': len(block),
                         'successes': successes,
                         'success_fraction': np.nan if skipped else successes / len(block),
                         'skipped': skipped})
        for row in block:
            if not row.get('skipped'):
                runs.append(dict(row, sigma_w=sigma_w))

    meta = _meta(config, command)
    write_table(pd.DataFrame(runs, columns=RUN_COLUMNS + ['sigma_w']),
                config.out / 'sweep_runs.csv', meta)
    frontier = pd.DataFrame(frontier)
    write_table(frontier, config.out / 'frontier.csv', meta)
    curves = frontier[~frontier['skipped']].copy()
    curves['series'] = [f"lambda={l:g},sigma_w={s:g}" for l, s in zip(curves['lambda'], curves['sigma_w'])]
    write_table(curves.rename(columns={'m': 'x', 'success_fraction': 'y'})[['x', 'y', 'series']],
                config.out / 'frontier_curves.csv', meta)

    n_skipped = int(frontier['skipped'].sum())
    write_summary(config.out / 'summary.txt', 'BLASSO sweep', {
        'Cells': len(cells), 'Skipped cells': n_skipped, 'Runs': len(runs),
        'Successful runs': int(frontier['successes'].sum())})
    print(f"sweep: cells={len(cells)} skipped={n_skipped} runs={len(runs)}")
    return 0


def _certify_params(config, kernel, s_max):
    spec = config.certify
    if spec.custom:
        missing = [k for k in ('r_near', 'eps0', 'eps2') if getattr(spec, k) is None]
        if missing:
            raise ConfigError(f"certify.{missing[0]}", "custom constants need r_near, eps0 and eps2")
        template = admissibility.AdmissibilityParams(
            r_near=spec.r_near, Delta=None, eps0=spec.eps0, eps2=spec.eps2, s_max=s_max,
            C_H=spec.C_H or 0.0, source='custom')
        delta = spec.delta or admissibility.minimal_certified_separation(
            kernel, s_max, template, config.grid)
        return dataclasses.replace(template, Delta=delta)
    params = admissibility.tabulated_constants(kernel, s_max, spec.convention, config.grid,
                                           resolve_delta=spec.delta is None)
    if spec.delta is not None:
        params = dataclasses.replace(params, Delta=spec.delta, B=None, h=None)
    return params


def _min_separation(kernel, X):
    if X.shape[0] < 2:
        return np.inf
    dist = geometry.fisher_distance(kernel, X[:, None, :], X[None, :, :])
    return float(np.min(dist[np.triu_indices(X.shape[0], 1)]))


def _nondegeneracy_rows(report, d):
    def point(x):
        x = np.full(d, np.nan) if x is None else np.asarray(x)
        return {f"x_{k + 1}": x[k] for k in range(d)}

    far_margin = report.eps0_measured - report.eps0
    near_margin = report.eps2_measured - report.eps2
    return [
        dict(condition='nondegeneracy_far', regime='far', measured=report.eps0_measured,
             bound=report.eps0, margin=far_margin, passed=far_margin >= -certificates.PASS_TOL,
             **point(report.worst_far_point)),
        dict(condition='nondegeneracy_near', regime='near', measured=report.eps2_measured,
             bound=report.eps2, margin=near_margin, passed=near_margin >= -certificates.PASS_TOL,
             **point(report.worst_near_point)),
        dict(condition='nondegeneracy_hessian', regime='spikes', measured=report.hessian_margin,
             bound=0.0, margin=report.hessian_margin, passed=report.hessian_passed),
    ]


def run_certify(config, command):
    """certify: admissibility of the kernel and nondegeneracy of the limit pre-certificate."""
    kernel = config.kernel.limit_kernel()
    truth = config.truth
    s_max = config.certify.s_max or truth.amplitudes.shape[0]
    console.banner('BLASSO CERTIFY', config.name)
    console.field('Kernel', kernel.family)
    console.field('Spikes', truth.amplitudes.shape[0])
    config.out.mkdir(parents=True, exist_ok=True)

    params = _certify_params(config, kernel, s_max)
    console.info(f"constants ({params.source}): r_near={params.r_near:g} eps0={params.eps0:g} "
                 f"eps2={params.eps2:g} Delta={params.Delta:.6g}")
    admissible = admissibility.verify_admissible(kernel, params, config.grid)

    signs = certificates.signs_of(truth.amplitudes)
    system = certificates.build_limit_gamma(kernel, truth.positions, signs)
    coef = certificates.precertificate(system)
    nondeg = certificates.check_nondegeneracy(coef.eta, truth.amplitudes, truth.positions,
                                              params.r_near, params.eps0 / 2.0, params.eps2 / 2.0,
                                              config.grid)
    separation = _min_separation(kernel, truth.positions)

    margins = pd.concat([admissible.to_frame(kernel),
                         pd.DataFrame(_nondegeneracy_rows(nondeg, kernel.d))], ignore_index=True)
    margins = pd.concat([margins, pd.DataFrame([dict(
        condition='separation', regime='premise', measured=separation, bound=params.Delta,
        margin=separation - params.Delta, passed=separation >= params.Delta)])], ignore_index=True)
    meta = _meta(config, command)
    write_table(margins, config.out / 'margins.csv', meta)

    used = admissible.params
    constants = [('source', used.source), ('r_near', used.r_near), ('Delta', used.Delta),
                 ('eps0', used.eps0), ('eps2', used.eps2), ('s_max', used.s_max),
                 ('C_H', used.C_H), ('h', used.h)]
    constants += [(f"B_{i}{j}", v) for (i, j), v in sorted(used.B.items())]
    write_table(pd.DataFrame(constants, columns=['name', 'value']), config.out / 'constants.csv', meta)
    write_table(nondeg.to_frame(), config.out / 'certificate_grid.csv', meta)

    passed = admissible.passed and nondeg.passed
    if not admissible.passed:
        console.warning(f"admissibility failed: {', '.join(admissible.failed)}")
    if not nondeg.passed:
        worst = nondeg.worst_far_point if nondeg.eps0_measured < nondeg.eps0 else nondeg.worst_near_point
        console.warning(f"nondegeneracy failed; worst point {np.round(worst, 6).tolist()}")
    write_summary(config.out / 'summary.txt', 'BLASSO certify', {
        'Conditions': len(margins), 'Passed': int(margins['passed'].sum()),
        'Failed': int((~margins['passed'].astype(bool)).sum()),
        'Result': 'PASS' if passed else 'FAIL'})
    print(f"certify: {'PASS' if passed else 'FAIL'} kernel={kernel.family} "
          f"admissible={'pass' if admissible.passed else 'fail'} "
          f"nondegenerate={'pass' if nondeg.passed else 'fail'} "
          f"Delta={params.Delta:.6g} min_separation={separation:.6g}")
    return 0


def gmm_one(config, seed, lam):
    """Sample, sketch, learn and evaluate one mixture."""
    spec = config.gmm
    model = spec.model()
    data = sketch.sample_gmm(model, spec.n, seed)
    family = features.gmm_sketch(model.sigma, spec.c)
    freqs = features.sample_frequencies(family, spec.m, seed)
    sk = sketch.compute_sketch(data, freqs)
    box = sketch.data_box(data)
    cfg = config.solver_config(lam, box, R_NEAR[geometry.GAUSSIAN] / 4.0)
    t0 = time.perf_counter()
    fit = sketch.learn_gmm(sk, model.sigma, lam, cfg, spec.c, box)
    runtime_ms = 1000.0 * (time.perf_counter() - t0)
    evaluation = sketch.evaluate_gmm(fit.model, model)
    components = 0 if fit.model is None else fit.model.s
    success = evaluation.component_count_match and evaluation.max_mean_error <= spec.mean_tol
    row = dict(seed=seed, n=spec.n, m=spec.m, **{'lambda': lam}, components=components,
               component_count_match=evaluation.component_count_match,
               max_mean_error=evaluation.max_mean_error, weight_error=evaluation.weight_error,
               sketch_noise=sketch.sketch_noise(sk, model), max_phase=fit.max_phase,
               flagged=fit.flagged, success=bool(success), gap=fit.result.gap,
               converged=fit.result.converged, runtime_ms=runtime_ms)
    matched = None
    if fit.model is not None:
        matched = evaluation.to_frame(fit.model, model)
        matched.insert(0, 'seed', seed)
    return row, matched, fit.model


def sketch_noise_one(model, n, m, c, seed):
    family = features.gmm_sketch(model.sigma, c)
    freqs = features.sample_frequencies(family, m, seed)
    data = sketch.sample_gmm(model, n, seed)
    return dict(n=n, seed=seed, sketch_noise=sketch.sketch_noise(sketch.compute_sketch(data, freqs), model))


def run_gmm(config, command):
    """gmm: compressive mixture learning from sketches, one run per seed."""
    spec = config.gmm
    console.banner('COMPRESSIVE GMM', config.name)
    console.field('Components', spec.weights.shape[0])
    console.field('Samples', spec.n)
    console.field('Frequencies', spec.m)
    config.out.mkdir(parents=True, exist_ok=True)

    outputs = Parallel(n_jobs=config.threads)(
        delayed(gmm_one)(config, seed, config.lam) for seed in config.seeds)
    meta = _meta(config, command)
    runs = pd.DataFrame([row for row, _, _ in outputs])
    write_table(runs, config.out / 'gmm_runs.csv', meta)
    matched = [frame for _, frame, _ in outputs if frame is not None]
    if matched:
        write_table(pd.concat(matched, ignore_index=True), config.out / 'matched_means.csv', meta)
    for seed, (_, _, fitted) in zip(config.seeds, outputs):
        if fitted is not None:
            fitted.to_text(config.out / f"gmm_model_seed{seed}.txt")

    if spec.n_grid:
        model = spec.model()
        noise = pd.DataFrame(Parallel(n_jobs=config.threads)(
            delayed(sketch_noise_one)(model, n, spec.m, spec.c, seed)
            for n in spec.n_grid for seed in config.seeds))
        write_table(noise, config.out / 'sketch_noise.csv', meta)
        curve = noise.groupby('n', sort=True)['sketch_noise'].median().reset_index()
        write_table(plot_table(curve, 'n', ['sketch_noise']), config.out / 'sketch_noise_curve.csv', meta)

    successes = int(runs['success'].sum())
    write_summary(config.out / 'summary.txt', 'Compressive GMM', {
        'Runs': len(runs), 'Successes': successes, 'Failures': len(runs) - successes,
        'Flagged': int(runs['flagged'].sum())})
    console.success(f"{successes}/{len(runs)} seeds recovered every component")
    print(f"gmm: runs={len(runs)} successes={successes}")
    return 0


COMMANDS = {
    'recover': (run_recovery, "recover spikes for each seed and evaluate support stability"),
    'sweep': (run_sweep, "success frontier over lambda, m and noise grids"),
    'certify': (run_certify, "check admissibility and pre-certificate nondegeneracy"),
    'gmm': (run_gmm, "compressive Gaussian mixture learning demo"),
}

# sections each command needs, checked before anything is written
REQUIRED = {'recover': ('kernel', 'truth'), 'sweep': ('kernel', 'truth', 'sweep'),
            'certify': ('kernel', 'truth'), 'gmm': ('gmm',)}


def build_parser():
    parser = argparse.ArgumentParser(prog='blasso_cli', description="Off-the-grid sparse recovery experiments")
    parser.add_argument('--version', action='version', version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest='command', required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument('--config', required=True, help="experiment file (key = value lines)")
        p.add_argument('--out', default=None, help="output directory (overrides experiment.out)")
        p.add_argument('--seeds', default=None, help="comma-separated seeds (overrides experiment.seeds)")
        p.add_argument('--threads', type=int, default=None, help="worker count (default $BLASSO_THREADS or 1)")
        level = p.add_mutually_exclusive_group()
        level.add_argument('--quiet', action='store_true', help="only warnings and errors")
        level.add_argument('--verbose', action='store_true', help="debug output")
    return parser


def _validate(config, command):
    config.require(*REQUIRED[command])
    if command == 'recover':
        _lambdas(config)
    if command == 'gmm' and config.lam is None:
        raise ConfigError('solver.lambda', "the gmm pipeline needs solver.lambda")


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    console.set_verbosity(console.QUIET if args.quiet else console.DEBUG if args.verbose else console.NORMAL)
    command_line = ' '.join(['blasso_cli'] + argv)
    try:
        seeds = parse_seeds(args.seeds) if args.seeds is not None else None
        config = load_config(args.config, args.out, seeds, args.threads)
        _validate(config, args.command)
        runner, _ = COMMANDS[args.command]
        return runner(config, command_line)
    except ConfigError as exc:
        console.error(f"configuration error: {exc}")
        return exc.exit_code
    except BlassoError as exc:
        console.error(str(exc))
        return exc.exit_code
    except Exception as exc:
        console.error(f"unexpected failure: {exc}")
        console.debug(traceback.format_exc())
        return 1


if __name__ == "__main__":
    sys.exit(main())
