"""
piecewise-sir command line.

    piecewise-sir simulate --scenario A --seed 7 --out sim/
    piecewise-sir fit sim/ --region target --model 3 --out fits/
    piecewise-sir forecast fits/target/model.json sim/ --horizon 14 --out fc/
    piecewise-sir replicate --scenario A --reps 20 --jobs 4 --out study/
    piecewise-sir ingest-check data/

Exit status: 0 on success, 1 on a data or estimation error, 2 on a usage
error.
"""
import argparse
import json
import logging
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import pandas as pd

from piecewise_sir import ingest, pipeline, settings, simgen
from piecewise_sir.config import FitConfig, load_config
from piecewise_sir.context import RegionLogFilter, region_scope
from piecewise_sir.core_model import basic_reproduction_number
from piecewise_sir.exceptions import ConfigError, ParseError, PiecewiseSirError
from piecewise_sir.spatial import WEIGHT_SCHEMES, select_weight_scheme
from piecewise_sir.varfit import residual_acf

logger = logging.getLogger(__name__)

_handler = None


def setup_logging(verbose=False):
    global _handler
    package_logger = logging.getLogger('piecewise_sir')
    if _handler is not None:
        package_logger.removeHandler(_handler)
    _handler = logging.StreamHandler(sys.stderr)
    _handler.addFilter(RegionLogFilter())
    _handler.setFormatter(logging.Formatter(settings.LOG_FORMAT))
    package_logger.addHandler(_handler)
    package_logger.setLevel(logging.DEBUG if verbose else logging.INFO)


def _model_name(value):
    name = value if value.startswith('model') else 'model' + value
    if name not in pipeline.VARIANTS:
        raise argparse.ArgumentTypeError('model must be 1, 2 or 3')
    return name


def _scenario_id(value):
    value = value.upper()
    if value not in simgen.SCENARIOS:
        raise argparse.ArgumentTypeError('unknown scenario {!r}, choose from {}'.format(
            value, ', '.join(simgen.SCENARIOS)))
    return value


def _float_list(value):
    try:
        return tuple(float(v) for v in value.split(',') if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError('expected comma separated numbers, got {!r}'.format(value))


def _int_list(value):
    try:
        return tuple(int(v) for v in value.split(',') if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError('expected comma separated days, got {!r}'.format(value))


# flag dest -> FitConfig field
CONFIG_FLAGS = {
    'model': 'model',
    'weights': 'scheme',
    'block_size': 'block_size',
    'lambda_grid_size': 'lambda_grid_size',
    'lambda_value': 'lambda_',
    'underreporting': 'underreporting',
    'a': 'a',
    'b': 'b',
    'a_grid': 'a_grid',
    'cutoff': 'cutoff',
    'distance_threshold': 'distance_threshold',
    'max_neighbors': 'max_neighbors',
    'p_max': 'p_max',
    'breaks': 'fixed_breaks',
    'seed': 'seed',
}


def _add_config_flags(parser):
    group = parser.add_argument_group('estimation settings (override --config)')
    group.add_argument('--model', type=_model_name, help='model variant: 1, 2 or 3')
    group.add_argument('--weights', choices=WEIGHT_SCHEMES + ('auto',),
                       help='spatial weight scheme; auto picks the best out-of-sample one')
    group.add_argument('--block-size', type=int, help='block length b_n in days')
    group.add_argument('--lambda-grid-size', type=int)
    group.add_argument('--lambda', dest='lambda_value', type=float, help='fixed lasso penalty, skips CV')
    group.add_argument('--underreporting', choices=('none', 'quadratic', 'exponential'))
    group.add_argument('--a', type=float, help='fixed under-reporting parameter, skips the grid search')
    group.add_argument('--b', type=float, help='rate of the exponential under-reporting family')
    group.add_argument('--a-grid', type=_float_list, help='comma separated grid for a')
    group.add_argument('--cutoff', type=int, help='day after which reporting is complete')
    group.add_argument('--distance-threshold', type=float, help='neighbor range in miles')
    group.add_argument('--max-neighbors', type=int)
    group.add_argument('--p-max', type=int, help='largest VAR order considered')
    group.add_argument('--breaks', type=_int_list, help='fixed change points (day indices), skips detection')
    group.add_argument('--seed', type=int)


def build_parser():
    parser = argparse.ArgumentParser(prog='piecewise-sir',
                                     description='Change points and forecasts for piecewise SIR models.')
    parser.add_argument('-v', '--verbose', action='store_true', help='debug logging')
    parser.add_argument('--config', help='JSON or TOML file of estimation settings')
    parser.add_argument('--jobs', type=int, default=1, help='worker threads across regions or replicates')
    commands = parser.add_subparsers(dest='command', metavar='command')
    commands.required = True

    simulate = commands.add_parser('simulate', help='write a simulated scenario as CSV')
    simulate.add_argument('--scenario', type=_scenario_id, required=True)
    simulate.add_argument('--seed', type=int)
    simulate.add_argument('--out', required=True)
    simulate.set_defaults(handler=cmd_simulate)

    fit = commands.add_parser('fit', help='fit a model to one or more regions')
    fit.add_argument('data', help='data directory (series.csv or cases.csv layout)')
    fit.add_argument('--region', action='append', help='region to fit; repeat for several, default all')
    fit.add_argument('--holdout', type=int, default=0, help='days left out at the end of each series')
    fit.add_argument('--start', help='first calendar date considered (raw case files)')
    fit.add_argument('--end', help='last calendar date considered (raw case files)')
    fit.add_argument('--out', required=True)
    _add_config_flags(fit)
    fit.set_defaults(handler=cmd_fit)

    forecast = commands.add_parser('forecast', help='forecast from a fitted model.json')
    forecast.add_argument('model_path', metavar='model', help='model.json written by fit')
    forecast.add_argument('data', help='data directory the model was fit on')
    forecast.add_argument('--horizon', type=int, default=None)
    forecast.add_argument('--mode', choices=('rolling', 'free'))
    forecast.add_argument('--segment', type=int, help='free mode: hold the rates of this 0-based segment')
    forecast.add_argument('--origin', type=int, help='free mode: day the projection starts from')
    forecast.add_argument('--out', required=True)
    forecast.set_defaults(handler=cmd_forecast)

    replicate = commands.add_parser('replicate', help='Monte Carlo study of a scenario')
    replicate.add_argument('--scenario', type=_scenario_id, required=True)
    replicate.add_argument('--reps', type=int, default=20)
    replicate.add_argument('--no-untransformed', action='store_true',
                           help='skip the refit without the under-reporting transform')
    replicate.add_argument('--out', required=True)
    _add_config_flags(replicate)
    replicate.set_defaults(handler=cmd_replicate)

    check = commands.add_parser('ingest-check', help='validate a data directory')
    check.add_argument('data')
    check.add_argument('--start')
    check.add_argument('--end')
    check.add_argument('--out', help='also write the report as CSV')
    check.set_defaults(handler=cmd_ingest_check)
    return parser


def resolve_config(args):
    config = load_config(args.config) if args.config else FitConfig()
    changes = {}
    for flag, name in CONFIG_FLAGS.items():
        value = getattr(args, flag, None)
        if value is None or (flag == 'weights' and value == 'auto'):
            continue
        changes[name] = value
    return FitConfig.from_mapping(changes, base=config)


def _write_json(path, data):
    with open(path, 'w') as fh:
        json.dump(data, fh, indent=2)
        fh.write('\n')
    return path


def _write_csv(path, frame):
    frame.to_csv(path, index=False)
    return path


def cmd_simulate(args, config):
    scenario = simgen.get_scenario(args.scenario)
    seed = args.seed if args.seed is not None else scenario.seed
    result = simgen.generate(scenario.replace(seed=seed))
    out = simgen.export_csv(result, args.out)
    return [out / ingest.SERIES_FILE, out / ingest.POPULATION_FILE, out / ingest.DISTANCES_FILE, out / 'truth.json']


def _day_dates(start_date, days):
    first = np.datetime64(start_date, 'D')
    return [str(first + np.timedelta64(int(d) - 1, 'D')) for d in days]


def change_point_frame(model):
    days = list(model.breaks)
    return pd.DataFrame({'index': range(1, len(days) + 1), 'day': days,
                         'date': _day_dates(model.start_date, days)})


def segment_frame(model):
    rows = []
    for j, s in enumerate(model.segments):
        rows.append({'segment': j, 'start_day': s.start, 'end_day': s.end - 1,
                     'start_date': _day_dates(model.start_date, [s.start])[0],
                     'beta': s.beta, 'gamma': s.gamma, 'se_beta': s.se_beta, 'se_gamma': s.se_gamma,
                     'r0': basic_reproduction_number(s)})
    return pd.DataFrame(rows)


def acf_frame(residuals):
    n = len(residuals)
    max_lag = min(settings.ACF_MAX_LAG, math.ceil(n / 2) - 1)
    rho = residual_acf(residuals, max_lag)
    return pd.DataFrame({'lag': np.arange(max_lag + 1), 'acf_infected': rho[:, 0], 'acf_recovered': rho[:, 1],
                         'band': 2.0 / np.sqrt(n)})


def write_fit(model, series, catalog, directory):
    """model.json plus the diagnostics tables of one fitted region."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    catalog = catalog if model.has_spatial else None
    residuals = pipeline.in_sample_residuals(model, series, catalog)
    days = np.arange(1, len(residuals) + 1)
    fitted = pipeline.fitted_series(model, series, catalog)
    return [
        _write_json(directory / 'model.json', model.to_dict()),
        _write_csv(directory / 'change_points.csv', change_point_frame(model)),
        _write_csv(directory / 'segments.csv', segment_frame(model)),
        _write_csv(directory / 'residuals.csv', pd.DataFrame({
            'day': days, 'date': _day_dates(model.start_date, days),
            'resid_infected': residuals[:, 0], 'resid_recovered': residuals[:, 1]})),
        _write_csv(directory / 'acf.csv', acf_frame(residuals)),
        _write_csv(directory / 'fitted.csv', pd.DataFrame({
            'date': [str(d) for d in series.dates],
            'observed_infected': series.infected, 'fitted_infected': fitted.infected,
            'observed_recovered': series.recovered, 'fitted_recovered': fitted.recovered})),
    ]


def fit_region(catalog, region_id, config, holdout, out, auto_scheme=False):
    with region_scope(region_id):
        series = catalog.series[region_id]
        if holdout >= len(series):
            raise ConfigError('holdout of {} days leaves nothing to fit, {} has {} days'.format(
                holdout, region_id, len(series)))
        train = series.head(len(series) - holdout) if holdout else series
        if auto_scheme and config.model != 'model1':
            n_test = holdout or config.horizon
            scheme, _ = select_weight_scheme(train, catalog, config, n_test)
            config = config.replace(scheme=scheme)
        model = pipeline.fit(train, catalog, config)
        logger.info('%d change points at %s', model.change_points.n_breaks,
                    _day_dates(model.start_date, model.breaks))
        return write_fit(model, train, catalog, Path(out) / region_id)


def cmd_fit(args, config):
    catalog = ingest.load_data_dir(args.data, args.start, args.end)
    regions = args.region or sorted(catalog.series)
    unknown = [r for r in regions if r not in catalog.series]
    if unknown:
        raise ConfigError('regions not in {}: {}'.format(args.data, ', '.join(unknown)))
    if args.holdout < 0:
        raise ConfigError('holdout must be nonnegative')

    def run(region_id):
        return fit_region(catalog, region_id, config, args.holdout, args.out, args.weights == 'auto')

    if args.jobs > 1 and len(regions) > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            written = list(pool.map(run, regions))
    else:
        written = [run(r) for r in regions]
    return [path for paths in written for path in paths]


def load_model(path):
    try:
        with open(path) as fh:
            return pipeline.FittedModel.from_dict(json.load(fh))
    except OSError as exc:
        raise ParseError('cannot read {}: {}'.format(path, exc))
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError('{} is not a fitted model: {}'.format(path, exc))


def forecast_frame(report):
    return pd.DataFrame({'day': report.days, 'date': list(report.dates),
                         'observed_infected': report.observed_infected,
                         'predicted_infected': report.predicted_infected,
                         'observed_recovered': report.observed_recovered,
                         'predicted_recovered': report.predicted_recovered,
                         'error_infected': report.daily_errors_infected,
                         'error_recovered': report.daily_errors_recovered})


def cmd_forecast(args, config):
    model = load_model(args.model_path)
    catalog = ingest.load_data_dir(args.data)
    if model.region_id not in catalog.series:
        raise ConfigError('region {} is not in {}'.format(model.region_id, args.data))
    horizon = args.horizon if args.horizon is not None else config.horizon
    if horizon < 0:
        raise ConfigError('horizon must be nonnegative')
    report = pipeline.forecast(model, catalog.series[model.region_id], catalog, horizon,
                               mode=args.mode or config.forecast_mode, segment=args.segment, origin=args.origin)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return [_write_json(out / 'forecast.json', report.to_dict()),
            _write_csv(out / 'forecast.csv', forecast_frame(report))]


def cmd_replicate(args, config):
    if args.reps < 1:
        raise ConfigError('reps must be at least 1')
    scenario = simgen.get_scenario(args.scenario)
    if args.seed is not None:
        scenario = scenario.replace(seed=args.seed)
    summary = simgen.run_replicates(scenario, args.reps, config, jobs=args.jobs,
                                    compare_untransformed=not args.no_untransformed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    points = pd.DataFrame({
        'replicate': [o.replicate for o in summary.outcomes],
        'points': [' '.join(str(p) for p in o.points) for o in summary.outcomes],
        'error': [o.error or '' for o in summary.outcomes]})
    return [_write_csv(out / 'summary_{}.csv'.format(scenario.id), summary.to_frame()),
            _write_csv(out / 'replicates_{}.csv'.format(scenario.id), points)]


def ingest_report(directory, start=None, end=None):
    """Per-region day counts, date range, gap fills and isolation of a data directory."""
    directory = Path(directory)
    gap_fills = {}
    if not (directory / ingest.SERIES_FILE).exists() and (directory / ingest.CASES_FILE).exists():
        gap_fills = ingest.read_cases(directory / ingest.CASES_FILE).gap_fills
    catalog = ingest.load_data_dir(directory, start, end)
    isolated = set(catalog.isolated())
    rows = []
    for region_id in sorted(catalog.series):
        s = catalog.series[region_id]
        rows.append({'region_id': region_id, 'days': len(s), 'first_date': str(s.dates[0]),
                     'last_date': str(s.dates[-1]), 'population': s.population,
                     'gap_fills': gap_fills.get(region_id, 0), 'isolated': region_id in isolated})
    return pd.DataFrame(rows, columns=['region_id', 'days', 'first_date', 'last_date', 'population',
                                       'gap_fills', 'isolated'])


def cmd_ingest_check(args, config):
    report = ingest_report(args.data, args.start, args.end)
    print(report.to_string(index=False) if len(report) else 'no regions with data')
    if args.out:
        return [_write_csv(args.out, report)]
    return []


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code
    setup_logging(args.verbose)
    try:
        config = resolve_config(args)
        written = args.handler(args, config)
    except PiecewiseSirError as exc:
        logger.error('%s', exc)
        print('error: {}'.format(exc), file=sys.stderr)
        return 1
    for path in written:
        print(path)
    return 0


if __name__ == '__main__':
    sys.exit(main())
