"""Command-line interface.

Usage::

    python -m mjplab.cli generate --process dfr --n 500 --obs 50 --out dfr.jsonl
    python -m mjplab.cli train --config dfr.toml --data dfr.jsonl --out dfr.ckpt.json
    python -m mjplab.cli evaluate --ckpt dfr.ckpt.json --data dfr.jsonl
    python -m mjplab.cli predict --ckpt dfr.ckpt.json --data dfr.jsonl --horizon 1.0
    python -m mjplab.cli analyze --ckpt dfr.ckpt.json --samples 1000

Exit codes: 0 on success, 2 for usage errors, 3 for data errors and 4 for
numeric failures.
"""

import argparse
import json
import logging
import os
import sys

from typing import (
    Any,
    Dict,
    List,
    Optional,
    Sequence,
    Tuple,
)

import numpy as np

import mjplab.analysis
import mjplab.config
import mjplab.core
import mjplab.predict
import mjplab.readwrite
import mjplab.simulate
import mjplab.vi
from mjplab.core import TimeSeries
from mjplab.errors import (
    DataError,
    NumericError,
)

_LOGGER = logging.getLogger(__name__)

EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

OBSERVED = 'observed'
FUTURE = 'future'

PARTS = ('train', 'validation', 'test')

_DATASET_SUFFIXES = ('.jsonl.gz', '.jsonl', '.json')


def _stem(path: str) -> str:
    for suffix in _DATASET_SUFFIXES:
        if path.endswith(suffix):
            return path[:-len(suffix)]
    return path


def meta_path(path: str) -> str:
    """``data.jsonl`` -> ``data.meta.json``."""
    return _stem(path) + '.meta.json'


def split_path(path: str, split: str) -> str:
    """``data.jsonl`` -> ``data.train.jsonl``."""
    stem = _stem(path)
    if stem == path:
        return '%s.%s' % (path, split)
    return path.replace(stem, '%s.%s' % (stem, split), 1)


def loss_path(ckpt: str) -> str:
    return _stem(ckpt) + '.loss.csv'


def _load_series(args: argparse.Namespace, config: mjplab.config.Config) -> List[TimeSeries]:
    """Read ``--data``; CSV options on the command line override the ``[data]`` section."""
    fmtparams = {'delimiter': config.data.csv_delimiter}
    fmtparams.update(mjplab.readwrite.parse_fmtparams(args.fmtparams))
    return mjplab.readwrite.load_series(
        args.data,
        time_col=args.csv_time_col or config.data.csv_time_col,
        series_col=args.csv_series_col,
        fmtparams=fmtparams,
    )


def pair_splits(
    series: Sequence[TimeSeries],
) -> Tuple[List[TimeSeries], Optional[List[TimeSeries]]]:
    """Separate observed records from their ``future`` continuations.

    Records without a ``split`` marker are all observed.  Futures are matched
    to observed records by their ``index``.
    """
    observed = [s for s in series if s.meta.get('split') != FUTURE]
    future = [s for s in series if s.meta.get('split') == FUTURE]
    if not future:
        return observed, None
    by_index = {s.meta.get('index'): s for s in future}
    matched = []
    for s in observed:
        try:
            matched.append(by_index[s.meta.get('index')])
        except KeyError:
            raise DataError('observed record %r has no future continuation' % s.meta.get('index'))
    return observed, matched


def cmd_generate(args: argparse.Namespace) -> None:
    grid = mjplab.simulate.parse_grid(args.grid)
    meta: Dict[str, Any] = dict(mjplab.simulate.ground_truth(args.process))
    meta.update({'n': args.n, 'obs': args.obs, 'grid': grid.value, 'seed': args.seed})

    if args.single:
        if args.process != mjplab.simulate.LV:
            raise DataError('--single is only available for the lv process')
        observed, future = mjplab.simulate.lv_single_trajectory(seed=args.seed)
        observed.meta.update({'split': OBSERVED, 'index': 0})
        future.meta.update({'split': FUTURE, 'index': 0})
        series = [observed, future]
        meta.update({'n': 1, 'single': True, 'start': list(mjplab.simulate.LV_SINGLE_START)})
    elif args.predict:
        observed, future = mjplab.simulate.generate(
            args.process, args.n, args.obs, grid, args.seed, args.threads, predict=True)
        series = list(observed) + list(future)
        meta['predict'] = True
    else:
        series = mjplab.simulate.generate(
            args.process, args.n, args.obs, grid, args.seed, args.threads)

    if args.split:
        observed, future = pair_splits(series)
        parts = mjplab.simulate.split_dataset(observed, seed=args.seed)
        meta['parts'] = {}
        for name, part in zip(PARTS, parts):
            records = list(part)
            if future is not None:
                chosen = {id(s) for s in part}
                records += [f for s, f in zip(observed, future) if id(s) in chosen]
            mjplab.readwrite.write_dataset(split_path(args.out, name), records)
            meta['parts'][name] = len(part)
    else:
        mjplab.readwrite.write_dataset(args.out, series)
    mjplab.readwrite.write_json(meta_path(args.out), meta)


def _save_progress(out: str, model: mjplab.vi.Model, state: mjplab.vi.TrainState) -> None:
    mjplab.vi.save_model(out, model, state)
    rows = [[row['epoch'], row['recon'], row['kl'], row['lr']] for row in state.history]
    mjplab.readwrite.write_csv(loss_path(out), ['epoch', 'recon', 'kl', 'lr'], rows)


def cmd_train(args: argparse.Namespace) -> None:
    state: Optional[mjplab.vi.TrainState] = None
    if args.resume:
        model, state = mjplab.vi.load_model(args.resume)
        config = model.config
        if args.epochs is not None:
            model.config = config = config.replace('train', epochs=args.epochs)
        _LOGGER.info('resuming %r at epoch %d', args.resume, state.epoch if state else 0)

    else:
        config = mjplab.config.load(args.config)
        if args.epochs is not None:
            config = config.replace('train', epochs=args.epochs)

    series, _ = pair_splits(_load_series(args, config))
    if not args.resume:
        time_map = mjplab.vi.TimeMap.fit(series, config.data.normalize_values)
        model = mjplab.vi.Model(config, series[0].dim, time_map)

    state = mjplab.vi.train(
        model, series, state, on_epoch=lambda s: _save_progress(args.out, model, s))
    if not state.history:
        _save_progress(args.out, model, state)
    _LOGGER.info('wrote %r after %d epochs', args.out, state.epoch)


def _emit(report: Any, out: Optional[str]) -> None:
    if out:
        mjplab.readwrite.write_json(out, report)
    else:
        json.dump(report, sys.stdout, indent=2, sort_keys=True)
        sys.stdout.write('\n')


def cmd_evaluate(args: argparse.Namespace) -> None:
    model, _ = mjplab.vi.load_model(args.ckpt)
    observed, future = pair_splits(_load_series(args, model.config))
    report = mjplab.predict.evaluate(
        model, observed, future, args.mode, seed=args.seed, threads=args.threads)
    _emit(report, args.out)


def future_times(series: TimeSeries, horizon: float, steps: int) -> np.ndarray:
    """Equidistant times from the last observation to ``horizon`` past it."""
    t_last = float(series.times[-1])
    if horizon <= 0:
        return np.array([t_last])
    return t_last + np.linspace(0.0, horizon, steps)


def cmd_predict(args: argparse.Namespace) -> None:
    model, _ = mjplab.vi.load_model(args.ckpt)
    observed, future = pair_splits(_load_series(args, model.config))
    if future is not None and args.horizon is None:
        times = [f.times for f in future]
    else:
        times = [future_times(s, args.horizon or 0.0, args.steps) for s in observed]

    predictions = mjplab.predict.predict_dataset(
        model, observed, times, args.mode, args.samples, seed=args.seed, threads=args.threads)

    dim = observed[0].dim
    header = ['series', 'time'] + ['v%d' % d for d in range(dim)]
    rows = []
    for i, (t, values) in enumerate(zip(times, predictions)):
        for tk, vk in zip(t, values):
            rows.append([i, float(tk)] + [float(v) for v in vk])
    mjplab.readwrite.write_csv(args.out, header, rows)
    _LOGGER.info('wrote %d predictions to %r', len(rows), args.out)


def rates_from_file(path: str) -> mjplab.core.RateMatrix:
    """Read ``{"k": K, "rates": [...]}`` or ``{"process": "dfr", "params": {...}}``."""
    raw = mjplab.readwrite.read_json(path)
    if not isinstance(raw, dict):
        raise DataError('%r must hold a JSON object' % path)
    if 'rates' in raw:
        try:
            k = int(raw['k'])
        except (KeyError, TypeError, ValueError):
            raise DataError('%r needs an integer "k" next to "rates"' % path)
        return mjplab.core.rate_matrix_from_rates(raw['rates'], k)
    if raw.get('process') == mjplab.simulate.DFR:
        f, _ = mjplab.simulate.dfr_process(**raw.get('params', {}))
        return f
    if raw.get('process') == mjplab.simulate.HYBRID:
        return mjplab.simulate.hybrid_generator()
    raise DataError('%r has neither "rates" nor a known "process"' % path)


def cmd_analyze(args: argparse.Namespace) -> None:
    if args.rates_file:
        report = mjplab.analysis.summarize(rates_from_file(args.rates_file))
    else:
        model, _ = mjplab.vi.load_model(args.ckpt)
        report = mjplab.vi.prior_summary(model, args.samples, args.seed)
    _LOGGER.info('analysis finished')
    _emit(report, args.out)


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument('--loglevel', default=logging.INFO)
    parser.add_argument(
        '--threads', type=int, help='Worker pool size, overrides %s' % mjplab.config.THREADS_ENV)
    parser.add_argument('--seed', type=int, default=0)


def _add_data(parser: argparse.ArgumentParser) -> None:
    parser.add_argument('--data', required=True, help='JSON-lines dataset or CSV recording')
    parser.add_argument(
        '--csv-time-col', help='Time column of a CSV recording, overrides [data] csv_time_col')
    parser.add_argument('--csv-series-col', help='Column grouping CSV rows into series')
    parser.add_argument(
        '--fmtparams',
        type=str,
        nargs='*',
        help='Additional params to pass to the CSV reader, in key=value format',
    )


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='mjplab', description='Neural variational inference for Markov jump processes')
    subparsers = parser.add_subparsers(dest='command')
    subparsers.required = True

    generate = subparsers.add_parser('generate', help='Simulate a synthetic dataset')
    generate.add_argument('--process', required=True, choices=mjplab.simulate.PROCESSES)
    generate.add_argument('--grid', default=mjplab.simulate.GridKind.PER_SERIES_IRREGULAR.value,
                          choices=[g.value for g in mjplab.simulate.GridKind])
    generate.add_argument('--n', type=int, default=500, help='Number of series')
    generate.add_argument('--obs', type=int, default=50, help='Observations per series')
    generate.add_argument('--out', required=True)
    generate.add_argument('--split', action='store_true', help='Write train/validation/test files')
    generate.add_argument(
        '--predict', action='store_true', help='Add a future continuation of every series')
    generate.add_argument(
        '--single', action='store_true', help='The single-trajectory LV experiment')
    _add_common(generate)
    generate.set_defaults(func=cmd_generate)

    train = subparsers.add_parser('train', help='Fit a model')
    train.add_argument('--config', help='TOML config; defaults apply when omitted')
    _add_data(train)
    train.add_argument('--out', required=True, help='Checkpoint manifest to write every epoch')
    train.add_argument('--resume', help='Checkpoint to continue from')
    train.add_argument('--epochs', type=int, help='Override [train] epochs')
    _add_common(train)
    train.set_defaults(func=cmd_train)

    evaluate = subparsers.add_parser('evaluate', help='Score a model on a dataset')
    evaluate.add_argument('--ckpt', required=True)
    _add_data(evaluate)
    evaluate.add_argument('--mode', default=mjplab.predict.MASTER,
                          choices=(mjplab.predict.MASTER, mjplab.predict.GILLESPIE))
    evaluate.add_argument('--out', help='Metrics JSON; stdout when omitted')
    _add_common(evaluate)
    evaluate.set_defaults(func=cmd_evaluate)

    predict = subparsers.add_parser('predict', help='Forecast past the observations')
    predict.add_argument('--ckpt', required=True)
    _add_data(predict)
    predict.add_argument(
        '--horizon', type=float, help='How far past the last observation to forecast')
    predict.add_argument('--steps', type=int, default=10, help='Forecast times within the horizon')
    predict.add_argument('--mode', default=mjplab.predict.MASTER,
                         choices=(mjplab.predict.MASTER, mjplab.predict.GILLESPIE))
    predict.add_argument('--samples', type=int, help='Prior paths averaged in gillespie mode')
    predict.add_argument('--out', required=True, help='CSV of (series, time, value per dimension)')
    _add_common(predict)
    predict.set_defaults(func=cmd_predict)

    analyze = subparsers.add_parser('analyze', help='Stationary distribution, timescales and MFPT')
    source = analyze.add_mutually_exclusive_group(required=True)
    source.add_argument('--ckpt')
    source.add_argument('--rates-file')
    analyze.add_argument('--samples', type=int, default=1000, help='Prior draws')
    analyze.add_argument('--out', help='JSON report; stdout when omitted')
    _add_common(analyze)
    analyze.set_defaults(func=cmd_analyze)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)

    if getattr(args, 'steps', 1) < 1:
        parser.error('--steps must be positive')
    if args.threads is not None:
        if args.threads < 1:
            parser.error('--threads must be positive')
        os.environ[mjplab.config.THREADS_ENV] = str(args.threads)

    logging.basicConfig(level=args.loglevel)

    try:
        args.func(args)
    except (ValueError, OSError) as err:
        _LOGGER.error('%s: %s', type(err).__name__, err)
        return EXIT_DATA
    except KeyError as err:
        _LOGGER.error('missing key %s', err)
        return EXIT_DATA
    except (NumericError, AssertionError) as err:
        _LOGGER.error('%s: %s', type(err).__name__, err)
        return EXIT_NUMERIC
    return 0


if __name__ == '__main__':
    sys.exit(main())
