"""Reading and writing datasets, checkpoints and reports.

Every file goes through :func:`open`, so local paths, ``.gz`` files and S3
URLs all work the same way.

Datasets are JSON-lines, one series per line::

    {"times": [0.1, 0.5], "values": [[1.0], [2.0]], "states": [0, 1], "meta": {}}

``states`` is optional.  Checkpoints are a JSON manifest plus a sibling
``.bin`` blob of little-endian float64 values in manifest order.
"""
import csv
import json
import logging
import os

from typing import (
    Any,
    Dict,
    IO,
    Iterator,
    List,
    Optional,
    Sequence,
    Tuple,
)

import boto3  # type: ignore
import botocore.config  # type: ignore
import numpy as np
import smart_open  # type: ignore

import mjplab.readwrite
from mjplab.core import TimeSeries
from mjplab.errors import (
    DataError,
    MalformedRecord,
    SchemaMismatch,
)

_LOGGER = logging.getLogger(__name__)
ENCODING = 'utf-8'

JSONL = 'jsonl'
CSV = 'csv'

SCHEMA_VERSION = 1
BLOB_SUFFIX = '.bin'
BLOB_DTYPE = '<f8'


def sniff_format(path: str) -> str:
    if '.csv' in path:
        return CSV
    if '.jsonl' in path or '.json' in path:
        return JSONL
    raise DataError('unknown dataset format: %r' % path)


def _series_from_record(record: Any, path: str, linenum: int) -> TimeSeries:
    if not isinstance(record, dict):
        raise MalformedRecord(path, linenum, 'expected a JSON object')
    for key in ('times', 'values'):
        if key not in record:
            raise MalformedRecord(path, linenum, 'missing %r' % key)
    try:
        return TimeSeries(
            times=record['times'],
            values=record['values'],
            true_states=record.get('states'),
            meta=dict(record.get('meta') or {}),
        )
    except (DataError, ValueError, TypeError) as err:
        raise MalformedRecord(path, linenum, str(err))


def iter_dataset(path: str, lenient: bool = False) -> Iterator[TimeSeries]:
    """Yield the series stored in a JSON-lines dataset.

    :param lenient: Log and skip malformed lines instead of raising.
    :raises MalformedRecord: naming the offending line.
    """
    dim = None
    with mjplab.readwrite.open(path, 'rb') as fin:
        for linenum, line in enumerate(fin, 1):
            if not line.strip():
                continue
            try:
                try:
                    record = json.loads(line)
                except ValueError as err:
                    raise MalformedRecord(path, linenum, 'invalid JSON: %s' % err)
                series = _series_from_record(record, path, linenum)
                if dim is None:
                    dim = series.dim
                elif series.dim != dim:
                    raise MalformedRecord(
                        path, linenum, 'value dimension %d, expected %d' % (series.dim, dim))
            except MalformedRecord as err:
                if not lenient:
                    raise
                _LOGGER.error('skipping %s', err)
                continue
            yield series


def read_dataset(path: str, lenient: bool = False) -> List[TimeSeries]:
    series = list(iter_dataset(path, lenient=lenient))
    if not series:
        raise DataError('%r contains no series' % path)
    _LOGGER.info('read %d series from %r', len(series), path)
    return series


def series_to_record(series: TimeSeries) -> Dict[str, Any]:
    record: Dict[str, Any] = {
        'times': series.times.tolist(),
        'values': series.values.tolist(),
    }
    if series.true_states is not None:
        record['states'] = series.true_states.tolist()
    record['meta'] = series.meta
    return record


def dump(record: Any, stream: IO[bytes]) -> None:
    stream.write(json.dumps(record, sort_keys=True).encode(ENCODING) + b'\n')


def write_dataset(path: str, series: Sequence[TimeSeries]) -> None:
    with mjplab.readwrite.open(path, 'wb') as fout:
        for s in series:
            dump(series_to_record(s), fout)
    _LOGGER.info('wrote %d series to %r', len(series), path)


def parse_fmtparams(params: Optional[List[str]]) -> Dict[str, str]:
    """Turn 'key=value' command-line pairs into a dict."""
    if not params:
        return {}
    fmtparams: Dict[str, str] = {}
    for pair in params:
        if '=' not in pair:
            raise DataError('expected key=value, got %r' % pair)
        key, value = pair.split('=', 1)
        fmtparams[key] = value
    return fmtparams


def csv_fmtparams(fmtparams: Optional[Dict[str, str]]) -> Dict[str, Any]:
    """Keep the ``csv`` module options we understand, with proper types."""
    if not fmtparams:
        return {}

    types = {
        'delimiter': str,
        'escapechar': str,
        'quotechar': str,
        'skipinitialspace': bool,
    }
    scrubbed: Dict[str, Any] = {}
    for key, value in fmtparams.items():
        try:
            t = types[key]
        except KeyError:
            _LOGGER.error('ignoring unknown fmtparams key: %r', key)
        else:
            if t == bool and not isinstance(value, bool):
                scrubbed[key] = str(value).lower() == 'true'
            else:
                scrubbed[key] = t(value)
    return scrubbed


def read_csv_series(
    path: str,
    time_col: str = 't',
    series_col: Optional[str] = None,
    fmtparams: Optional[Dict[str, str]] = None,
) -> List[TimeSeries]:
    """Ingest a generic CSV recording.

    Every column other than the time (and optional series id) column is an
    observed dimension.  Rows are grouped by ``series_col`` when given.
    """
    with mjplab.readwrite.open(path, 'r') as fin:
        reader = csv.reader(fin, **csv_fmtparams(fmtparams))
        try:
            header = next(reader)
        except StopIteration:
            raise DataError('%r is empty' % path)
        if time_col not in header:
            raise DataError('%r has no time column %r (columns: %r)' % (path, time_col, header))
        if series_col is not None and series_col not in header:
            raise DataError('%r has no series column %r' % (path, series_col))

        time_index = header.index(time_col)
        series_index = header.index(series_col) if series_col else None
        value_indices = [i for i, name in enumerate(header) if i not in (time_index, series_index)]
        if not value_indices:
            raise DataError('%r has no value columns' % path)

        groups: Dict[str, List[Tuple[float, List[float]]]] = {}
        for linenum, row in enumerate(reader, 2):
            if not row:
                continue
            if len(row) != len(header):
                raise MalformedRecord(
                    path, linenum, '%d fields, expected %d' % (len(row), len(header)))
            try:
                t = float(row[time_index])
                values = [float(row[i]) for i in value_indices]
            except ValueError as err:
                raise MalformedRecord(path, linenum, str(err))
            key = row[series_index] if series_index is not None else ''
            groups.setdefault(key, []).append((t, values))

    result = []
    names = [header[i] for i in value_indices]
    for key, rows in groups.items():
        times = [t for t, _ in rows]
        values = [v for _, v in rows]
        meta = {'source': path, 'columns': names}
        if series_col:
            meta['series'] = key
        try:
            result.append(TimeSeries(times, values, meta=meta))
        except (DataError, ValueError) as err:
            raise DataError('%s: series %r: %s' % (path, key, err))
    _LOGGER.info('ingested %d series with %d dimensions from %r', len(result), len(names), path)
    return result


def load_series(
    path: str,
    time_col: str = 't',
    series_col: Optional[str] = None,
    fmtparams: Optional[Dict[str, str]] = None,
) -> List[TimeSeries]:
    """Read a dataset in whatever format its name suggests."""
    if sniff_format(path) == CSV:
        return read_csv_series(path, time_col=time_col, series_col=series_col, fmtparams=fmtparams)
    return read_dataset(path)


def write_json(path: str, obj: Any) -> None:
    with mjplab.readwrite.open(path, 'w') as fout:
        json.dump(obj, fout, indent=2, sort_keys=True)
        fout.write('\n')


def read_json(path: str) -> Any:
    with mjplab.readwrite.open(path, 'rb') as fin:
        try:
            return json.loads(fin.read())
        except ValueError as err:
            raise DataError('%r is not valid JSON: %s' % (path, err))


def write_csv(path: str, header: Sequence[str], rows: Sequence[Sequence[Any]]) -> None:
    with mjplab.readwrite.open(path, 'w') as fout:
        writer = csv.writer(fout, lineterminator='\n')
        writer.writerow(header)
        for row in rows:
            writer.writerow(row)


def blob_path(manifest_path: str) -> str:
    return manifest_path + BLOB_SUFFIX


def save_checkpoint(
    path: str,
    manifest: Dict[str, Any],
    arrays: Sequence[Tuple[str, np.ndarray]],
) -> None:
    """Write ``manifest`` plus the float64 blob of ``arrays``.

    The manifest gains ``schema_version`` and a ``parameters`` list of names
    and shapes in blob order.
    """
    manifest = dict(manifest)
    manifest['schema_version'] = SCHEMA_VERSION
    manifest['parameters'] = [{'name': name, 'shape': list(np.shape(a))} for name, a in arrays]
    if arrays:
        flat = np.concatenate([np.asarray(a, dtype=np.float64).reshape(-1) for _, a in arrays])
    else:
        flat = np.zeros(0)

    with mjplab.readwrite.open(blob_path(path), 'wb') as fout:
        fout.write(flat.astype(BLOB_DTYPE).tobytes())
    write_json(path, manifest)
    _LOGGER.info('wrote checkpoint %r (%d values)', path, flat.size)


def load_checkpoint(path: str) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    """Inverse of :func:`save_checkpoint`.

    :raises SchemaMismatch: for another schema version or a blob whose length
      disagrees with the manifest.
    """
    manifest = read_json(path)
    version = manifest.get('schema_version')
    if version != SCHEMA_VERSION:
        raise SchemaMismatch(
            '%r has schema version %r, expected %r' % (path, version, SCHEMA_VERSION))

    with mjplab.readwrite.open(blob_path(path), 'rb') as fin:
        flat = np.frombuffer(fin.read(), dtype=BLOB_DTYPE).astype(np.float64)

    expected = sum(int(np.prod(p['shape'])) for p in manifest['parameters'])
    if flat.size != expected:
        raise SchemaMismatch('blob holds %d values, manifest expects %d' % (flat.size, expected))

    arrays = {}
    offset = 0
    for p in manifest['parameters']:
        size = int(np.prod(p['shape']))
        arrays[p['name']] = flat[offset:offset + size].reshape(p['shape']).copy()
        offset += size
    return manifest, arrays


def _inject_parameters(endpoint_url, kwargs):
    #
    # transport_params may be set to None or absent altogether
    #
    try:
        transport_params = kwargs['transport_params']
        transport_params.keys()
    except (AttributeError, KeyError, TypeError):
        transport_params = kwargs['transport_params'] = {}

    if transport_params.get('client'):
        return

    transport_params['client'] = boto3.client(
        's3',
        endpoint_url=endpoint_url,
        config=botocore.config.Config(retries={'mode': 'standard', 'max_attempts': 10}),
    )


def open(*args, **kwargs):
    """Wraps smart_open and injects an S3 client for ``AWS_ENDPOINT_URL``."""
    try:
        endpoint_url = os.environ['AWS_ENDPOINT_URL']
    except KeyError:
        pass
    else:
        _inject_parameters(endpoint_url, kwargs)

    return smart_open.open(*args, **kwargs)
