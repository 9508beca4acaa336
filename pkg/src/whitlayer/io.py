"""Headered CSV files for series, penalty weights and loss traces.

Series files hold one row per sample::

    series_id,channel,time_days,value,valid_flag

Rows of one ``(series_id, channel)`` pair must appear with strictly
increasing ``time_days``. A time slot of a series is observed only when every
channel has a row at that time with ``valid_flag`` 1; missing rows are
unobserved. Series are padded to a common length with mask-0 slots.
"""

import csv
import math
from collections import OrderedDict

import numpy as np

from .errors import DataFormatError
from .smoother import TimeSeriesBatch, pad_times

SERIES_COLUMNS = ('series_id', 'channel', 'time_days', 'value', 'valid_flag')
LAMBDA_COLUMNS = ('series_id', 'lambda')
TRACE_COLUMNS = ('step', 'loss')


def _check_header(reader, expected, path):
    header = reader.fieldnames
    if header is None:
        raise DataFormatError(f'{path} is empty', row=1)
    missing = [c for c in expected if c not in header]
    if missing:
        raise DataFormatError(f'{path} lacks column(s) {", ".join(missing)}', row=1)


def _number(text, column, row):
    try:
        value = float(text)
    except (TypeError, ValueError):
        raise DataFormatError(f'{column} {text!r} is not numeric', row=row) from None
    if not math.isfinite(value):
        raise DataFormatError(f'{column} {text!r} is not finite', row=row)
    return value


def load_series(path):
    """Read a series file into a padded :class:`TimeSeriesBatch`.

    Series and channels keep their order of first appearance; their labels
    are stored in ``series_ids`` and ``channels``. Times stay in days.

    Raises
    ------
    DataFormatError
        On a missing column, a non-numeric value, a ``valid_flag`` other than
        0/1, or a time that repeats or decreases within a (series, channel)
        pair. The message names the offending line.

    """
    samples = OrderedDict()
    channels = OrderedDict()
    last = {}
    with open(path, newline='', encoding='utf-8') as fh:
        reader = csv.DictReader(fh)
        _check_header(reader, SERIES_COLUMNS, path)
        for row, rec in enumerate(reader, start=2):
            sid, chan = rec['series_id'], rec['channel']
            if sid is None or chan is None:
                raise DataFormatError('too few fields', row=row)
            t = _number(rec['time_days'], 'time_days', row)
            value = _number(rec['value'], 'value', row)
            flag = rec['valid_flag']
            if flag not in ('0', '1'):
                raise DataFormatError(f'valid_flag must be 0 or 1, got {flag!r}', row=row)
            prev = last.get((sid, chan))
            if prev is not None and t == prev:
                raise DataFormatError(
                    f'duplicate sample for series {sid!r}, channel {chan!r} at time {t:g}', row=row)
            if prev is not None and t < prev:
                raise DataFormatError(
                    f'time {t:g} decreases after {prev:g} for series {sid!r}, channel {chan!r}',
                    row=row)
            last[sid, chan] = t
            channels.setdefault(chan, len(channels))
            samples.setdefault(sid, []).append((chan, t, value, flag == '1'))
    if not samples:
        raise DataFormatError(f'{path} holds no samples')

    n_chan = len(channels)
    grids = {sid: np.unique([s[1] for s in recs]) for sid, recs in samples.items()}
    length = max(g.size for g in grids.values())
    nb = len(samples)
    times = np.empty((nb, length))
    values = np.zeros((nb, n_chan, length))
    valid = np.zeros((nb, n_chan, length), dtype=bool)
    lengths = np.empty(nb, dtype=np.int64)
    for b, (sid, recs) in enumerate(samples.items()):
        grid = grids[sid]
        times[b] = pad_times(grid, length)
        lengths[b] = grid.size
        for chan, t, value, ok in recs:
            slot = np.searchsorted(grid, t)
            values[b, channels[chan], slot] = value
            valid[b, channels[chan], slot] = ok
    mask = valid.all(axis=1).astype(np.float64)
    return TimeSeriesBatch(times, values, mask, lengths, tuple(samples), tuple(channels))


def _labels(batch):
    ids = batch.series_ids or tuple(str(b) for b in range(batch.n_series))
    chans = batch.channels or tuple(str(c) for c in range(batch.n_channels))
    return ids, chans


def save_series(path, batch, valid=None):
    """Write ``batch`` as a series file, skipping padding slots.

    Parameters
    ----------
    valid : array-like, shape (batch, T), optional
        0/1 flags to write; defaults to the batch mask. Pass ones to mark
        every written sample valid (smoothed output, for instance).

    Floats are written with ``repr`` so a save/load round trip is exact.
    """
    ids, chans = _labels(batch)
    flags = batch.mask if valid is None else np.asarray(valid)
    flags = np.broadcast_to(flags, batch.mask.shape)
    with open(path, 'w', newline='', encoding='utf-8') as fh:
        writer = csv.writer(fh)
        writer.writerow(SERIES_COLUMNS)
        for b in range(batch.n_series):
            for c in range(batch.n_channels):
                for t in range(int(batch.lengths[b])):
                    writer.writerow((ids[b], chans[c], repr(float(batch.times[b, t])),
                                     repr(float(batch.values[b, c, t])), int(flags[b, t])))


def write_smoothed(path, series_ids, channels, times, values):
    """Write smoothed values on per-series grids, every sample flagged valid.

    ``times`` is a list of 1D arrays and ``values`` a list of matching
    ``(channels, Q_b)`` arrays, one per series.
    """
    with open(path, 'w', newline='', encoding='utf-8') as fh:
        writer = csv.writer(fh)
        writer.writerow(SERIES_COLUMNS)
        for sid, grid, vals in zip(series_ids, times, values):
            for c, chan in enumerate(channels):
                for t, v in zip(grid, vals[c]):
                    writer.writerow((sid, chan, repr(float(t)), repr(float(v)), 1))


def load_lambdas(path, series_ids):
    """Read one penalty weight per series from a ``series_id,lambda`` file.

    Returns
    -------
    numpy.ndarray, shape (len(series_ids),)

    Raises
    ------
    DataFormatError
        On duplicates, non-numeric weights or series without a weight.

    """
    found = {}
    with open(path, newline='', encoding='utf-8') as fh:
        reader = csv.DictReader(fh)
        _check_header(reader, LAMBDA_COLUMNS, path)
        for row, rec in enumerate(reader, start=2):
            sid = rec['series_id']
            if sid in found:
                raise DataFormatError(f'duplicate weight for series {sid!r}', row=row)
            found[sid] = _number(rec['lambda'], 'lambda', row)
    missing = [s for s in series_ids if s not in found]
    if missing:
        raise DataFormatError(f'{path} has no weight for series {", ".join(map(repr, missing))}')
    return np.array([found[s] for s in series_ids])


def write_trace(path, trace):
    """Write a loss trace as ``step,loss`` rows, losses in ``repr`` form."""
    with open(path, 'w', newline='', encoding='utf-8') as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACE_COLUMNS)
        for step, loss in enumerate(trace):
            writer.writerow((step, repr(float(loss))))


def read_trace(path):
    with open(path, newline='', encoding='utf-8') as fh:
        return np.array([float(rec['loss']) for rec in csv.DictReader(fh)])
