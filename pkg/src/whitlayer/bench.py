"""Banded versus dense solver benchmark.

Each timed cell runs one training step of the smoothing layer on a batch of
random irregular series: the forward solve of ``(W + D^T diag(lam) D) z = W x``
and the backward solve producing ``dL/dx`` and ``dL/dlam``. The banded path
uses the package solver; the dense path assembles the same systems as full
``T x T`` matrices and solves them with LAPACK through ``numpy.linalg.solve``.

Before any timing is accepted both paths are run once and their outputs are
compared; a mismatch invalidates the benchmark. Dense cells whose estimated
memory exceeds the cap are reported as ``out_of_memory`` without running.

On a CPU the banded cost grows linearly with the batch size. Accelerators in
a latency-bound regime can show nearly flat times instead; no attempt is made
to reproduce that profile here.
"""

import csv
import time
import tracemalloc
from dataclasses import asdict, dataclass
from functools import partial

import numpy as np

from . import _backend, bandmat
from .autodiff import vjp
from .diffop import apply, build_diffop
from .errors import DomainError
from .smoother import TimeSeriesBatch, build_omega, smooth_hetero

BENCH_COLUMNS = ('solver', 'order', 'batch_size', 'wall_time_s', 'peak_bytes', 'status',
                 'T', 'channels', 'repeats', 'threads', 'backend')
DEFAULT_BATCH_SIZES = (16, 64, 256, 1024, 4096)
DEFAULT_MEMORY_CAP = 2 * 1024**3
AGREEMENT_TOL = 1e-8


class BenchmarkMismatch(RuntimeError):
    """Banded and dense outputs disagree; timings would be meaningless."""


@dataclass(frozen=True)
class BenchRow:
    """One cell of the benchmark table; ``wall_time_s`` is None when not run."""

    solver: str
    order: int
    batch_size: int
    wall_time_s: float
    peak_bytes: int
    status: str
    T: int
    channels: int
    repeats: int
    threads: int
    backend: str


def make_problem(T, channels, batch_size, order, seed=0, observed=0.8):
    """Random irregular batch, operator, weights and upstream gradient.

    Times have gaps drawn from 1 to 10 days; roughly ``observed`` of the slots
    are observed and weights are log-uniform in ``[1, 1e3]``.
    """
    rng = np.random.default_rng(seed)
    gaps = rng.integers(1, 11, size=(batch_size, T)).astype(np.float64)
    times = np.cumsum(gaps, axis=1)
    values = rng.standard_normal((batch_size, channels, T))
    mask = (rng.random((batch_size, T)) < observed).astype(np.float64)
    mask[:, : order + 1] = 1.0
    batch = TimeSeriesBatch(times, values, mask)
    op = build_diffop(times, order)
    lam = 10.0 ** rng.uniform(0.0, 3.0, size=(batch_size, op.n_rows))
    g_bar = rng.standard_normal(values.shape)
    return batch, op, lam, g_bar


def banded_step(batch, op, lam, g_bar, refine=False):
    """Forward and backward pass with the banded solver; returns (z, x_bar, lam_bar)."""
    ctx = smooth_hetero(batch, op, lam, refine=refine)
    cot = vjp(ctx, g_bar)
    return ctx.z, cot.x_bar, cot.lam_bar


def dense_step(batch, op, lam, g_bar):
    """Same step through dense ``T x T`` systems and a dense LU solve."""
    omega = bandmat.band_to_dense(build_omega(batch.mask, op, lam))
    rhs = np.concatenate([batch.mask[:, None, :] * batch.values, g_bar], axis=1)
    sol = np.linalg.solve(omega, np.swapaxes(rhs, 1, 2))
    del omega
    sol = np.swapaxes(sol, 1, 2)
    z, u = sol[:, : batch.n_channels], sol[:, batch.n_channels:]
    x_bar = batch.mask[:, None, :] * u
    lam_bar = -np.einsum('bcr,bcr->br', apply(op, u), apply(op, z))
    return z, x_bar, lam_bar


STEPS = {'banded': banded_step, 'dense': dense_step}


def dense_bytes_estimate(T, channels, batch_size):
    """Bytes held by the dense path: the assembled matrix, LAPACK's copy and the right-hand sides."""
    return batch_size * (2 * T * T + 6 * channels * T) * 8


def peak_bytes(fn, *args):
    """Peak bytes allocated (tracked by tracemalloc) while calling ``fn``."""
    tracemalloc.start()
    try:
        tracemalloc.reset_peak()
        base = tracemalloc.get_traced_memory()[0]
        fn(*args)
        return tracemalloc.get_traced_memory()[1] - base
    finally:
        tracemalloc.stop()


def time_step(fn, args, repeats):
    """Mean wall time of ``fn(*args)`` over ``repeats`` runs."""
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - start)
    return float(np.mean(times))


def check_agreement(banded, dense, tol=AGREEMENT_TOL):
    """Relative max difference of ``z`` between solvers; raises above ``tol``."""
    zb, zd = banded[0], dense[0]
    err = float(np.abs(zb - zd).max() / max(1.0, float(np.abs(zd).max())))
    if not err <= tol:
        raise BenchmarkMismatch(f'banded and dense solutions differ by {err:.3g} (> {tol:g})')
    return err


def run_bench(T=350, channels=10, orders=(2, 3, 4), batch_sizes=DEFAULT_BATCH_SIZES, repeats=5,
              memory_cap=DEFAULT_MEMORY_CAP, solvers=('banded', 'dense'), seed=0,
              measure_memory=True, progress=None):
    """Time the training step for every (solver, order, batch size) cell.

    Parameters
    ----------
    memory_cap : int
        Dense cells whose estimated footprint exceeds this many bytes are
        reported as ``out_of_memory`` and not run.
    progress : callable, optional
        Called with each finished :class:`BenchRow`.

    Returns
    -------
    list of BenchRow

    Raises
    ------
    BenchmarkMismatch
        If banded and dense solutions of a cell differ by more than 1e-8.

    """
    if T < 2 or channels < 1 or repeats < 1:
        raise DomainError('T must be at least 2, channels and repeats at least 1')
    rows = []
    meta = dict(T=int(T), channels=int(channels), repeats=int(repeats),
                threads=_backend.get_num_threads(), backend=_backend.get_backend())
    for order in orders:
        for bs in batch_sizes:
            args = make_problem(T, channels, bs, order, seed)
            dense_fits = dense_bytes_estimate(T, channels, bs) <= memory_cap
            results = {}
            if 'dense' in solvers and dense_fits:
                results['dense'] = dense_step(*args)
            if 'banded' in solvers:
                results['banded'] = banded_step(*args)
            if len(results) == 2:
                check_agreement(results['banded'], results['dense'])
            results.clear()
            for solver in solvers:
                if solver == 'dense' and not dense_fits:
                    row = BenchRow(solver, order, bs, None, None, 'out_of_memory', **meta)
                else:
                    fn = STEPS[solver]
                    peak = peak_bytes(fn, *args) if measure_memory else None
                    row = BenchRow(solver, order, bs, time_step(fn, args, repeats), peak, 'ok', **meta)
                rows.append(row)
                if progress is not None:
                    progress(row)
    return rows


def run_backend_bench(T=350, channels=10, orders=(2, 3, 4), batch_sizes=(64, 256, 1024), repeats=5,
                      seed=0, progress=None, refine=False):
    """Time the banded step under each available kernel backend.

    Rows carry ``solver='banded'`` (``'banded_refined'`` with ``refine``) and
    the backend name. Outputs of all backends are compared before timing.
    """
    solver = 'banded_refined' if refine else 'banded'
    step = partial(banded_step, refine=refine)
    rows = []
    previous = _backend.get_backend()
    try:
        for order in orders:
            for bs in batch_sizes:
                args = make_problem(T, channels, bs, order, seed)
                ref = None
                for name in _backend.available_backends():
                    _backend.set_backend(name)
                    out = step(*args)
                    if ref is None:
                        ref = out
                    else:
                        check_agreement(out, ref)
                for name in _backend.available_backends():
                    _backend.set_backend(name)
                    row = BenchRow(solver, order, bs, time_step(step, args, repeats), None,
                                   'ok', int(T), int(channels), int(repeats),
                                   _backend.get_num_threads(), name)
                    rows.append(row)
                    if progress is not None:
                        progress(row)
    finally:
        _backend.set_backend(previous)
    return rows


def memory_slope(solver, Ts=(512, 2048, 8192), channels=10, order=2, seed=0):
    """Log-log slope of peak bytes against ``T`` for a single series.

    Returns
    -------
    slope : float
    peaks : list of int

    """
    peaks = [peak_bytes(STEPS[solver], *make_problem(T, channels, 1, order, seed)) for T in Ts]
    slope = np.polyfit(np.log(Ts), np.log(peaks), 1)[0]
    return float(slope), peaks


def write_bench_csv(path, rows):
    with open(path, 'w', newline='', encoding='utf-8') as fh:
        writer = csv.DictWriter(fh, fieldnames=BENCH_COLUMNS)
        writer.writeheader()
        for row in rows:
            rec = asdict(row)
            rec['wall_time_s'] = '' if row.wall_time_s is None else repr(row.wall_time_s)
            rec['peak_bytes'] = '' if row.peak_bytes is None else row.peak_bytes
            writer.writerow(rec)


def read_bench_csv(path):
    out = []
    with open(path, newline='', encoding='utf-8') as fh:
        for rec in csv.DictReader(fh):
            out.append(BenchRow(
                rec['solver'], int(rec['order']), int(rec['batch_size']),
                float(rec['wall_time_s']) if rec['wall_time_s'] else None,
                int(rec['peak_bytes']) if rec['peak_bytes'] else None,
                rec['status'], int(rec['T']), int(rec['channels']), int(rec['repeats']),
                int(rec['threads']), rec['backend'],
            ))
    return out


def format_table(rows):
    """Aligned text table: one line per (solver, order), one column per batch size.

    Times are in seconds; an empty-set sign marks cells that ran out of memory.
    """
    sizes = sorted({r.batch_size for r in rows})
    keys = list(dict.fromkeys((r.solver, r.backend, r.order) for r in rows))
    cells = {(r.solver, r.backend, r.order, r.batch_size): r for r in rows}
    backends = {r.backend for r in rows}
    header = ['solver', 'order'] + [str(s) for s in sizes]
    lines = [header]
    for solver, backend, order in keys:
        label = solver if len(backends) == 1 else f'{solver}[{backend}]'
        line = [label, str(order)]
        for s in sizes:
            r = cells.get((solver, backend, order, s))
            if r is None:
                line.append('')
            elif r.status == 'out_of_memory':
                line.append('∅')
            else:
                line.append(f'{r.wall_time_s:.4f}')
        lines.append(line)
    widths = [max(len(line[i]) for line in lines) for i in range(len(header))]
    return '\n'.join('  '.join(cell.rjust(w) for cell, w in zip(line, widths)) for line in lines)
