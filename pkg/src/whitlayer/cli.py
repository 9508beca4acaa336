"""Command-line interface: ``whitlayer {smooth,fit,bench,synth}``.

Exit codes: 0 success, 1 usage error, 2 data error (malformed or
out-of-domain input), 3 numerical error (failed factorization, divergence,
solver mismatch).
"""

import argparse
import csv
import sys

import numpy as np

from . import _backend, bench, io
from .diffop import build_diffop
from .errors import (DataFormatError, DivergenceError, DomainError, NotPositiveDefinite,
                     StructuralError)
from .experiments import noisy_window_experiment
from .harness import evaluate, make_masking, masked_loss, standardize, synth_sits, write_reports
from .regfit import (KINDS, LossSpec, OptimizerSpec, emit_lambda, fit, load_checkpoint,
                     network_model, save_checkpoint, scalar_model, vector_model)
from .smoother import interpolate, regular_grid, smooth_hetero

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3

DESK_DEFAULTS = dict(steps=200, lr=0.1, mask_fraction=0.1)
LARGE_SCALE_NOTE = ('large-scale training used Adam with lr 1e-4 on batches of 4096 series '
                    'for 10 epochs')


class UsageError(Exception):
    pass


class NumericalError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f'{self.prog}: error: {message}\n')


def _series_name(batch, index):
    if index is None:
        return '?'
    if batch is not None and batch.series_ids is not None:
        return repr(batch.series_ids[index])
    return str(index)


def _check_observed(batch, order):
    counts = batch.observed_counts()
    for b in np.flatnonzero(counts < order):
        raise DomainError(f'series {_series_name(batch, b)} has {int(counts[b])} valid samples; '
                          f'order {order} needs at least {order}')


def _smoothing_weights(args, batch, op):
    if args.lam is not None:
        return np.full((batch.n_series, op.n_rows), args.lam)
    if args.lambda_file is not None:
        lam = io.load_lambdas(args.lambda_file, batch.series_ids)
        return np.repeat(lam[:, None], op.n_rows, axis=1)
    model = load_checkpoint(args.checkpoint)
    return emit_lambda(model, batch)


def cmd_smooth(args):
    batch = io.load_series(args.input)
    order = args.order
    if args.checkpoint is not None:
        ckpt_order = load_checkpoint(args.checkpoint).order
        if order is not None and order != ckpt_order:
            raise UsageError(f'--order {order} conflicts with the checkpoint order {ckpt_order}')
        order = ckpt_order
    order = 2 if order is None else order
    _check_observed(batch, order)
    std, stats = standardize(batch)
    op = build_diffop(std.times, order)
    lam = _smoothing_weights(args, std, op)
    try:
        ctx = smooth_hetero(std, op, lam, refine=True)
        lengths = std.lengths
        if args.grid_step is not None:
            grids = [regular_grid(std.times[b, 0], std.times[b, lengths[b] - 1], args.grid_step)
                     for b in range(std.n_series)]
            values = interpolate(ctx, grids)
        else:
            grids = [std.times[b, : lengths[b]] for b in range(std.n_series)]
            values = [ctx.z[b][:, : lengths[b]] for b in range(std.n_series)]
    except NotPositiveDefinite as exc:
        raise NumericalError(f'series {_series_name(batch, exc.series)}: {exc}') from exc
    values = [stats.inverse(v) for v in values]
    io.write_smoothed(args.output, batch.series_ids, batch.channels, grids, values)
    print(f'smoothed {batch.n_series} series x {batch.n_channels} channels '
          f'(order {order}) -> {args.output}')
    return EXIT_OK


def _initial_model(args, batch, op):
    if args.kind == 'scalar':
        return scalar_model(args.order, batch.n_series, shared=args.shared)
    if args.kind == 'vector':
        return vector_model(args.order, op.n_rows, batch.n_series, shared=args.shared)
    return network_model(args.order, batch.n_channels, seed=args.seed)


def cmd_fit(args):
    print(f'desk-scale settings: {args.optimizer} lr={args.lr:g} steps={args.steps} '
          f'mask-fraction={args.mask_fraction:g} full batch; {LARGE_SCALE_NOTE}')
    batch = io.load_series(args.input)
    _check_observed(batch, args.order)
    std, _ = standardize(batch)
    op = build_diffop(std.times, args.order)
    rng = np.random.default_rng(args.seed)
    eval_plan = make_masking(std, args.eval_fraction, rng, args.order)
    train = std.with_mask(eval_plan.fit_mask(std.mask))

    model0 = _initial_model(args, train, op)
    opt = OptimizerSpec(args.optimizer, lr=args.lr, steps=args.steps, momentum=args.momentum,
                        seed=args.seed)
    model, trace = fit(model0, train, op, LossSpec(fraction=args.mask_fraction), opt)

    reports = []
    for label, m in (('initial', model0), (args.kind, model)):
        z = smooth_hetero(train, op, emit_lambda(m, train)).z
        mse = masked_loss(z, std, eval_plan)[0]
        print(f'{label:>8s}: held-out masked MSE {mse:.6g}')
        reports.append(evaluate(z, std.values, eval_plan.held_out, label, args.order, args.seed,
                                normalize='observed'))
    print(f'loss {trace[0]:.6g} -> {trace[-1]:.6g} over {args.steps} steps')
    save_checkpoint(model, args.checkpoint_out)
    if args.trace_out:
        io.write_trace(args.trace_out, trace)
    if args.report_out:
        write_reports(args.report_out, reports)
    return EXIT_OK


def cmd_bench(args):
    if args.backend is not None:
        _backend.set_backend(args.backend)
    print(f'threads={_backend.get_num_threads()} backend={_backend.get_backend()} '
          f'T={args.T} channels={args.channels} repeats={args.repeats}')
    if args.compare_backends:
        rows = bench.run_backend_bench(args.T, args.channels, args.orders, args.batch_sizes,
                                       args.repeats)
    else:
        rows = bench.run_bench(args.T, args.channels, args.orders, args.batch_sizes, args.repeats,
                               int(args.memory_cap_gb * 1024**3), tuple(args.solvers))
    print(bench.format_table(rows))
    if args.out:
        bench.write_bench_csv(args.out, rows)
    return EXIT_OK


def cmd_synth(args):
    if args.kind == 'sits':
        batch, _ = synth_sits(np.random.default_rng(args.seed), n_series=args.n_series,
                              n_channels=args.channels)
        io.save_series(args.out, batch)
        print(f'wrote {batch.n_series} synthetic series -> {args.out}')
        return EXIT_OK
    res = noisy_window_experiment(args.seed, order=args.order, n_series=args.n_series,
                                  steps=args.steps, lr=args.lr)
    n_rows = res.lam_vector.size
    with open(args.out, 'w', newline='', encoding='utf-8') as fh:
        writer = csv.writer(fh)
        writer.writerow(('time_days', 'truth', 'noisy', 'z_homo', 'z_hetero', 'lam_homo',
                         'lam_hetero'))
        for t in range(res.times.size):
            lam_h = repr(float(res.lam_scalar)) if t < n_rows else ''
            lam_v = repr(float(res.lam_vector[t])) if t < n_rows else ''
            writer.writerow((repr(float(res.times[t])), repr(float(res.truth[t])),
                             repr(float(res.noisy[0, t])), repr(float(res.z_homo[0, t])),
                             repr(float(res.z_hetero[0, t])), lam_h, lam_v))
    print(f'window truth MSE: scalar {res.window_mse_homo:.6g}, vector {res.window_mse_hetero:.6g}'
          f' -> {args.out}')
    return EXIT_OK


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--threads', type=int, default=1,
                        help='worker threads for batch processing (1 = deterministic)')

    parser = _Parser(prog='whitlayer', description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest='command', required=True, parser_class=_Parser)

    p = sub.add_parser('smooth', parents=[common], help='smooth a series file')
    p.add_argument('--input', required=True)
    p.add_argument('--output', required=True)
    p.add_argument('--order', type=int, default=None, help='difference order (default 2)')
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument('--lambda', dest='lam', type=float, help='one weight for every series')
    src.add_argument('--lambda-file', help='CSV with columns series_id,lambda')
    src.add_argument('--checkpoint', help='fitted regularizer checkpoint (JSON)')
    p.add_argument('--grid-step', type=float, default=None,
                   help='evaluate on a regular grid with this step in days')
    p.set_defaults(func=cmd_smooth)

    p = sub.add_parser('fit', parents=[common], help='fit a regularizer on a series file')
    p.add_argument('--input', required=True)
    p.add_argument('--kind', choices=KINDS, default='scalar')
    p.add_argument('--order', type=int, default=2)
    p.add_argument('--steps', type=int, default=DESK_DEFAULTS['steps'])
    p.add_argument('--lr', type=float, default=DESK_DEFAULTS['lr'])
    p.add_argument('--optimizer', choices=('adam', 'sgd'), default='adam')
    p.add_argument('--momentum', type=float, default=0.0, help='sgd momentum')
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--mask-fraction', type=float, default=DESK_DEFAULTS['mask_fraction'],
                   help='share of valid samples hidden at each training step')
    p.add_argument('--eval-fraction', type=float, default=0.1,
                   help='share of valid samples withheld from fitting for the report')
    p.add_argument('--shared', action='store_true', help='one parameter set for all series')
    p.add_argument('--checkpoint-out', required=True)
    p.add_argument('--trace-out', help='loss trace CSV (step,loss)')
    p.add_argument('--report-out', help='evaluation report CSV')
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser('bench', parents=[common], help='banded versus dense solver timings')
    p.add_argument('--T', type=int, default=350)
    p.add_argument('--channels', type=int, default=10)
    p.add_argument('--orders', type=int, nargs='+', default=[2, 3, 4])
    p.add_argument('--batch-sizes', type=int, nargs='+', default=list(bench.DEFAULT_BATCH_SIZES))
    p.add_argument('--repeats', type=int, default=5)
    p.add_argument('--memory-cap-gb', type=float, default=bench.DEFAULT_MEMORY_CAP / 1024**3,
                   help='dense cells estimated above this are reported out_of_memory')
    p.add_argument('--solvers', nargs='+', choices=('banded', 'dense'), default=['banded', 'dense'])
    p.add_argument('--backend', choices=_backend.available_backends(), default=None)
    p.add_argument('--compare-backends', action='store_true',
                   help='time the banded step under every available kernel backend')
    p.add_argument('--out', help='CSV report path')
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser('synth', parents=[common], help='write synthetic data as CSV')
    p.add_argument('--kind', choices=('window', 'sits'), default='window',
                   help='window: noisy-window curve with both fits; sits: a series file')
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--order', type=int, default=2)
    p.add_argument('--n-series', type=int, default=32)
    p.add_argument('--channels', type=int, default=2, help='sits only')
    p.add_argument('--steps', type=int, default=300, help='window only')
    p.add_argument('--lr', type=float, default=0.05, help='window only')
    p.add_argument('--out', required=True)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads < 1:
        parser.error('--threads must be at least 1')
    previous = _backend.set_num_threads(args.threads)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f'whitlayer: error: {exc}', file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, NotPositiveDefinite) as exc:
        print(f'whitlayer: numerical error: {exc}', file=sys.stderr)
        return EXIT_NUMERICAL
    except DivergenceError as exc:
        diag = ', '.join(f'{k}={v}' for k, v in exc.diagnostics.items() if k != 'recent_losses')
        print(f'whitlayer: numerical error: {exc} ({diag})', file=sys.stderr)
        return EXIT_NUMERICAL
    except (FloatingPointError, bench.BenchmarkMismatch, np.linalg.LinAlgError) as exc:
        print(f'whitlayer: numerical error: {exc}', file=sys.stderr)
        return EXIT_NUMERICAL
    except (DataFormatError, DomainError, StructuralError, OSError, ValueError) as exc:
        print(f'whitlayer: data error: {exc}', file=sys.stderr)
        return EXIT_DATA
    finally:
        _backend.set_num_threads(previous)
