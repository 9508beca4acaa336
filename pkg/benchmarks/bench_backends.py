"""Compare the compiled and pure-Python kernel backends.

Times one forward and backward pass of the banded smoother per cell and
prints a table; outputs of both backends are checked for agreement first.

    python3 benchmarks/bench_backends.py [--T 350] [--batch-sizes 64 256 1024] [--refine] [--out file.csv]

With ``--refine`` the refined solves are timed, which exercises the
compensated residual kernels.
"""

import argparse

from whitlayer import bench
from whitlayer._backend import available_backends


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument('--T', type=int, default=350)
    parser.add_argument('--channels', type=int, default=10)
    parser.add_argument('--orders', type=int, nargs='+', default=[2, 3, 4])
    parser.add_argument('--batch-sizes', type=int, nargs='+', default=[64, 256, 1024])
    parser.add_argument('--repeats', type=int, default=5)
    parser.add_argument('--refine', action='store_true', help='time refined solves')
    parser.add_argument('--out')
    args = parser.parse_args()
    if len(available_backends()) < 2:
        print('only the python backend is available; build the extension to compare')
    rows = bench.run_backend_bench(args.T, args.channels, args.orders, args.batch_sizes,
                                   args.repeats, refine=args.refine)
    print(bench.format_table(rows))
    by_cell = {}
    for r in rows:
        by_cell.setdefault((r.order, r.batch_size), {})[r.backend] = r.wall_time_s
    for (order, bs), cell in by_cell.items():
        if 'compiled' in cell and 'python' in cell:
            print(f'order {order} batch {bs}: compiled is {cell["python"] / cell["compiled"]:.1f}x faster')
    if args.out:
        bench.write_bench_csv(args.out, rows)


if __name__ == '__main__':
    main()
