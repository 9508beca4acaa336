"""Kernel backend selection and batch dispatch.

The compiled Cython kernels are used when the extension is importable;
otherwise the numpy fallback is selected. ``set_backend`` switches at runtime
(used by the backend benchmark and the equivalence tests) and
``set_num_threads`` splits batches across a thread pool. The compiled kernels
release the GIL. Results never depend on the thread count because series are
independent.
"""

from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import _kernels_py

try:
    from . import _kernels as _kernels_c
except ImportError:  # extension not built
    _kernels_c = None

_BACKENDS = {'python': _kernels_py}
if _kernels_c is not None:
    _BACKENDS['compiled'] = _kernels_c

_state = {
    'name': 'compiled' if _kernels_c is not None else 'python',
    'threads': 1,
}


def available_backends():
    """Names of the kernel backends importable in this environment."""
    return sorted(_BACKENDS)


def get_backend():
    return _state['name']


def set_backend(name):
    """Select the kernel backend, returning the previous one."""
    if name not in _BACKENDS:
        raise ValueError(
            f'unknown or unavailable backend {name!r}; available: {available_backends()}'
        )
    previous = _state['name']
    _state['name'] = name
    return previous


def get_num_threads():
    return _state['threads']


def set_num_threads(n):
    """Set the number of worker threads used to split batches; returns the previous value."""
    n = int(n)
    if n < 1:
        raise ValueError('thread count must be at least 1')
    previous = _state['threads']
    _state['threads'] = n
    return previous


def _chunks(nb):
    threads = min(_state['threads'], nb)
    bounds = np.linspace(0, nb, threads + 1).astype(int)
    return [(lo, hi) for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo]


def _kernels():
    return _BACKENDS[_state['name']]


def cholesky(bands):
    kern = _kernels()
    chunks = _chunks(bands.shape[0])
    if len(chunks) <= 1:
        return kern.cholesky_banded(bands)
    with ThreadPoolExecutor(len(chunks)) as pool:
        parts = pool.map(lambda c: kern.cholesky_banded(bands[c[0]:c[1]]), chunks)
        return np.concatenate(list(parts))


def solve(bands, rhs):
    kern = _kernels()
    chunks = _chunks(bands.shape[0])
    if len(chunks) <= 1:
        kern.solve_banded(bands, rhs)
        return
    with ThreadPoolExecutor(len(chunks)) as pool:
        list(pool.map(lambda c: kern.solve_banded(bands[c[0]:c[1]], rhs[c[0]:c[1]]), chunks))


def matvec(bands, v):
    kern = _kernels()
    chunks = _chunks(bands.shape[0])
    if len(chunks) <= 1:
        return kern.matvec_banded(bands, v)
    with ThreadPoolExecutor(len(chunks)) as pool:
        parts = pool.map(lambda c: kern.matvec_banded(bands[c[0]:c[1]], v[c[0]:c[1]]), chunks)
        return np.concatenate(list(parts))


def residual(bands, x, b):
    kern = _kernels()
    chunks = _chunks(bands.shape[0])
    if len(chunks) <= 1:
        return kern.residual_banded(bands, x, b)
    with ThreadPoolExecutor(len(chunks)) as pool:
        parts = pool.map(
            lambda c: kern.residual_banded(bands[c[0]:c[1]], x[c[0]:c[1]], b[c[0]:c[1]]), chunks)
        return np.concatenate(list(parts))


def _batched(name, *arrays):
    """Run kernel ``name`` on batch chunks of ``arrays`` and join the results."""
    kern = getattr(_kernels(), name)
    chunks = _chunks(arrays[0].shape[0])
    if len(chunks) <= 1:
        return kern(*arrays)
    with ThreadPoolExecutor(len(chunks)) as pool:
        parts = list(pool.map(lambda c: kern(*(a[c[0]:c[1]] for a in arrays)), chunks))
    if isinstance(parts[0], tuple):
        return tuple(np.concatenate(p) for p in zip(*parts))
    return np.concatenate(parts)


def difference_dd(rows, hi, lo):
    return _batched('difference_dd', rows, hi, lo)


def operator_residual(rows, mask, lam, rhs, hi, lo):
    return _batched('operator_residual', rows, mask, lam, rhs, hi, lo)
