"""Symmetric positive definite matrices in lower band storage.

A matrix ``A`` of size ``n`` with ``p`` sub-diagonals is held in a dense array
``bands`` of shape ``(p + 1, n)``: ``bands[j, t] = A[t + j, t]``. Row 0 is the
main diagonal and row ``j`` is the ``j``-th sub-diagonal, left aligned, with
its trailing ``j`` entries zero. The Cholesky factor ``L`` is written over the
same array in the same layout.

A leading batch axis is supported, ``bands.shape == (batch, p + 1, n)``, where
each entry of the batch is an independent matrix.
"""

import numpy as np

from . import _backend
from ._compensated import two_sum
from .errors import NotPositiveDefinite, StructuralError

RAW = 'raw'
FACTORED = 'factored'
FAILED = 'failed'

SYMMETRY_TOL = 1e-12

_counters = {'factorizations': 0}


def factorization_count():
    """Number of individual matrices factorized since import (or last reset)."""
    return _counters['factorizations']


def reset_factorization_count():
    _counters['factorizations'] = 0


class BandMatrix:
    """A (possibly batched) symmetric band matrix or its Cholesky factor.

    Parameters
    ----------
    bands : array-like, shape (p + 1, n) or (batch, p + 1, n)
        Lower band storage. Copied into a C-contiguous float64 array.
    state : {'raw', 'factored'}
        Whether ``bands`` holds the matrix itself or its Cholesky factor.

    """

    def __init__(self, bands, state=RAW):
        bands = np.array(bands, dtype=np.float64, order='C', copy=True)
        if bands.ndim not in (2, 3):
            raise StructuralError(f'bands must be 2D or 3D, got shape {bands.shape}')
        if state not in (RAW, FACTORED):
            raise ValueError(f'invalid state {state!r}')
        if bands.shape[-2] > bands.shape[-1]:
            raise StructuralError(
                f'bandwidth + 1 ({bands.shape[-2]}) exceeds dimension ({bands.shape[-1]})'
            )
        self.bands = bands
        self.state = state

    @classmethod
    def _wrap(cls, bands, state=RAW):
        # takes ownership of an already contiguous float64 array without copying
        obj = cls.__new__(cls)
        obj.bands = bands
        obj.state = state
        return obj

    @property
    def n(self):
        return self.bands.shape[-1]

    @property
    def bandwidth(self):
        return self.bands.shape[-2] - 1

    @property
    def batched(self):
        return self.bands.ndim == 3

    @property
    def batch_size(self):
        return self.bands.shape[0] if self.batched else None

    @property
    def nbytes(self):
        return self.bands.nbytes

    def _stack(self):
        return self.bands if self.batched else self.bands[None]

    def series(self, index):
        """Copy of one matrix of a batch as an unbatched BandMatrix."""
        if not self.batched:
            raise StructuralError('matrix is not batched')
        return BandMatrix(self.bands[index], state=self.state)

    def copy(self):
        return BandMatrix(self.bands, state=self.state)

    def to_dense(self):
        return band_to_dense(self)

    def __repr__(self):
        batch = f', batch={self.batch_size}' if self.batched else ''
        return f'BandMatrix(n={self.n}, bandwidth={self.bandwidth}{batch}, state={self.state!r})'


def band_from_dense(dense, bandwidth):
    """Convert a symmetric dense matrix (or stack of them) to lower band storage.

    Parameters
    ----------
    dense : array-like, shape (n, n) or (batch, n, n)
        Symmetric matrix with no nonzero entries farther than ``bandwidth``
        from the diagonal.
    bandwidth : int
        Number of sub-diagonals to keep.

    Returns
    -------
    BandMatrix
        Raw band matrix.

    Raises
    ------
    StructuralError
        If the matrix is not square, not symmetric within ``SYMMETRY_TOL``
        (relative to its largest entry) or has a nonzero entry outside the band.

    """
    dense = np.asarray(dense, dtype=np.float64)
    if dense.ndim not in (2, 3) or dense.shape[-1] != dense.shape[-2]:
        raise StructuralError(f'expected square matrix or stack of them, got {dense.shape}')
    n = dense.shape[-1]
    bandwidth = int(bandwidth)
    if bandwidth < 0 or bandwidth + 1 > n:
        raise StructuralError(f'bandwidth {bandwidth} invalid for dimension {n}')
    scale = max(1.0, float(np.abs(dense).max(initial=0.0)))
    if np.abs(dense - np.swapaxes(dense, -1, -2)).max(initial=0.0) > SYMMETRY_TOL * scale:
        raise StructuralError('matrix is not symmetric')
    rows, cols = np.indices((n, n))
    outside = np.abs(rows - cols) > bandwidth
    if np.any(dense[..., outside] != 0):
        raise StructuralError(f'nonzero entry outside declared bandwidth {bandwidth}')

    bands = np.zeros(dense.shape[:-2] + (bandwidth + 1, n))
    for j in range(bandwidth + 1):
        bands[..., j, : n - j] = np.diagonal(dense, offset=-j, axis1=-2, axis2=-1)
    return BandMatrix._wrap(bands)


def band_to_dense(m):
    """Expand a band matrix to dense form.

    Raw matrices are expanded symmetrically; a factored matrix expands to its
    lower triangular Cholesky factor.
    """
    stack = m._stack()
    nb, p1, n = stack.shape
    dense = np.zeros((nb, n, n))
    idx = np.arange(n)
    for j in range(p1):
        dense[:, idx[j:], idx[: n - j]] = stack[:, j, : n - j]
        if j and m.state == RAW:
            dense[:, idx[: n - j], idx[j:]] = stack[:, j, : n - j]
    return dense if m.batched else dense[0]


def banded_cholesky_inplace(m):
    """Cholesky-factorize ``m`` in place, overwriting its bands with ``L``.

    The column sweep computes, for each column ``t``, the pivot square root,
    scales the sub-diagonal entries of the column and updates the following
    ``min(p, n - t - 1)`` columns. Cost is ``O(n p^2)`` per matrix.

    Parameters
    ----------
    m : BandMatrix
        Raw matrix; modified in place.

    Returns
    -------
    BandMatrix
        ``m`` itself, now in the factored state.

    Raises
    ------
    NotPositiveDefinite
        On the first non-positive pivot, carrying the column (and series for
        batches). ``m`` is left in the ``'failed'`` state.
    ValueError
        If ``m`` is not raw (re-factorization is rejected).

    """
    if m.state != RAW:
        raise ValueError(f'cannot factorize a matrix in state {m.state!r}')
    stack = m._stack()
    info = _backend.cholesky(stack)
    _counters['factorizations'] += stack.shape[0]
    failed = np.flatnonzero(info >= 0)
    if failed.size:
        m.state = FAILED
        first = int(failed[0])
        raise NotPositiveDefinite(info[first], series=first if m.batched else None)
    m.state = FACTORED
    return m


def _as_rhs_stack(m, b):
    b = np.asarray(b, dtype=np.float64)
    if b.shape[-1] != m.n:
        raise StructuralError(f'right-hand side length {b.shape[-1]} does not match n={m.n}')
    if m.batched:
        if b.ndim < 2 or b.shape[0] != m.batch_size:
            raise StructuralError(
                f'batched matrix of size {m.batch_size} needs leading batch axis, got {b.shape}'
            )
        stack = b.reshape(b.shape[0], -1, m.n)
    else:
        stack = b.reshape(1, -1, m.n)
    return np.array(stack, order='C', copy=True)


def solve_factored(m, b):
    """Solve ``(L L^T) x = b`` with a factored band matrix.

    Parameters
    ----------
    m : BandMatrix
        Factored matrix.
    b : array-like
        For an unbatched ``m``: shape ``(n,)`` or ``(..., n)`` for several
        right-hand sides. For a batched ``m``: shape ``(batch, n)`` or
        ``(batch, ..., n)``.

    Returns
    -------
    numpy.ndarray
        Solution with the same shape as ``b``. ``b`` is not modified.

    """
    if m.state != FACTORED:
        raise ValueError(f'solve_factored needs a factored matrix, got state {m.state!r}')
    b = np.asarray(b)
    rhs = _as_rhs_stack(m, b)
    _backend.solve(m._stack(), rhs)
    return rhs.reshape(b.shape)


def band_matvec(m, v):
    """Product ``A v`` using only the stored bands of a raw matrix.

    ``v`` follows the same shape conventions as ``b`` in :func:`solve_factored`.
    """
    if m.state != RAW:
        raise ValueError(f'band_matvec needs a raw matrix, got state {m.state!r}')
    v = np.asarray(v)
    stack = _as_rhs_stack(m, v)
    return _backend.matvec(m._stack(), stack).reshape(v.shape)


def band_residual(m, x, b):
    """``b - A x`` for a raw matrix, computed in compensated arithmetic.

    Each entry is accurate as if accumulated in twice the working precision,
    then rounded once. ``x`` and ``b`` follow the conventions of
    :func:`solve_factored`.
    """
    if m.state != RAW:
        raise ValueError(f'band_residual needs a raw matrix, got state {m.state!r}')
    x = np.asarray(x)
    if np.shape(b) != x.shape:
        raise StructuralError(f'x has shape {x.shape} but b has shape {np.shape(b)}')
    xs = _as_rhs_stack(m, x)
    bs = _as_rhs_stack(m, b)
    return _backend.residual(m._stack(), xs, bs).reshape(x.shape)


def refine_solution(factor, b, residual, max_iter=30):
    """Iterative refinement carrying the solution in doubled precision.

    Starts from the Cholesky solution and repeatedly adds
    ``factor^-1 residual(hi, lo)``, keeping the iterate as the normalized
    pair ``hi + lo``. With a residual accurate to doubled precision each
    correction shrinks the error by roughly ``cond * eps``, so for
    ``cond`` well below ``1 / eps`` the pair converges far beyond working
    precision.

    Parameters
    ----------
    factor : BandMatrix
        Cholesky factor of (an approximation of) the system matrix.
    b : array-like
        Right-hand sides, following :func:`solve_factored`.
    residual : callable
        ``residual(hi, lo)`` returns ``b - A (hi + lo)`` rounded to working
        precision, with the shape of ``b``.
    max_iter : int, optional
        Maximum number of corrections.

    Returns
    -------
    hi, lo : numpy.ndarray

    """
    hi = solve_factored(factor, b)
    lo = np.zeros_like(hi)
    nb = factor.batch_size if factor.batched else 1
    eps = np.finfo(np.float64).eps
    previous = np.inf
    for _ in range(max_iter):
        dx = solve_factored(factor, residual(hi, lo))
        hi, lo = two_sum(hi, lo + dx)
        size = np.abs(dx.reshape(nb, -1)).max(axis=1)
        scale = np.abs(hi.reshape(nb, -1)).max(axis=1)
        ratio = float(np.max(size / np.maximum(scale, np.finfo(np.float64).tiny)))
        # stop once corrections reach doubled-precision level or stop shrinking
        if ratio <= eps * eps or ratio > 0.5 * previous:
            break
        previous = ratio
    return hi, lo


def solve_refined(raw, factor, b, max_iter=30):
    """Solve ``A x = b`` with iterative refinement against the stored matrix.

    Residuals come from :func:`band_residual`, so the result is accurate to
    about one unit in the last place whenever ``cond(A)`` is well below
    ``1 / eps``, instead of the usual ``cond(A) * eps``.

    Parameters
    ----------
    raw : BandMatrix
        The unfactored matrix.
    factor : BandMatrix
        Its Cholesky factor.
    b : array-like
    max_iter : int, optional
        Maximum number of corrections.

    Returns
    -------
    numpy.ndarray

    """
    b = np.asarray(b, dtype=np.float64)

    def residual(hi, lo):
        return band_residual(raw, hi, b) - band_matvec(raw, lo)

    return refine_solution(factor, b, residual, max_iter)[0]
