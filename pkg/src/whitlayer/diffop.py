"""Discrete difference operators on unevenly spaced time grids.

The order ``m`` operator is built recursively from plain forward differences,

    D(1)   = forward differences, rows (-1, +1)
    D(m+1) = Delta @ diag(m / (t[i + m] - t[i])) @ D(m)

which is the divided-difference convention of discrete splines. Every row of
``D(k + 1)`` annihilates samples of polynomials of degree ``<= k``; row ``i``
equals ``k! (t[i + k + 1] - t[i])`` times the classical divided difference, so
it maps ``t**(k + 1)`` to ``k! (t[i + k + 1] - t[i])``. On a grid
with constant spacing ``h`` the operator equals ``h**-k`` times the classical
repeated difference matrix, so on a unit grid it reduces to it exactly.

Rows are banded: row ``r`` only touches columns ``r .. r + k + 1`` and is
stored as its ``k + 2`` coefficients. A leading batch axis on ``times`` gives
one operator per series.
"""

from dataclasses import dataclass

import numpy as np

from . import _backend
from .bandmat import BandMatrix
from .errors import DomainError, StructuralError

MAX_ORDER = 5


@dataclass(frozen=True, eq=False)
class DifferenceOperator:
    """Order ``k + 1`` divided-difference operator in banded row storage.

    Attributes
    ----------
    times : numpy.ndarray, shape (T,) or (batch, T)
        Strictly increasing sample times, in days.
    order : int
        Difference order ``k + 1``.
    rows : numpy.ndarray, shape (T - k - 1, k + 2) or (batch, T - k - 1, k + 2)
        ``rows[..., r, j]`` is the coefficient of sample ``r + j`` in row ``r``.

    """

    times: np.ndarray
    order: int
    rows: np.ndarray

    @property
    def n(self):
        return self.times.shape[-1]

    @property
    def n_rows(self):
        return self.rows.shape[-2]

    @property
    def batched(self):
        return self.times.ndim == 2

    @property
    def batch_size(self):
        return self.times.shape[0] if self.batched else None

    def to_dense(self):
        """Dense ``(..., T - k - 1, T)`` matrix, for testing."""
        rows = self.rows
        out = np.zeros(rows.shape[:-1] + (self.n,))
        r = np.arange(self.n_rows)
        for j in range(rows.shape[-1]):
            out[..., r, r + j] = rows[..., j]
        return out

    def series(self, index):
        if not self.batched:
            raise StructuralError('operator is not batched')
        return DifferenceOperator(self.times[index], self.order, self.rows[index])


def build_diffop(times, order):
    """Build the order ``order`` divided-difference operator for ``times``.

    Parameters
    ----------
    times : array-like, shape (T,) or (batch, T)
        Strictly increasing times.
    order : int
        Difference order ``k + 1``, between 1 and 5.

    Returns
    -------
    DifferenceOperator

    Raises
    ------
    DomainError
        If times are not strictly increasing, the order is out of range or
        ``T < order + 1``.

    """
    times = np.array(times, dtype=np.float64)
    order = int(order)
    if times.ndim not in (1, 2):
        raise StructuralError(f'times must be 1D or 2D, got shape {times.shape}')
    if not 1 <= order <= MAX_ORDER:
        raise DomainError(f'order must be between 1 and {MAX_ORDER}, got {order}')
    n = times.shape[-1]
    if n < order + 1:
        raise DomainError(f'need at least {order + 1} samples for order {order}, got {n}')
    if not np.all(np.isfinite(times)) or np.any(np.diff(times, axis=-1) <= 0):
        raise DomainError('times must be finite and strictly increasing')

    rows = np.empty(times.shape[:-1] + (n - 1, 2))
    rows[..., 0] = -1.0
    rows[..., 1] = 1.0
    for m in range(1, order):
        # rows currently hold D(m): n - m rows of m + 1 coefficients
        gaps = times[..., m:] - times[..., : n - m]
        scaled = rows * (m / gaps)[..., None]
        new = np.zeros(times.shape[:-1] + (n - m - 1, m + 2))
        new[..., 1:] += scaled[..., 1:, :]
        new[..., :-1] -= scaled[..., :-1, :]
        rows = new
    times.setflags(write=False)
    rows.setflags(write=False)
    return DifferenceOperator(times, order, rows)


def _as_stack(op, z, length, name):
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != length:
        raise StructuralError(f'{name} has length {z.shape[-1]}, expected {length}')
    if op.batched:
        if z.ndim < 2 or z.shape[0] != op.batch_size:
            raise StructuralError(
                f'batched operator of size {op.batch_size} needs leading batch axis, got {z.shape}'
            )
        return z.reshape(z.shape[0], -1, length), op.rows
    return z.reshape(1, -1, length), op.rows[None]


def apply(op, z):
    """Compute ``D z`` along the last axis of ``z``.

    ``z`` has shape ``(..., T)`` for an unbatched operator or
    ``(batch, ..., T)`` for a batched one. Cost is ``O(T (k + 2))`` per vector.
    """
    zs, rows = _as_stack(op, z, op.n, 'z')
    nr = op.n_rows
    out = np.zeros(zs.shape[:-1] + (nr,))
    for j in range(rows.shape[-1]):
        out += rows[:, None, :, j] * zs[:, :, j : j + nr]
    return out.reshape(np.shape(z)[:-1] + (nr,))


def apply_transpose(op, v):
    """Compute ``D^T v``, the adjoint of :func:`apply`."""
    vs, rows = _as_stack(op, v, op.n_rows, 'v')
    nr = op.n_rows
    out = np.zeros(vs.shape[:-1] + (op.n,))
    for j in range(rows.shape[-1]):
        out[:, :, j : j + nr] += rows[:, None, :, j] * vs
    return out.reshape(np.shape(v)[:-1] + (op.n,))


def apply_compensated(op, hi, lo=None):
    """``D (hi + lo)`` in doubled precision, returned as a normalized pair.

    Used where ``D z`` nearly cancels, e.g. on stretches where the smoother
    follows a polynomial exactly and the true differences are zero.
    """
    zs, rows = _as_stack(op, hi, op.n, 'z')
    ls = np.zeros_like(zs) if lo is None else _as_stack(op, lo, op.n, 'z')[0]
    rows = np.ascontiguousarray(np.broadcast_to(rows, (zs.shape[0],) + rows.shape[1:]))
    out = _backend.difference_dd(rows, np.ascontiguousarray(zs), np.ascontiguousarray(ls))
    shape = np.shape(hi)[:-1] + (op.n_rows,)
    return tuple(part.reshape(shape) for part in out)


def gram_banded(op, weights):
    """Assemble ``D^T diag(weights) D`` in lower band storage.

    Parameters
    ----------
    op : DifferenceOperator
    weights : array-like, shape (T - k - 1,) or (batch, T - k - 1)
        Strictly positive penalty weights, one per difference row.

    Returns
    -------
    BandMatrix
        Raw band matrix with bandwidth ``k + 1``; batched when either the
        operator or the weights carry a batch axis.

    """
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape[-1] != op.n_rows:
        raise StructuralError(f'weights have length {weights.shape[-1]}, expected {op.n_rows}')
    if weights.ndim > 2 or (op.batched and weights.ndim == 2 and weights.shape[0] != op.batch_size):
        raise StructuralError(f'weights shape {weights.shape} incompatible with operator')
    if not np.all(weights > 0):
        raise DomainError('penalty weights must be strictly positive')
    rows = op.rows
    batched = op.batched or weights.ndim == 2
    if batched:
        nb = op.batch_size if op.batched else weights.shape[0]
        rows = np.broadcast_to(rows, (nb,) + rows.shape[-2:])
        weights = np.broadcast_to(weights, (nb, op.n_rows))
    else:
        rows, weights = rows[None], weights[None]

    nr, width = op.n_rows, op.order + 1
    bands = np.zeros((rows.shape[0], width, op.n))
    for a in range(width):
        wa = weights * rows[..., a]
        for b in range(a, width):
            bands[:, b - a, a : a + nr] += wa * rows[..., b]
    return BandMatrix._wrap(bands if batched else bands[0])
