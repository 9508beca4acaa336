"""Whittaker smoothing of masked, irregular, multichannel time series.

For each series the smoother solves

    (W + D^T diag(lam) D) z = W x

where ``W`` is the diagonal 0/1 observation mask, ``D`` the divided-difference
operator of the series' time grid and ``lam`` one positive weight per
difference row. The system matrix is factorized once per series and shared by
all channels; the factor is kept in the returned context for the backward pass.
"""

import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import _backend, bandmat
from .bandmat import BandMatrix
from .diffop import DifferenceOperator, apply, apply_compensated, build_diffop, gram_banded
from .errors import DomainError, StructuralError

LAMBDA_MIN = 1e-6
LAMBDA_MAX = 1e10

_clamp_counter = {'count': 0}


class LambdaClampWarning(UserWarning):
    """Penalty weights outside ``[LAMBDA_MIN, LAMBDA_MAX]`` were clamped."""


def clamp_count():
    """Total number of penalty weights clamped since import."""
    return _clamp_counter['count']


@dataclass
class TimeSeriesBatch:
    """Batch of irregular time series padded to a common length.

    Attributes
    ----------
    times : numpy.ndarray, shape (batch, T)
        Strictly increasing times per series, in days. Padding slots carry
        synthetic times after the last real sample.
    values : numpy.ndarray, shape (batch, channels, T)
    mask : numpy.ndarray, shape (batch, T)
        1.0 where a sample is observed and valid, 0.0 otherwise.
    lengths : numpy.ndarray of int, shape (batch,)
        Number of real (non-padding) slots per series; defaults to ``T``.
    series_ids, channels : tuple of str, optional
        Labels carried through from files; not used in computations.

    1D inputs are promoted to a batch of one series; 2D ``values`` are read as
    ``(batch, T)`` with a single channel.
    """

    times: np.ndarray
    values: np.ndarray
    mask: np.ndarray
    lengths: np.ndarray = field(default=None)
    series_ids: tuple = None
    channels: tuple = None

    def __post_init__(self):
        times = np.atleast_2d(np.asarray(self.times, dtype=np.float64))
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim == 1:
            values = values[None, None]
        elif values.ndim == 2:
            values = values[:, None]
        mask = np.atleast_2d(np.asarray(self.mask, dtype=np.float64))
        if times.ndim != 2 or values.ndim != 3 or mask.ndim != 2:
            raise StructuralError('times, values and mask have incompatible dimensions')
        nb, n = times.shape
        if values.shape[0] != nb or values.shape[2] != n or mask.shape != (nb, n):
            raise StructuralError(
                f'shape mismatch: times {times.shape}, values {values.shape}, mask {mask.shape}'
            )
        if not np.all((mask == 0) | (mask == 1)):
            raise DomainError('mask entries must be 0 or 1')
        if np.any(np.diff(times, axis=1) <= 0):
            raise DomainError('times must be strictly increasing within each series')
        if self.lengths is None:
            lengths = np.full(nb, n, dtype=np.int64)
        else:
            lengths = np.asarray(self.lengths, dtype=np.int64).reshape(nb)
        if np.any(lengths < 1) or np.any(lengths > n):
            raise StructuralError('lengths must lie in [1, T]')
        if np.any(mask[np.arange(n)[None, :] >= lengths[:, None]] != 0):
            raise DomainError('padding slots must have mask 0')
        self.times, self.values, self.mask, self.lengths = times, values, mask, lengths

    @property
    def n_series(self):
        return self.times.shape[0]

    @property
    def n_channels(self):
        return self.values.shape[1]

    @property
    def n_times(self):
        return self.times.shape[1]

    def observed_counts(self):
        return self.mask.sum(axis=1).astype(np.int64)

    def padding(self):
        """Boolean ``(batch, T)`` array, True on padding slots."""
        return np.arange(self.n_times)[None, :] >= self.lengths[:, None]

    def with_mask(self, mask):
        return replace(self, mask=mask)

    def with_values(self, values):
        return replace(self, values=values)

    def subset(self, index):
        index = np.atleast_1d(index)
        ids = None if self.series_ids is None else tuple(self.series_ids[i] for i in index)
        return TimeSeriesBatch(
            self.times[index], self.values[index], self.mask[index], self.lengths[index],
            ids, self.channels,
        )


@dataclass(frozen=True, eq=False)
class SmootherContext:
    """Forward-pass state reused by the backward pass.

    Attributes
    ----------
    factor : BandMatrix
        Batched Cholesky factor of ``W + D^T diag(lam) D``.
    z : numpy.ndarray, shape (batch, channels, T)
    dz : numpy.ndarray, shape (batch, channels, T - k - 1)
        ``D z`` per series and channel.
    op : DifferenceOperator
    mask : numpy.ndarray, shape (batch, T)
    lam : numpy.ndarray, shape (batch, T - k - 1)
        Penalty weights actually used (after clamping).
    batch : TimeSeriesBatch
    n_clamped : int
        Number of input weights that were clamped.
    refined : bool
        Whether solves use iterative refinement with operator residuals
        (see :func:`operator_residual`).

    """

    factor: BandMatrix
    z: np.ndarray
    dz: np.ndarray
    op: DifferenceOperator
    mask: np.ndarray
    lam: np.ndarray
    batch: TimeSeriesBatch
    n_clamped: int = 0
    refined: bool = False

    def solve(self, rhs, split=False):
        """Apply the inverse system matrix, refined if the forward pass was.

        With ``split`` the result is returned as a pair ``(hi, lo)`` whose
        sum carries the refined solution beyond working precision; ``lo`` is
        zero for unrefined contexts.
        """
        if not self.refined:
            out = bandmat.solve_factored(self.factor, rhs)
            return (out, np.zeros_like(out)) if split else out
        rhs = np.asarray(rhs, dtype=np.float64)

        def residual(hi, lo):
            return operator_residual(self.op, self.mask, self.lam, rhs, hi, lo)

        hi, lo = bandmat.refine_solution(self.factor, rhs, residual)
        return (hi, lo) if split else hi


def diffop_for(batch, order):
    """Per-series difference operator on the batch's time grids."""
    return build_diffop(batch.times, order)


def build_omega(mask, op, lam):
    """Assemble ``W + D^T diag(lam) D`` in band storage.

    Parameters
    ----------
    mask : array-like, shape (T,) or (batch, T)
        0/1 observation mask, the diagonal of ``W``.
    op : DifferenceOperator
    lam : array-like, shape (T - k - 1,) or (batch, T - k - 1)
        Strictly positive penalty weights.

    Returns
    -------
    BandMatrix
        Raw band matrix with bandwidth ``k + 1``. Positive definiteness is
        only checked when it is factorized.

    """
    mask = np.asarray(mask, dtype=np.float64)
    if not np.all((mask == 0) | (mask == 1)):
        raise DomainError('mask entries must be 0 or 1')
    if mask.shape[-1] != op.n:
        raise StructuralError(f'mask length {mask.shape[-1]} does not match operator size {op.n}')
    omega = gram_banded(op, lam)
    if mask.ndim == 2 and not omega.batched:
        omega = BandMatrix._wrap(np.repeat(omega.bands[None], mask.shape[0], axis=0))
    omega.bands[..., 0, :] += mask
    return omega


def operator_residual(op, mask, lam, rhs, hi, lo=None):
    """``rhs - (W + D^T diag(lam) D) (hi + lo)`` without assembling the matrix.

    Every product and sum is carried in doubled precision and rounded once
    at the end. Unlike a residual against the assembled band matrix, whose
    entries are already rounded, this one is exact for the system defined
    by ``mask``, ``op`` and ``lam`` themselves; in particular, on unobserved
    stretches the refined solution satisfies ``D z = 0`` to doubled
    precision wherever the exact one does.

    Parameters
    ----------
    op : DifferenceOperator
    mask : numpy.ndarray, shape (batch, T)
    lam : numpy.ndarray, shape (batch, T - k - 1)
    rhs, hi, lo : numpy.ndarray, shape (batch, channels, T)

    Returns
    -------
    numpy.ndarray, shape (batch, channels, T)

    """
    rhs = np.ascontiguousarray(rhs, dtype=np.float64)
    nb = rhs.shape[0]
    lo = np.zeros_like(rhs) if lo is None else np.ascontiguousarray(lo, dtype=np.float64)
    rows = op.rows if op.batched else op.rows[None]
    rows = np.ascontiguousarray(np.broadcast_to(rows, (nb,) + rows.shape[1:]))
    mask = np.ascontiguousarray(np.broadcast_to(mask, (nb, op.n)), dtype=np.float64)
    lam = np.ascontiguousarray(np.broadcast_to(lam, (nb, op.n_rows)), dtype=np.float64)
    hi = np.ascontiguousarray(hi, dtype=np.float64)
    return _backend.operator_residual(rows, mask, lam, rhs, hi, lo)


def _clamp(lam):
    if not np.all(np.isfinite(lam)):
        raise DomainError('penalty weights must be finite')
    outside = (lam < LAMBDA_MIN) | (lam > LAMBDA_MAX)
    n_out = int(outside.sum())
    if n_out:
        _clamp_counter['count'] += n_out
        warnings.warn(
            f'{n_out} penalty weight(s) clamped to [{LAMBDA_MIN:g}, {LAMBDA_MAX:g}]',
            LambdaClampWarning,
            stacklevel=3,
        )
        lam = np.clip(lam, LAMBDA_MIN, LAMBDA_MAX)
    return lam, n_out


def _check_op(batch, op):
    if op.n != batch.n_times:
        raise StructuralError(f'operator size {op.n} does not match series length {batch.n_times}')
    if op.batched and op.batch_size != batch.n_series:
        raise StructuralError('operator batch size does not match the series batch')


def smooth_hetero(batch, op, lam, check=False, refine=False):
    """Solve the heteroscedastic Whittaker system for every series.

    Parameters
    ----------
    batch : TimeSeriesBatch
    op : DifferenceOperator
        Batched operator (one grid per series) or a single shared grid.
    lam : array-like, shape (batch, T - k - 1) or (T - k - 1,)
        Penalty weights, clamped to ``[LAMBDA_MIN, LAMBDA_MAX]``.
    check : bool, optional
        If True, verify the normal equations on the result (debug aid).
    refine : bool, optional
        If True, polish the solution by iterative refinement with residuals
        from :func:`operator_residual`, and compute ``D z`` from the
        doubled-precision iterate. Worth it for high orders on sparse masks,
        where the system is badly conditioned, and for gradients in ``lam``
        that vanish structurally. The backward pass is then refined too.

    Returns
    -------
    SmootherContext

    Raises
    ------
    DomainError
        If a series has fewer than ``k + 1`` (the order) observed samples.
    NotPositiveDefinite
        If a system cannot be factorized; carries the series index.

    """
    _check_op(batch, op)
    lam = np.asarray(lam, dtype=np.float64)
    nb, nr = batch.n_series, op.n_rows
    if lam.shape not in ((nb, nr), (nr,)):
        raise StructuralError(f'lam has shape {lam.shape}, expected ({nb}, {nr})')
    lam = np.array(np.broadcast_to(lam, (nb, nr)))
    lam, n_clamped = _clamp(lam)

    counts = batch.observed_counts()
    # the penalty's null space (polynomials of degree < order) must be pinned
    # down by the observations, which takes ``order`` observed samples
    short = np.flatnonzero(counts < op.order)
    if short.size:
        raise DomainError(
            f'series {int(short[0])} has {int(counts[short[0]])} observed samples; '
            f'order {op.order} needs at least {op.order}'
        )

    omega = build_omega(batch.mask, op, lam)
    raw = omega.copy() if check else None
    bandmat.banded_cholesky_inplace(omega)
    rhs = batch.mask[:, None, :] * batch.values
    ctx = SmootherContext(omega, None, None, op, batch.mask, lam, batch, n_clamped, bool(refine))
    z, z_lo = ctx.solve(rhs, split=True)
    if check:
        resid = bandmat.band_matvec(raw, z) - rhs
        scale = max(1.0, float(np.abs(batch.values).max(initial=0.0)))
        if np.abs(resid).max(initial=0.0) > 1e-9 * scale:
            raise AssertionError('normal equations not satisfied by the solution')
    dz = apply_compensated(op, z, z_lo)[0] if refine else apply(op, z)
    return replace(ctx, z=z, dz=dz)


def smooth_homo(batch, op, lam, check=False, refine=False):
    """Homoscedastic smoothing with one scalar weight per series (or shared).

    Identical to :func:`smooth_hetero` with a constant weight vector.
    """
    lam = np.asarray(lam, dtype=np.float64)
    if lam.ndim == 0:
        lam = np.full(batch.n_series, float(lam))
    if lam.shape != (batch.n_series,):
        raise StructuralError(f'lam must be a scalar or have shape ({batch.n_series},)')
    return smooth_hetero(batch, op, np.repeat(lam[:, None], op.n_rows, axis=1),
                         check=check, refine=refine)


def objective(z, batch, op, lam):
    """Penalized least-squares objective per series, summed over channels."""
    resid = batch.mask[:, None, :] * (batch.values - z) ** 2
    dz = apply(op, z)
    lam = np.broadcast_to(np.asarray(lam, dtype=np.float64), (batch.n_series, op.n_rows))
    return resid.sum(axis=(1, 2)) + (lam[:, None, :] * dz**2).sum(axis=(1, 2))


def regular_grid(start, stop, step):
    """Times ``start, start + step, ...`` covering ``[start, stop]``.

    Has ``ceil((stop - start) / step) + 1`` points; the last one may pass ``stop``.
    """
    if step <= 0:
        raise DomainError('grid step must be positive')
    count = int(np.ceil((stop - start) / step - 1e-9)) + 1
    return start + step * np.arange(max(count, 1))


def pad_times(times, length):
    """Extend an increasing grid to ``length`` with one-day steps past its end."""
    times = np.asarray(times, dtype=np.float64)
    extra = length - times.size
    if extra <= 0:
        return times
    last = times[-1] if times.size else 0.0
    return np.concatenate([times, last + np.arange(1, extra + 1)])


def interpolate(ctx, query_times, return_context=False, refine=None):
    """Evaluate the smoother at new times by re-solving on an augmented grid.

    Query times are merged into each series' grid as unobserved (mask 0)
    slots and the system is solved again, so unseen times are filled by the
    smoother itself rather than by interpolating ``z`` afterwards. Penalty
    weights for the new difference rows are taken from the original row whose
    leftmost time precedes the new row's leftmost time (piecewise constant).

    Parameters
    ----------
    ctx : SmootherContext
    query_times : array-like or list of array-like
        Increasing query times: shape ``(Q,)`` shared by all series,
        ``(batch, Q)``, or a list with one 1D array per series.
    refine : bool, optional
        Use refined solves; defaults to whatever ``ctx`` used.

    Returns
    -------
    numpy.ndarray, shape (batch, channels, Q), or list of (channels, Q_b) arrays
        Smoothed values; a list when ``query_times`` is a list. With
        ``return_context`` also the new context and the per-series slot indices.

    """
    batch, order = ctx.batch, ctx.op.order
    nb = batch.n_series
    ragged = (isinstance(query_times, (list, tuple)) and len(query_times) > 0
              and all(np.ndim(q) == 1 for q in query_times))
    if ragged:
        queries = [np.asarray(q, dtype=np.float64).ravel() for q in query_times]
        if len(queries) != nb:
            raise StructuralError(f'expected {nb} query arrays, got {len(queries)}')
    else:
        query = np.asarray(query_times, dtype=np.float64)
        if query.ndim == 1:
            query = np.broadcast_to(query, (nb, query.shape[-1]))
        if query.shape[0] != nb:
            raise StructuralError('per-series query times must have a leading batch axis')
        queries = list(query)
    if any(np.any(np.diff(q) <= 0) for q in queries):
        raise DomainError('query times must be strictly increasing')

    grids = [np.union1d(batch.times[b], queries[b]) for b in range(nb)]
    length = max(g.size for g in grids)
    times = np.empty((nb, length))
    values = np.zeros((nb, batch.n_channels, length))
    mask = np.zeros((nb, length))
    lengths = np.empty(nb, dtype=np.int64)
    slots = []
    for b, grid in enumerate(grids):
        times[b] = pad_times(grid, length)
        pos = np.searchsorted(grid, batch.times[b])
        values[b, :, pos] = batch.values[b].T
        mask[b, pos] = batch.mask[b]
        slots.append(np.searchsorted(grid, queries[b]))
        lengths[b] = grid.size
    new_batch = TimeSeriesBatch(times, values, mask, lengths, batch.series_ids, batch.channels)
    op = build_diffop(times, order)

    left_old = batch.times[:, : ctx.op.n_rows]
    left_new = times[:, : op.n_rows]
    lam = np.empty((nb, op.n_rows))
    for b in range(nb):
        idx = np.searchsorted(left_old[b], left_new[b], side='right') - 1
        lam[b] = ctx.lam[b, np.clip(idx, 0, ctx.op.n_rows - 1)]

    if refine is None:
        refine = ctx.refined
    new_ctx = smooth_hetero(new_batch, op, lam, refine=refine)
    out = [new_ctx.z[b][:, slots[b]] for b in range(nb)]
    if not ragged:
        out = np.stack(out)
        slots = np.stack(slots)
    if return_context:
        return out, new_ctx, slots
    return out
