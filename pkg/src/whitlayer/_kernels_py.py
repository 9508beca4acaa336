"""Pure numpy fallback for the compiled band kernels.

Same signatures and in-place semantics as ``_kernels.pyx``. The loops over the
matrix dimension stay in Python; every step is vectorized across the batch.
"""

import numpy as np

from ._compensated import Accumulator, two_product, two_sum


def cholesky_banded(bands):
    """Factorize a ``(batch, p + 1, n)`` stack of band matrices in place.

    Returns the per-matrix column of the first non-positive pivot, -1 if none.
    Matrices that fail stop being updated; the rest of the batch proceeds.
    """
    nb, p1, n = bands.shape
    p = p1 - 1
    info = np.full(nb, -1, dtype=np.int64)
    alive = np.ones(nb, dtype=bool)
    for t in range(n):
        w = bands[:, 0, t].copy()
        bad = alive & ~(w > 0.0)
        if bad.any():
            info[bad] = t
            alive &= ~bad
        w[~alive] = 1.0
        v = bands[:, 1:, t].copy()
        # failed matrices must not be touched again
        v[~alive] = 0.0
        s = np.sqrt(w)
        bands[alive, 0, t] = s[alive]
        bands[alive, 1:, t] = v[alive] / s[alive, None]
        for u in range(min(p, n - t - 1)):
            bands[:, : p - u, t + 1 + u] -= v[:, u:] * (v[:, u] / w)[:, None]
    return info


def solve_banded(bands, rhs):
    """Solve ``L L^T x = rhs`` in place; ``rhs`` is ``(batch, nrhs, n)``."""
    nb, p1, n = bands.shape
    p = p1 - 1
    diag = bands[:, 0, :]
    for t in range(n):
        acc = rhs[:, :, t].copy()
        for j in range(1, min(p, t) + 1):
            acc -= bands[:, j, t - j][:, None] * rhs[:, :, t - j]
        rhs[:, :, t] = acc / diag[:, t][:, None]
    for t in range(n - 1, -1, -1):
        acc = rhs[:, :, t].copy()
        for j in range(1, min(p, n - 1 - t) + 1):
            acc -= bands[:, j, t][:, None] * rhs[:, :, t + j]
        rhs[:, :, t] = acc / diag[:, t][:, None]


def matvec_banded(bands, v):
    """Symmetric product ``A v`` for raw band storage; ``v`` is ``(batch, nrhs, n)``."""
    nb, p1, n = bands.shape
    out = bands[:, None, 0, :] * v
    for j in range(1, p1):
        sub = bands[:, None, j, : n - j]
        out[:, :, : n - j] += sub * v[:, :, j:]
        out[:, :, j:] += sub * v[:, :, : n - j]
    return out


def residual_banded(bands, x, b):
    """Compensated residual ``b - A x``; as accurate as a doubled-precision sum."""
    nb, p1, n = bands.shape
    s = b.copy()
    comp = np.zeros_like(s)

    def accumulate(sl, coef, xv):
        prod, err = two_product(coef, xv)
        old = s[:, :, sl]
        new = old - prod
        virt = new - old
        comp[:, :, sl] += ((old - (new - virt)) + (-prod - virt)) - err
        s[:, :, sl] = new

    accumulate(slice(None), bands[:, None, 0, :], x)
    for j in range(1, p1):
        sub = bands[:, None, j, : n - j]
        accumulate(slice(0, n - j), sub, x[:, :, j:])
        accumulate(slice(j, n), sub, x[:, :, : n - j])
    return s + comp


def difference_dd(rows, hi, lo):
    """Compensated ``D (hi + lo)`` as a normalized pair.

    ``rows`` is ``(batch, R, w)`` in difference-row storage; ``hi`` and ``lo``
    are ``(batch, nrhs, T)``.
    """
    nr = rows.shape[1]
    acc = Accumulator(np.zeros(hi.shape[:-1] + (nr,)))
    for j in range(rows.shape[2]):
        acc.add(Ellipsis, rows[:, None, :, j], hi[:, :, j : j + nr], lo[:, :, j : j + nr])
    return acc.result()


def operator_residual(rows, mask, lam, rhs, hi, lo):
    """Compensated ``rhs - (W + D^T diag(lam) D) (hi + lo)``, rounded once."""
    d_hi, d_lo = difference_dd(rows, hi, lo)
    w = lam[:, None, :]
    p, e = two_product(w, d_hi)
    s_hi, s_lo = two_sum(p, e + w * d_lo)
    acc = Accumulator(rhs)
    # 0/1 weights make these products exact
    acc.add(Ellipsis, -mask[:, None, :], hi, lo)
    nr = rows.shape[1]
    for j in range(rows.shape[2]):
        acc.add((Ellipsis, slice(j, j + nr)), -rows[:, None, :, j], s_hi, s_lo)
    return acc.result()[0]
