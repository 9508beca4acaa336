"""Reverse-mode gradients of the smoother output.

With ``Omega = W + D^T diag(lam) D`` and ``z = Omega^-1 W x``, the
vector-Jacobian products against an upstream gradient ``g = dL/dz`` are

    u       = Omega^-1 g
    x_bar   = W u
    lam_bar = -(D u) * (D z)          (summed over channels)

``u`` comes from one banded solve per channel against the factor kept by the
forward pass, so the backward pass costs ``O(C T (k + 1))`` per series and
never re-factorizes.
"""

import warnings
from dataclasses import dataclass

import numpy as np

from .diffop import apply, apply_compensated
from .errors import StructuralError
from .smoother import smooth_hetero


@dataclass(frozen=True)
class Cotangents:
    """Gradients of a scalar loss with respect to the smoother inputs.

    Attributes
    ----------
    x_bar : numpy.ndarray, shape (batch, channels, T)
    lam_bar : numpy.ndarray, shape (batch, T - k - 1)
        Summed over channels, since all channels share the weights.

    """

    x_bar: np.ndarray
    lam_bar: np.ndarray


def vjp(ctx, g_bar):
    """Pull ``g_bar = dL/dz`` back to ``dL/dx`` and ``dL/dlam``.

    Parameters
    ----------
    ctx : SmootherContext
        Context of the forward solve; its factor is reused.
    g_bar : array-like, shape (batch, channels, T)

    Returns
    -------
    Cotangents

    """
    g_bar = np.asarray(g_bar, dtype=np.float64)
    if g_bar.shape != ctx.z.shape:
        raise StructuralError(f'g_bar has shape {g_bar.shape}, expected {ctx.z.shape}')
    if ctx.refined:
        u, u_lo = ctx.solve(g_bar, split=True)
        du = apply_compensated(ctx.op, u, u_lo)[0]
    else:
        u = ctx.solve(g_bar)
        du = apply(ctx.op, u)
    x_bar = ctx.mask[:, None, :] * u
    lam_bar = -np.einsum('bcr,bcr->br', du, ctx.dz)
    return Cotangents(x_bar, lam_bar)


class FiniteDifferenceWarning(UserWarning):
    """Finite-difference deviations did not shrink with the step size."""


@dataclass(frozen=True)
class FDReport:
    """Result of :func:`finite_diff_check`.

    ``deviation_lam`` and ``deviation_x`` hold the maximum per-entry relative
    deviation for each step tried; ``max_deviation`` is the smallest overall
    maximum across steps.
    """

    steps: tuple
    deviation_lam: tuple
    deviation_x: tuple
    max_deviation: float
    tolerance: float
    passed: bool
    monotone: bool


def relative_deviation(analytic, numeric, floor=1e-6):
    """Per-entry ``|a - f| / max(|a|, |f|, floor * max|f|)``; returns the max.

    The floor keeps entries that are exactly zero analytically (masked
    samples, for instance) from dividing zero by zero.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = floor * max(float(np.abs(numeric).max(initial=0.0)), 1e-300)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), scale)
    return float((np.abs(analytic - numeric) / denom).max(initial=0.0))


def finite_diff_check(instance, loss, step=1e-4, tolerance=1e-4, x_scale=1.0):
    """Compare the analytic VJP with central finite differences.

    Parameters
    ----------
    instance : tuple
        ``(batch, op, lam)`` as accepted by :func:`smooth_hetero`; ``lam`` of
        shape ``(batch, T - k - 1)``.
    loss : callable
        ``loss(z) -> (value, dL/dz)`` for a scalar loss of the smoother output.
    step : float or sequence of float
        Relative step: ``lam`` entries are perturbed by ``step * lam_r`` and
        ``x`` entries by ``step * x_scale``. With several steps (a ladder,
        largest first) the deviation should shrink down the ladder; if it
        does not, a :class:`FiniteDifferenceWarning` flags likely cancellation.
    tolerance : float
        Pass threshold on the maximum per-entry relative deviation.

    Returns
    -------
    FDReport

    Notes
    -----
    Differences are taken in float64. Each perturbed system matrix is rounded
    when assembled, which shifts ``z`` by roughly ``cond * eps``; for high
    orders on sparse masks that noise, divided by the step, can swamp
    gradient entries that are exactly zero. Such deviations say nothing about
    the analytic gradient.

    """
    batch, op, lam = instance
    lam = np.array(np.broadcast_to(lam, (batch.n_series, op.n_rows)), dtype=np.float64)
    ctx = smooth_hetero(batch, op, lam)
    _, g_bar = loss(ctx.z)
    cot = vjp(ctx, g_bar)

    def value_at(values, weights):
        return loss(smooth_hetero(batch.with_values(values), op, weights).z)[0]

    steps = tuple(np.atleast_1d(step).astype(float))
    dev_lam, dev_x = [], []
    for h in steps:
        num_lam = np.zeros_like(lam)
        for idx in np.ndindex(lam.shape):
            dl = h * lam[idx]
            up, down = lam.copy(), lam.copy()
            up[idx] += dl
            down[idx] -= dl
            num_lam[idx] = (value_at(batch.values, up) - value_at(batch.values, down)) / (2 * dl)
        num_x = np.zeros_like(batch.values)
        dx = h * x_scale
        for idx in np.ndindex(batch.values.shape):
            up, down = batch.values.copy(), batch.values.copy()
            up[idx] += dx
            down[idx] -= dx
            num_x[idx] = (value_at(up, lam) - value_at(down, lam)) / (2 * dx)
        dev_lam.append(relative_deviation(cot.lam_bar, num_lam))
        dev_x.append(relative_deviation(cot.x_bar, num_x))

    totals = [max(a, b) for a, b in zip(dev_lam, dev_x)]
    monotone = all(later <= earlier for earlier, later in zip(totals, totals[1:]))
    if not monotone:
        warnings.warn(
            f'finite-difference deviation is not monotone in the step ladder {steps}: '
            f'{totals}; small steps are likely dominated by cancellation',
            FiniteDifferenceWarning,
            stacklevel=2,
        )
    best = min(totals)
    return FDReport(steps, tuple(dev_lam), tuple(dev_x), best, tolerance, best <= tolerance, monotone)
