"""Training and evaluation protocol around the smoother.

Covers per-channel standardization, random masking of observed samples,
the masked reconstruction loss used for fitting, the MSE / MaxE reconstruction
metrics and a synthetic generator of series with a high-noise time window.
"""

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, StructuralError

DEFAULT_MASK_FRACTION = 0.1


@dataclass(frozen=True)
class Standardizer:
    """Per-channel affine map ``(x - mean) / scale`` fitted on observed samples."""

    mean: np.ndarray
    scale: np.ndarray

    def transform(self, values):
        return (values - self.mean[:, None]) / self.scale[:, None]

    def inverse(self, values):
        return values * self.scale[:, None] + self.mean[:, None]


def standardize(batch):
    """Standardize each channel to zero mean and unit variance.

    Statistics use observed (mask 1) samples only, pooled over all series.

    Returns
    -------
    (TimeSeriesBatch, Standardizer)

    Raises
    ------
    DomainError
        If a channel has zero variance over the observed samples.

    """
    observed = batch.mask.astype(bool)
    if not observed.any():
        raise DomainError('cannot standardize a batch without observed samples')
    # (channels, n_observed)
    obs = np.moveaxis(batch.values, 1, 0)[:, observed]
    mean = obs.mean(axis=1)
    scale = obs.std(axis=1)
    for c in np.flatnonzero(~(scale > 0)):
        raise DomainError(f'channel {int(c)} has zero variance over observed samples')
    stats = Standardizer(mean, scale)
    return batch.with_values(stats.transform(batch.values)), stats


@dataclass(frozen=True)
class MaskingPlan:
    """Observed samples hidden from the smoother and scored by the loss.

    Attributes
    ----------
    seed : int or None
    fraction : float
    indices : tuple of numpy.ndarray
        Per series, sorted time indices of the newly masked samples.
    held_out : numpy.ndarray of bool, shape (batch, T)

    """

    seed: object
    fraction: float
    indices: tuple
    held_out: np.ndarray = field(repr=False)

    def fit_mask(self, mask):
        """Observation mask with the held-out samples removed."""
        return np.where(self.held_out, 0.0, mask)

    @property
    def n_masked(self):
        return int(self.held_out.sum())


def make_masking(batch, fraction=DEFAULT_MASK_FRACTION, seed=None, order=2):
    """Randomly hide a fraction of each series' observed samples.

    Parameters
    ----------
    batch : TimeSeriesBatch
    fraction : float
        Fraction in ``[0, 1)`` of the observed samples to hide, rounded per series.
    seed : int, numpy.random.Generator or None
    order : int
        Difference order; at least ``order + 1`` observed samples must remain.

    Raises
    ------
    DomainError
        If the fraction is invalid or would leave too few observed samples.

    """
    if not 0 <= fraction < 1:
        raise DomainError(f'mask fraction must lie in [0, 1), got {fraction}')
    rng = np.random.default_rng(seed)
    held_out = np.zeros(batch.mask.shape, dtype=bool)
    indices = []
    for b in range(batch.n_series):
        observed = np.flatnonzero(batch.mask[b])
        count = int(round(fraction * observed.size))
        if observed.size - count < order + 1:
            raise DomainError(
                f'masking {count} of {observed.size} samples in series {b} leaves fewer '
                f'than {order + 1} observed samples'
            )
        chosen = np.sort(rng.choice(observed, size=count, replace=False)) if count else observed[:0]
        held_out[b, chosen] = True
        indices.append(chosen)
    return MaskingPlan(seed if isinstance(seed, (int, np.integer)) else None, fraction,
                       tuple(indices), held_out)


def nearest_observed_targets(batch):
    """Reference values taking, at every slot, the nearest observed sample by time."""
    targets = batch.values.copy()
    for b in range(batch.n_series):
        observed = np.flatnonzero(batch.mask[b])
        if observed.size == 0:
            continue
        t_obs = batch.times[b, observed]
        pos = np.searchsorted(t_obs, batch.times[b])
        left = np.clip(pos - 1, 0, observed.size - 1)
        right = np.clip(pos, 0, observed.size - 1)
        t = batch.times[b]
        pick_left = np.abs(t - t_obs[left]) <= np.abs(t_obs[right] - t)
        nearest = observed[np.where(pick_left, left, right)]
        targets[b] = batch.values[b][:, nearest]
    return targets


def masked_loss(z, batch, plan, score_invalid=False):
    """Mean squared error of ``z`` at the held-out samples, with its gradient.

    Parameters
    ----------
    z : numpy.ndarray, shape (batch, channels, T)
        Output of a solve run with ``plan.fit_mask(batch.mask)``.
    batch : TimeSeriesBatch
        Original batch; held-out samples are scored against their true values.
    plan : MaskingPlan
    score_invalid : bool, optional
        Also score originally unobserved, non-padding slots against the
        nearest observed value by time.

    Returns
    -------
    loss : float
        Mean over scored slots and channels.
    g_bar : numpy.ndarray
        Gradient of ``loss`` with respect to ``z``.

    """
    z = np.asarray(z, dtype=np.float64)
    if z.shape != batch.values.shape:
        raise StructuralError(f'z has shape {z.shape}, expected {batch.values.shape}')
    scored = plan.held_out.copy()
    targets = batch.values
    if score_invalid:
        invalid = (batch.mask == 0) & ~batch.padding()
        if invalid.any():
            targets = np.where(invalid[:, None, :], nearest_observed_targets(batch), batch.values)
            scored |= invalid
    count = int(scored.sum()) * batch.n_channels
    if count == 0:
        raise DomainError('no scored samples: the masking plan is empty')
    resid = np.where(scored[:, None, :], z - targets, 0.0)
    loss = float((resid**2).sum() / count)
    return loss, 2.0 * resid / count


def metrics(z, x, mask, normalize='T'):
    """MSE and MaxE of ``z`` against ``x`` over the samples where ``mask`` is 1.

    ``MSE = T^-1 sum_t W_tt (z_t - x_t)^2`` and ``MaxE = max_t W_tt |z_t - x_t|``,
    averaged (MSE) or maximized (MaxE) over channels. Inputs are ``(T,)``,
    ``(channels, T)`` or ``(batch, channels, T)`` with a mask of the matching
    ``(T,)`` or ``(batch, T)`` shape; batched inputs give one value per series.

    Parameters
    ----------
    normalize : {'T', 'observed'}
        Divide by the series length ``T`` or by the number of masked-in samples.

    """
    z = np.asarray(z, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if z.shape != x.shape:
        raise StructuralError(f'z and x shapes differ: {z.shape} vs {x.shape}')
    if normalize not in ('T', 'observed'):
        raise ValueError("normalize must be 'T' or 'observed'")
    zz = z.reshape((1,) * (3 - z.ndim) + z.shape) if z.ndim < 3 else z
    xx = x.reshape(zz.shape)
    mm = np.atleast_2d(mask)
    if mm.shape != (zz.shape[0], zz.shape[2]):
        raise StructuralError(f'mask shape {mask.shape} does not match values {z.shape}')
    err = mm[:, None, :] * (zz - xx)
    if normalize == 'T':
        denom = np.full(zz.shape[0], float(zz.shape[2]))
    else:
        denom = mm.sum(axis=1)
    empty = mm.sum(axis=1) == 0
    if empty.any():
        warnings.warn(f'{int(empty.sum())} series have an all-zero mask; MSE and MaxE are 0',
                      stacklevel=2)
    sq = (err**2).sum(axis=2).mean(axis=1)
    mse = np.divide(sq, denom, out=np.zeros_like(sq), where=denom > 0)
    maxe = np.abs(err).max(axis=(1, 2))
    if z.ndim == 3:
        return mse, maxe
    return float(mse[0]), float(maxe[0])


@dataclass(frozen=True)
class EvalReport:
    """Reconstruction accuracy of one model kind at one difference order.

    ``maxe`` averages the per-series maxima; ``maxe_global`` is the maximum
    over all series.
    """

    model_kind: str
    order: int
    mse: float
    maxe: float
    seed: object = None
    maxe_global: float = float('nan')


def evaluate(z, x, mask, model_kind, order, seed=None, normalize='T'):
    """Build an :class:`EvalReport` from batched predictions."""
    mse, maxe = metrics(z, x, mask, normalize=normalize)
    return EvalReport(model_kind, int(order), float(np.mean(mse)), float(np.mean(maxe)), seed,
                      float(np.max(maxe)))


REPORT_COLUMNS = ('model_kind', 'order', 'mse', 'maxe', 'seed', 'maxe_global')


def write_reports(path, reports):
    """Write reports as CSV, one row per (model kind, order)."""
    with open(path, 'w', newline='', encoding='utf-8') as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_COLUMNS)
        for r in reports:
            writer.writerow([r.model_kind, r.order, repr(r.mse), repr(r.maxe),
                             '' if r.seed is None else r.seed, repr(r.maxe_global)])


def read_reports(path):
    out = []
    with open(path, newline='', encoding='utf-8') as fh:
        for row in csv.DictReader(fh):
            out.append(EvalReport(row['model_kind'], int(row['order']), float(row['mse']),
                                  float(row['maxe']), int(row['seed']) if row['seed'] else None,
                                  float(row['maxe_global'])))
    return out


def synth_truth(t):
    """Ground-truth curve of the synthetic generator.

    ``sin(2 pi t / 10) + 0.5 cos(2 pi t / 4)``; smooth on the default ``[0, 15]`` span.
    """
    t = np.asarray(t, dtype=np.float64)
    return np.sin(2 * np.pi * t / 10) + 0.5 * np.cos(2 * np.pi * t / 4)


def synth_hetero(seed, T=150, noise_window=(6.0, 10.0), sigma_low=0.02, sigma_high=0.5,
                 t_range=(0.0, 15.0), n_series=None):
    """Series with Gaussian noise that is stronger inside a time window.

    Parameters
    ----------
    seed : int or numpy.random.Generator
    T : int
        Number of evenly spaced samples over ``t_range``.
    noise_window : (float, float)
        Times between which the noise standard deviation is ``sigma_high``.
    sigma_low, sigma_high : float
        Noise standard deviations outside and inside the window.
    n_series : int or None
        Number of independent noise draws; ``None`` returns a single 1D series.

    Returns
    -------
    times : numpy.ndarray, shape (T,)
    truth : numpy.ndarray, shape (T,)
    noisy : numpy.ndarray, shape (T,) or (n_series, T)

    """
    lo, hi = noise_window
    t0, t1 = t_range
    if not (t0 <= lo < hi <= t1):
        raise DomainError(f'noise window {noise_window} must be an interval inside {t_range}')
    if not (0 < sigma_low <= sigma_high):
        raise DomainError('need 0 < sigma_low <= sigma_high')
    if T < 3:
        raise DomainError('T must be at least 3')
    rng = np.random.default_rng(seed)
    times = np.linspace(t0, t1, T)
    truth = synth_truth(times)
    sigma = np.where((times >= lo) & (times <= hi), sigma_high, sigma_low)
    shape = (T,) if n_series is None else (int(n_series), T)
    noisy = truth + sigma * rng.standard_normal(shape)
    return times, truth, noisy


def in_window(times, window):
    times = np.asarray(times)
    return (times >= window[0]) & (times <= window[1])


def sits_truth(times, phase, amplitude, base):
    """Seasonal reflectance-like curve: annual cycle plus a weaker semi-annual one."""
    w = 2 * np.pi / 365.25
    return base + amplitude * (np.sin(w * (times - phase)) + 0.3 * np.sin(2 * w * (times - phase)))


def synth_sits(seed, n_series=32, n_channels=2, span_days=730.0, revisit=5.0, keep_prob=0.85,
               invalid_prob=0.2, sigma=0.02, sigma_cloudy=0.08, cloudy_season=(300.0, 420.0)):
    """Irregular multichannel series resembling satellite reflectance time series.

    Each series has its own acquisition dates: a ``revisit``-day grid with a
    random offset from which acquisitions are kept with ``keep_prob``, so
    series have different lengths and are padded. A fraction
    ``invalid_prob`` of the kept acquisitions is flagged invalid (mask 0) and
    replaced by a bright cloud-like reading. Valid samples carry Gaussian noise
    of standard deviation ``sigma`` and ``sigma_cloudy`` inside
    ``cloudy_season`` (days).

    Returns
    -------
    batch : TimeSeriesBatch
    truth : numpy.ndarray, shape (n_series, n_channels, T)
        Noise-free curves on the same (padded) grids.

    """
    from .smoother import TimeSeriesBatch, pad_times

    rng = np.random.default_rng(seed)
    grids = []
    for _ in range(n_series):
        offset = rng.uniform(0, revisit)
        dates = np.arange(offset, span_days, revisit)
        keep = rng.random(dates.size) < keep_prob
        grids.append(dates[keep])
    length = max(g.size for g in grids)
    times = np.empty((n_series, length))
    values = np.zeros((n_series, n_channels, length))
    truth = np.zeros_like(values)
    mask = np.zeros((n_series, length))
    lengths = np.empty(n_series, dtype=np.int64)
    for b, grid in enumerate(grids):
        n = grid.size
        times[b] = pad_times(grid, length)
        lengths[b] = n
        phase = rng.uniform(0, 365.25)
        amplitude = rng.uniform(0.1, 0.3, size=n_channels)
        base = rng.uniform(0.2, 0.5, size=n_channels)
        truth[b] = sits_truth(times[b][None, :], phase, amplitude[:, None], base[:, None])
        noise_sd = np.where(in_window(grid, cloudy_season), sigma_cloudy, sigma)
        valid = rng.random(n) >= invalid_prob
        obs = truth[b, :, :n] + noise_sd * rng.standard_normal((n_channels, n))
        cloud = rng.uniform(0.4, 0.8, size=(n_channels, n))
        values[b, :, :n] = np.where(valid, obs, cloud)
        mask[b, :n] = valid
    return TimeSeriesBatch(times, values, mask, lengths), truth
