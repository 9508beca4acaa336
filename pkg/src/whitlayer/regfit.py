"""Gradient-based fitting of smoothing weights.

A :class:`RegularizerModel` maps a batch of series to penalty weights
``lam`` of shape ``(batch, T - k - 1)``. Unconstrained outputs ``raw`` are
squashed into the open interval ``(lam_min, lam_max)`` by

    lam = lam_min + (lam_max - lam_min) * sigmoid(raw)

Three kinds are provided:

``scalar``
    One weight per series (or one shared by all series), broadcast over time.
``vector``
    A free weight per difference row, per series or shared.
``network``
    A small feed-forward network evaluated on a sliding window of samples
    around each difference stencil, with a sinusoidal encoding of the time.
    Trained once, it emits weights for unseen series in a single pass.

Fitting minimizes the masked reconstruction loss of :mod:`whitlayer.harness`
by backpropagating through the smoother VJP and the squashing map.
"""

import json
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import expit, logit

from .autodiff import vjp
from .errors import DivergenceError, DomainError, StructuralError
from .harness import DEFAULT_MASK_FRACTION, make_masking, masked_loss
from .smoother import LAMBDA_MAX, LAMBDA_MIN, smooth_hetero

LAMBDA_BOUNDS = (LAMBDA_MIN, LAMBDA_MAX)
KINDS = ('scalar', 'vector', 'network')
CHECKPOINT_FORMAT = 'whitlayer-regularizer'
CHECKPOINT_VERSION = 1


def squash(raw, bounds=LAMBDA_BOUNDS):
    """Map unconstrained values into the open interval ``bounds``.

    Results are nudged one ulp inside the bounds where the sigmoid saturates,
    so the output never touches either end.
    """
    lo, hi = bounds
    lam = lo + (hi - lo) * expit(np.asarray(raw, dtype=np.float64))
    return np.clip(lam, np.nextafter(lo, np.inf), np.nextafter(hi, -np.inf))


def squash_grad(raw, bounds=LAMBDA_BOUNDS):
    lo, hi = bounds
    s = expit(np.asarray(raw, dtype=np.float64))
    return (hi - lo) * s * (1.0 - s)


def unsquash(lam, bounds=LAMBDA_BOUNDS):
    """Inverse of :func:`squash` for ``lam`` strictly inside ``bounds``."""
    lo, hi = bounds
    lam = np.asarray(lam, dtype=np.float64)
    if np.any((lam <= lo) | (lam >= hi)):
        raise DomainError(f'lambda must lie strictly inside {bounds}')
    return logit((lam - lo) / (hi - lo))


@dataclass
class RegularizerModel:
    """Parametric source of penalty weights.

    Attributes
    ----------
    kind : {'scalar', 'vector', 'network'}
    order : int
        Difference order ``k + 1`` the weights are emitted for.
    params : dict of str to numpy.ndarray
        Unconstrained parameters. ``scalar``: ``raw`` of shape ``(n,)``;
        ``vector``: ``raw`` of shape ``(n, T - k - 1)`` where ``n`` is the
        number of series, or 1 when ``shared``; ``network``: ``W1``, ``b1``,
        ``w2``, ``b2``.
    bounds : (float, float)
    shared : bool
        Scalar and vector kinds only: one parameter set for all series.
    window, hidden, n_freq, period : network settings
        Window radius in samples, hidden width, number of sinusoidal time
        frequencies and the period (in time units) of the slowest one.
    seed : int
        Seed used to initialize the network weights.

    """

    kind: str
    order: int
    params: dict
    bounds: tuple = LAMBDA_BOUNDS
    shared: bool = False
    window: int = 5
    hidden: int = 16
    n_freq: int = 4
    period: float = 365.25
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f'kind must be one of {KINDS}, got {self.kind!r}')
        self.params = {k: np.array(v, dtype=np.float64) for k, v in self.params.items()}
        self.bounds = (float(self.bounds[0]), float(self.bounds[1]))

    def copy(self):
        return replace(self, params={k: v.copy() for k, v in self.params.items()})


def _init_raw(init_lambda, bounds):
    return 0.0 if init_lambda is None else float(unsquash(init_lambda, bounds))


def scalar_model(order, n_series=1, shared=False, init_lambda=None, bounds=LAMBDA_BOUNDS):
    """Homoscedastic model; ``init_lambda=None`` starts at the midpoint of ``bounds``."""
    size = 1 if shared else int(n_series)
    raw = np.full(size, _init_raw(init_lambda, bounds))
    return RegularizerModel('scalar', int(order), {'raw': raw}, bounds, shared)


def vector_model(order, n_rows, n_series=1, shared=False, init_lambda=None, bounds=LAMBDA_BOUNDS):
    """Free per-row weights; ``init_lambda`` may be a scalar or an array."""
    size = 1 if shared else int(n_series)
    raw = np.empty((size, int(n_rows)))
    raw[...] = 0.0 if init_lambda is None else unsquash(init_lambda, bounds)
    return RegularizerModel('vector', int(order), {'raw': raw}, bounds, shared)


def n_features(n_channels, order, window, n_freq):
    return (2 * window + order + 1) * (n_channels + 3) + 2 * n_freq


def network_model(order, n_channels, window=5, hidden=16, n_freq=4, period=365.25, seed=0,
                  init_lambda=None, bounds=LAMBDA_BOUNDS):
    """Windowed feed-forward regularizer with tanh hidden layer."""
    rng = np.random.default_rng(seed)
    nf = n_features(n_channels, order, window, n_freq)
    params = {
        'W1': rng.standard_normal((nf, hidden)) / np.sqrt(nf),
        'b1': np.zeros(hidden),
        'w2': np.zeros(hidden),
        'b2': np.array([_init_raw(init_lambda, bounds)]),
    }
    return RegularizerModel('network', int(order), params, bounds, False, int(window),
                            int(hidden), int(n_freq), float(period), int(seed))


def window_features(batch, order, window=5, n_freq=4, period=365.25):
    """Per-row input features of the network regularizer.

    For difference row ``r`` (stencil ``r .. r + order``) the window covers
    samples ``r - window .. r + order + window``. Each sample contributes its
    masked channel values, its observation flag, an in-range flag (zero for
    slots outside the series or in padding) and its time offset from ``t_r``
    in units of the series' median sampling step. ``2 * n_freq`` sinusoids
    of ``t_r`` are appended.

    Returns
    -------
    numpy.ndarray, shape (batch, T - order, n_features)

    """
    nb, nc, n = batch.values.shape
    nr = n - order
    offsets = np.arange(-window, order + window + 1)
    idx = np.arange(nr)[:, None] + offsets[None, :]
    idxc = np.clip(idx, 0, n - 1)
    inside = ((idx >= 0) & (idx < n))[None] & ~batch.padding()[:, idxc]
    inside = inside.astype(np.float64)
    obs = batch.mask[:, idxc] * inside
    vals = (batch.values * batch.mask[:, None, :])[:, :, idxc]
    vals = np.moveaxis(vals, 1, -1) * inside[..., None]

    steps = np.empty(nb)
    for b in range(nb):
        gaps = np.diff(batch.times[b, : batch.lengths[b]])
        steps[b] = np.median(gaps) if gaps.size else 1.0
    t_left = batch.times[:, :nr]
    dt = (batch.times[:, idxc] - t_left[:, :, None]) / steps[:, None, None] * inside

    freqs = np.arange(1, n_freq + 1)
    angle = 2 * np.pi * t_left[..., None] * freqs / period
    return np.concatenate(
        [vals.reshape(nb, nr, -1), obs, inside, dt, np.sin(angle), np.cos(angle)], axis=-1
    )


def _forward(model, params, batch):
    """Return raw outputs of shape (batch, T - k - 1) and a backward closure."""
    nb, n = batch.n_series, batch.n_times
    nr = n - model.order
    if model.kind == 'scalar':
        raw = params['raw']
        if raw.shape[0] not in (1, nb):
            raise StructuralError(f'model holds {raw.shape[0]} scalars for {nb} series')
        out = np.repeat(np.broadcast_to(raw, (nb,))[:, None], nr, axis=1)

        def backward(raw_bar):
            g = raw_bar.sum(axis=1)
            return {'raw': g.sum(keepdims=True) if raw.shape[0] == 1 and nb > 1 else g}

        return out, backward

    if model.kind == 'vector':
        raw = params['raw']
        if raw.shape[1] != nr or raw.shape[0] not in (1, nb):
            raise StructuralError(f'vector model of shape {raw.shape} cannot serve ({nb}, {nr})')
        out = np.array(np.broadcast_to(raw, (nb, nr)))

        def backward(raw_bar):
            return {'raw': raw_bar.sum(axis=0, keepdims=True) if raw.shape[0] == 1 and nb > 1
                    else raw_bar}

        return out, backward

    feats = window_features(batch, model.order, model.window, model.n_freq, model.period)
    if feats.shape[-1] != params['W1'].shape[0]:
        raise StructuralError('network input size does not match the batch channels')
    hidden = np.tanh(feats @ params['W1'] + params['b1'])
    out = hidden @ params['w2'] + params['b2'][0]

    def backward(raw_bar):
        d_hidden = raw_bar[..., None] * params['w2'] * (1.0 - hidden**2)
        return {
            'W1': np.einsum('brf,brh->fh', feats, d_hidden),
            'b1': d_hidden.sum(axis=(0, 1)),
            'w2': np.einsum('brh,br->h', hidden, raw_bar),
            'b2': np.array([raw_bar.sum()]),
        }

    return out, backward


def emit_lambda(model, batch):
    """Penalty weights of shape ``(batch, T - k - 1)``, strictly inside ``model.bounds``."""
    raw, _ = _forward(model, model.params, batch)
    return squash(raw, model.bounds)


def loss_and_grad(model, batch, op, plan, params=None, score_invalid=False):
    """Masked loss of the smoother driven by ``model`` and its parameter gradients.

    The smoother sees ``plan.fit_mask(batch.mask)``; the loss scores the
    held-out samples.
    """
    params = model.params if params is None else params
    fit_batch = batch.with_mask(plan.fit_mask(batch.mask))
    raw, backward = _forward(model, params, fit_batch)
    lam = squash(raw, model.bounds)
    ctx = smooth_hetero(fit_batch, op, lam)
    loss, g_bar = masked_loss(ctx.z, batch, plan, score_invalid=score_invalid)
    cot = vjp(ctx, g_bar)
    return loss, backward(cot.lam_bar * squash_grad(raw, model.bounds))


@dataclass
class OptimizerSpec:
    """First-order optimizer settings.

    ``method='sgd'`` uses heavy-ball momentum, ``v <- momentum * v + g`` and
    ``p <- p - lr * v``. ``method='adam'`` uses bias-corrected first and second
    moment estimates, ``p <- p - lr * m_hat / (sqrt(v_hat) + eps)``.
    """

    method: str = 'adam'
    lr: float = 0.1
    steps: int = 200
    momentum: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.method not in ('sgd', 'adam'):
            raise ValueError(f"method must be 'sgd' or 'adam', got {self.method!r}")


@dataclass
class LossSpec:
    """Masking protocol for fitting.

    A fresh plan is drawn every step when ``resample`` is set; a fixed
    ``plan`` overrides sampling altogether.
    """

    fraction: float = DEFAULT_MASK_FRACTION
    resample: bool = True
    score_invalid: bool = False
    plan: object = None


def init_optimizer_state(params):
    return {'step': 0,
            'm': {k: np.zeros_like(v) for k, v in params.items()},
            'v': {k: np.zeros_like(v) for k, v in params.items()}}


def optimizer_step(params, grads, state, spec):
    """Apply one optimizer update; returns new ``(params, state)``.

    Raises
    ------
    FloatingPointError
        If any gradient entry is not finite; the message names the step index.

    """
    step = state['step']
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f'non-finite gradient for {name!r} at step {step}')
    new_params, m_new, v_new = {}, {}, {}
    if spec.method == 'sgd':
        for name, p in params.items():
            m_new[name] = spec.momentum * state['m'][name] + grads[name]
            new_params[name] = p - spec.lr * m_new[name]
            v_new[name] = state['v'][name]
    else:
        t = step + 1
        for name, p in params.items():
            g = grads[name]
            m_new[name] = spec.beta1 * state['m'][name] + (1 - spec.beta1) * g
            v_new[name] = spec.beta2 * state['v'][name] + (1 - spec.beta2) * g * g
            m_hat = m_new[name] / (1 - spec.beta1**t)
            v_hat = v_new[name] / (1 - spec.beta2**t)
            new_params[name] = p - spec.lr * m_hat / (np.sqrt(v_hat) + spec.eps)
    return new_params, {'step': step + 1, 'm': m_new, 'v': v_new}


DIVERGENCE_FACTOR = 10.0
DIVERGENCE_PATIENCE = 50


def fit(model, batch, op, loss_spec=None, optimizer_spec=None):
    """Fit ``model`` by minimizing the masked reconstruction loss.

    Parameters
    ----------
    model : RegularizerModel
        Initial model; not modified.
    batch : TimeSeriesBatch
        Standardized training batch.
    op : DifferenceOperator
        Operator on the batch's grids, of order ``model.order``.
    loss_spec : LossSpec, optional
    optimizer_spec : OptimizerSpec, optional

    Returns
    -------
    fitted : RegularizerModel
    trace : numpy.ndarray, shape (steps + 1,)
        Loss before each update, plus the loss after the last one.

    Raises
    ------
    DivergenceError
        If the loss stays above ten times its initial value for 50
        consecutive steps.

    """
    loss_spec = LossSpec() if loss_spec is None else loss_spec
    spec = OptimizerSpec() if optimizer_spec is None else optimizer_spec
    if op.order != model.order:
        raise StructuralError(f'operator order {op.order} differs from model order {model.order}')
    rng = np.random.default_rng(spec.seed)

    def draw_plan():
        if loss_spec.plan is not None:
            return loss_spec.plan
        return make_masking(batch, loss_spec.fraction, rng, model.order)

    params = {k: v.copy() for k, v in model.params.items()}
    state = init_optimizer_state(params)
    plan = draw_plan()
    trace = []
    above = 0
    for step in range(spec.steps + 1):
        if step and loss_spec.resample:
            plan = draw_plan()
        loss, grads = loss_and_grad(model, batch, op, plan, params, loss_spec.score_invalid)
        trace.append(loss)
        if step == spec.steps:
            break
        above = above + 1 if loss > DIVERGENCE_FACTOR * trace[0] else 0
        if above >= DIVERGENCE_PATIENCE or not np.isfinite(loss):
            raise DivergenceError(
                f'loss diverged at step {step}: {loss:.6g} vs initial {trace[0]:.6g}',
                {'step': step, 'initial_loss': trace[0], 'recent_losses': trace[-DIVERGENCE_PATIENCE:],
                 'lr': spec.lr, 'method': spec.method},
            )
        params, state = optimizer_step(params, grads, state, spec)
    return replace(model, params=params), np.asarray(trace)


def save_checkpoint(model, path):
    """Write ``model`` as a versioned JSON document (floats round-trip exactly)."""
    doc = {
        'format': CHECKPOINT_FORMAT,
        'version': CHECKPOINT_VERSION,
        'kind': model.kind,
        'order': model.order,
        'bounds': list(model.bounds),
        'shared': model.shared,
        'window': model.window,
        'hidden': model.hidden,
        'n_freq': model.n_freq,
        'period': model.period,
        'seed': model.seed,
        'params': {k: {'shape': list(v.shape), 'data': v.ravel().tolist()}
                   for k, v in sorted(model.params.items())},
    }
    with open(path, 'w', encoding='utf-8') as fh:
        json.dump(doc, fh, indent=1)


def load_checkpoint(path):
    with open(path, encoding='utf-8') as fh:
        doc = json.load(fh)
    if doc.get('format') != CHECKPOINT_FORMAT:
        raise ValueError(f'{path} is not a regularizer checkpoint')
    if doc.get('version') != CHECKPOINT_VERSION:
        raise ValueError(f'unsupported checkpoint version {doc.get("version")}')
    params = {k: np.array(v['data'], dtype=np.float64).reshape(v['shape'])
              for k, v in doc['params'].items()}
    return RegularizerModel(doc['kind'], doc['order'], params, tuple(doc['bounds']),
                            doc['shared'], doc['window'], doc['hidden'], doc['n_freq'],
                            doc['period'], doc['seed'])
