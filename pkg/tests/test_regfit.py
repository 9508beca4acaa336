import numpy as np
import pytest

from whitlayer import bandmat, regfit
from whitlayer.diffop import build_diffop
from whitlayer.errors import DivergenceError, DomainError, StructuralError
from whitlayer.experiments import grid_search_scalar, noisy_window_experiment
from whitlayer.harness import make_masking, masked_loss, synth_hetero, synth_sits, standardize
from whitlayer.regfit import (LAMBDA_BOUNDS, LossSpec, OptimizerSpec, emit_lambda, fit,
                              init_optimizer_state, load_checkpoint, loss_and_grad,
                              network_model, optimizer_step, save_checkpoint, scalar_model,
                              squash, squash_grad, unsquash, vector_model, window_features)
from whitlayer.smoother import TimeSeriesBatch, smooth_hetero

LO, HI = LAMBDA_BOUNDS


def homo_batch(seed, n_series=8, T=120, sigma=0.2):
    times, _, noisy = synth_hetero(seed, T, sigma_low=sigma, sigma_high=sigma, n_series=n_series)
    batch = TimeSeriesBatch(np.tile(times, (n_series, 1)), noisy, np.ones_like(noisy))
    return batch, build_diffop(times, 2)


def sits_batch(seed, n_series=6, order=2):
    batch, _ = synth_sits(seed, n_series=n_series, span_days=365.0)
    batch, _ = standardize(batch)
    return batch, build_diffop(batch.times, order)


class TestSquash:
    def test_midpoint(self):
        assert squash(0.0) == LO + (HI - LO) / 2

    def test_limits(self):
        assert LO < squash(-1e6) < LO * (1 + 1e-12)
        assert HI * (1 - 1e-12) < squash(1e6) < HI

    def test_bounds_over_many_raw_values(self, rng):
        raw = np.concatenate([rng.standard_normal(50_000) * 50, rng.uniform(-1e3, 1e3, 50_000)])
        lam = squash(raw)
        assert np.all((lam > LO) & (lam < HI))

    def test_inverse(self, rng):
        raw = rng.uniform(-15, 15, 100)
        np.testing.assert_allclose(unsquash(squash(raw)), raw, rtol=1e-6, atol=1e-6)
        with pytest.raises(DomainError):
            unsquash(HI)

    def test_gradient(self, rng):
        raw = rng.uniform(-5, 5, 20)
        h = 1e-6
        numeric = (squash(raw + h) - squash(raw - h)) / (2 * h)
        np.testing.assert_allclose(squash_grad(raw), numeric, rtol=1e-6)


class TestOptimizer:
    def test_plain_step(self):
        spec = OptimizerSpec('sgd', lr=0.1)
        params = {'p': np.array([1.0])}
        new, _ = optimizer_step(params, {'p': np.array([1.0])}, init_optimizer_state(params), spec)
        assert new['p'][0] == pytest.approx(0.9, abs=1e-15)

    @pytest.mark.parametrize('method', ['sgd', 'adam'])
    def test_zero_gradient(self, method):
        params = {'p': np.array([0.3, -2.0])}
        new, _ = optimizer_step(params, {'p': np.zeros(2)}, init_optimizer_state(params),
                                OptimizerSpec(method, lr=0.5, momentum=0.9))
        np.testing.assert_array_equal(new['p'], params['p'])

    def test_momentum_factor(self):
        spec = OptimizerSpec('sgd', lr=0.1, momentum=0.9)
        p0 = {'p': np.array([0.0])}
        state = init_optimizer_state(p0)
        g = {'p': np.array([1.0])}
        p1, state = optimizer_step(p0, g, state, spec)
        p2, _ = optimizer_step(p1, g, state, spec)
        first, second = p0['p'] - p1['p'], p1['p'] - p2['p']
        assert second[0] / first[0] == pytest.approx(1.9, rel=1e-12)

    def test_adam_first_step_is_lr(self):
        params = {'p': np.array([1.0, 1.0])}
        new, _ = optimizer_step(params, {'p': np.array([3.0, -0.01])},
                                init_optimizer_state(params), OptimizerSpec('adam', lr=0.05))
        np.testing.assert_allclose(params['p'] - new['p'], [0.05, -0.05], rtol=1e-6)

    def test_nonfinite_gradient(self):
        params = {'p': np.zeros(2)}
        state = {**init_optimizer_state(params), 'step': 7}
        with pytest.raises(FloatingPointError, match='step 7'):
            optimizer_step(params, {'p': np.array([0.0, np.nan])}, state, OptimizerSpec())

    def test_unknown_method(self):
        with pytest.raises(ValueError):
            OptimizerSpec('rmsprop')


class TestModels:
    def test_scalar_broadcast(self):
        batch, op = homo_batch(0, n_series=3)
        lam = emit_lambda(scalar_model(2, 3, init_lambda=5.0), batch)
        assert lam.shape == (3, op.n_rows)
        np.testing.assert_allclose(lam, 5.0, rtol=1e-9)

    def test_vector_shape_checked(self):
        batch, _ = homo_batch(0, n_series=2)
        with pytest.raises(StructuralError):
            emit_lambda(vector_model(2, 10, 2), batch)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            regfit.RegularizerModel('transformer', 2, {})

    def test_network_features_shape(self):
        batch, op = sits_batch(1)
        feats = window_features(batch, 2)
        assert feats.shape == (batch.n_series, op.n_rows, regfit.n_features(2, 2, 5, 4))
        assert np.all(np.isfinite(feats))

    def test_network_no_cross_series_leakage(self, rng):
        batch, _ = sits_batch(2, n_series=4)
        model = network_model(2, batch.n_channels, seed=3, init_lambda=10.0)
        model.params['w2'] = rng.standard_normal(model.hidden)
        lam = emit_lambda(model, batch)
        values = batch.values.copy()
        values[1:] = rng.standard_normal(values[1:].shape)
        altered = emit_lambda(model, batch.with_values(values))
        np.testing.assert_array_equal(altered[0], lam[0])
        assert np.any(altered[1] != lam[1])
        np.testing.assert_array_equal(emit_lambda(model, batch.subset([0]))[0], lam[0])

    def test_checkpoint_round_trip(self, tmp_path, rng):
        for model in (scalar_model(3, 4, init_lambda=2.0),
                      vector_model(2, 7, shared=True, init_lambda=rng.uniform(1, 9, 7)),
                      network_model(4, 2, window=3, hidden=5, seed=9)):
            model.params = {k: v + rng.standard_normal(v.shape) for k, v in model.params.items()}
            path = tmp_path / f'{model.kind}.json'
            save_checkpoint(model, path)
            back = load_checkpoint(path)
            assert (back.kind, back.order, back.bounds, back.shared, back.window, back.hidden,
                    back.seed) == (model.kind, model.order, model.bounds, model.shared,
                                   model.window, model.hidden, model.seed)
            for name, value in model.params.items():
                np.testing.assert_array_equal(back.params[name], value)

    def test_checkpoint_rejects_other_json(self, tmp_path):
        path = tmp_path / 'x.json'
        path.write_text('{"format": "other"}')
        with pytest.raises(ValueError):
            load_checkpoint(path)


def fd_param_grad(model, batch, op, plan, name, index, h):
    def value(delta):
        params = {k: v.copy() for k, v in model.params.items()}
        params[name][index] += delta
        return loss_and_grad(model, batch, op, plan, params)[0]

    return (value(h) - value(-h)) / (2 * h)


class TestGradients:
    def test_scalar_through_squash(self):
        batch, op = homo_batch(3, n_series=2)
        plan = make_masking(batch, 0.2, seed=4)
        model = scalar_model(2, 2, init_lambda=3.0)
        _, grads = loss_and_grad(model, batch, op, plan)
        for i in range(2):
            numeric = fd_param_grad(model, batch, op, plan, 'raw', i, 1e-4)
            assert grads['raw'][i] == pytest.approx(numeric, rel=1e-4)

    def test_scalar_dlam_matches_fd(self):
        # the chain through squash recovers dL/dlam itself
        batch, op = homo_batch(5, n_series=1)
        plan = make_masking(batch, 0.2, seed=6)
        model = scalar_model(2, 1, init_lambda=40.0)
        _, grads = loss_and_grad(model, batch, op, plan)
        analytic = grads['raw'][0] / squash_grad(model.params['raw'])[0]
        fit_batch = batch.with_mask(plan.fit_mask(batch.mask))

        def value(lam):
            z = smooth_hetero(fit_batch, op, np.full((1, op.n_rows), lam)).z
            return masked_loss(z, batch, plan)[0]

        numeric = (value(40.0 * (1 + 1e-4)) - value(40.0 * (1 - 1e-4))) / (2 * 40.0 * 1e-4)
        assert analytic == pytest.approx(numeric, rel=1e-4)

    def test_network_parameters(self, rng):
        batch, op = sits_batch(7, n_series=3)
        plan = make_masking(batch, 0.2, seed=8)
        model = network_model(2, batch.n_channels, hidden=4, seed=1, init_lambda=20.0)
        model.params['w2'] = 0.5 * rng.standard_normal(4)
        _, grads = loss_and_grad(model, batch, op, plan)
        checks = [('b2', (0,)), ('w2', (1,)), ('b1', (2,)), ('W1', (3, 0)), ('W1', (10, 3))]
        for name, index in checks:
            numeric = fd_param_grad(model, batch, op, plan, name, index, 1e-5)
            analytic = grads[name][index]
            assert abs(analytic - numeric) <= 1e-4 * max(abs(numeric), 1e-8), (name, index)

    def test_shared_vector_sums_series(self):
        batch, op = homo_batch(9, n_series=3)
        plan = make_masking(batch, 0.2, seed=1)
        per = vector_model(2, op.n_rows, 3, init_lambda=7.0)
        shared = vector_model(2, op.n_rows, shared=True, init_lambda=7.0)
        _, g_per = loss_and_grad(per, batch, op, plan)
        _, g_shared = loss_and_grad(shared, batch, op, plan)
        np.testing.assert_allclose(g_shared['raw'][0], g_per['raw'].sum(axis=0), rtol=1e-12)


class TestFit:
    def test_zero_steps_identity(self):
        batch, op = homo_batch(0, n_series=2)
        model = scalar_model(2, 2, init_lambda=4.0)
        fitted, trace = fit(model, batch, op, optimizer_spec=OptimizerSpec(steps=0))
        np.testing.assert_array_equal(fitted.params['raw'], model.params['raw'])
        assert trace.shape == (1,)

    def test_order_mismatch(self):
        batch, op = homo_batch(0, n_series=1)
        with pytest.raises(StructuralError):
            fit(scalar_model(3), batch, op)

    def test_deterministic_trace(self):
        batch, op = homo_batch(1, n_series=3)
        spec = OptimizerSpec('adam', lr=0.2, steps=15, seed=11)
        runs = [fit(scalar_model(2, 3), batch, op, LossSpec(fraction=0.2), spec) for _ in range(2)]
        np.testing.assert_array_equal(runs[0][1], runs[1][1])
        np.testing.assert_array_equal(runs[0][0].params['raw'], runs[1][0].params['raw'])

    def test_divergence_detector(self, monkeypatch):
        batch, op = homo_batch(0, n_series=1)
        calls = {'n': 0}

        def exploding(model, batch, op, plan, params=None, score_invalid=False):
            calls['n'] += 1
            return (1.0 if calls['n'] == 1 else 100.0), {'raw': np.zeros_like(params['raw'])}

        monkeypatch.setattr(regfit, 'loss_and_grad', exploding)
        with pytest.raises(DivergenceError) as err:
            fit(scalar_model(2), batch, op, optimizer_spec=OptimizerSpec(steps=200))
        assert err.value.diagnostics['step'] == regfit.DIVERGENCE_PATIENCE
        assert err.value.diagnostics['initial_loss'] == 1.0
        assert calls['n'] == regfit.DIVERGENCE_PATIENCE + 1

    def test_scalar_near_grid_optimum(self):
        batch, op = homo_batch(21, n_series=8)
        plan = make_masking(batch, 0.2, seed=22)
        grid = 10.0 ** np.arange(-2.0, 6.01, 0.25)
        best, _ = grid_search_scalar(batch, op, [plan], grid)
        fitted, trace = fit(scalar_model(2, shared=True), batch, op, LossSpec(plan=plan),
                            OptimizerSpec('adam', lr=0.3, steps=150, seed=0))
        lam = float(emit_lambda(fitted, batch)[0, 0])
        assert abs(np.log10(lam) - np.log10(best)) <= 1.0
        assert trace[-1] < trace[0]

    def test_amortized_inference_single_solve(self):
        train, op = sits_batch(30, n_series=4)
        model = network_model(2, train.n_channels, hidden=6, seed=2, init_lambda=30.0)
        fitted, _ = fit(model, train, op, LossSpec(fraction=0.2),
                        OptimizerSpec('adam', lr=0.01, steps=5, seed=1))
        test, test_op = sits_batch(31, n_series=3)
        bandmat.reset_factorization_count()
        ctx = smooth_hetero(test, test_op, emit_lambda(fitted, test))
        assert bandmat.factorization_count() == test.n_series
        assert np.all(np.isfinite(ctx.z))


def test_vector_beats_scalar_on_noisy_window():
    res = noisy_window_experiment(0, steps=150)
    assert res.masked_mse_hetero < res.masked_mse_homo
    assert res.window_mse_hetero < res.window_mse_homo
    # weights are higher where the noise is stronger
    inside = (res.times[:-2] >= 6.0) & (res.times[2:] <= 10.0)
    outside = (res.times[2:] < 5.0) | (res.times[:-2] > 11.0)
    assert np.median(res.lam_vector[inside]) > np.median(res.lam_vector[outside])
