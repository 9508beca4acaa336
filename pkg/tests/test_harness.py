import warnings

import numpy as np
import pytest

from whitlayer.diffop import build_diffop
from whitlayer.errors import DomainError, StructuralError
from whitlayer.harness import (EvalReport, evaluate, in_window, make_masking, masked_loss,
                               metrics, nearest_observed_targets, read_reports, standardize,
                               synth_hetero, synth_sits, synth_truth, write_reports)
from whitlayer.regfit import LossSpec, OptimizerSpec, fit, scalar_model
from whitlayer.smoother import TimeSeriesBatch, smooth_hetero


def random_batch(rng, nb=3, channels=2, n=30, observed=0.8):
    times = np.cumsum(rng.uniform(0.5, 2.0, (nb, n)), axis=1)
    mask = (rng.random((nb, n)) < observed).astype(float)
    values = 3.0 + 2.0 * rng.standard_normal((nb, channels, n))
    return TimeSeriesBatch(times, values, mask)


class TestStandardize:
    def test_moments_and_round_trip(self, rng):
        batch = random_batch(rng)
        std, stats = standardize(batch)
        obs = np.moveaxis(std.values, 1, 0)[:, batch.mask.astype(bool)]
        assert np.abs(obs.mean(axis=1)).max() <= 1e-9
        assert np.abs(obs.var(axis=1) - 1).max() <= 1e-6
        assert np.abs(stats.inverse(std.values) - batch.values).max() <= 1e-9

    def test_statistics_ignore_unobserved(self, rng):
        batch = random_batch(rng)
        _, a = standardize(batch)
        hidden = np.where(batch.mask[:, None, :] == 0, 1e6, batch.values)
        _, b = standardize(batch.with_values(hidden))
        np.testing.assert_array_equal(a.mean, b.mean)
        np.testing.assert_array_equal(a.scale, b.scale)

    def test_already_standard(self, rng):
        x = rng.standard_normal((1, 1, 200))
        x = (x - x.mean()) / x.std()
        std, _ = standardize(TimeSeriesBatch(np.arange(200.0), x[0, 0], np.ones(200)))
        assert np.abs(std.values - x).max() <= 1e-9

    def test_constant_channel(self, rng):
        batch = random_batch(rng)
        values = batch.values.copy()
        values[:, 1] = 4.0
        with pytest.raises(DomainError, match='channel 1'):
            standardize(batch.with_values(values))


class TestMasking:
    def test_zero_fraction(self, rng):
        plan = make_masking(random_batch(rng), 0.0, seed=1)
        assert plan.n_masked == 0

    def test_subset_of_observed_and_reproducible(self, rng):
        batch = random_batch(rng)
        a = make_masking(batch, 0.3, seed=5)
        b = make_masking(batch, 0.3, seed=5)
        np.testing.assert_array_equal(a.held_out, b.held_out)
        assert np.all(batch.mask[a.held_out] == 1)
        for s, idx in enumerate(a.indices):
            np.testing.assert_array_equal(np.flatnonzero(a.held_out[s]), idx)
        np.testing.assert_array_equal(a.fit_mask(batch.mask), np.where(a.held_out, 0, batch.mask))

    def test_infeasible_fraction(self):
        # 4 observed, order 2: hiding 2 leaves k + 1 = 2 points
        batch = TimeSeriesBatch(np.arange(6.0), np.zeros(6), [1, 1, 0, 1, 1, 0])
        with pytest.raises(DomainError):
            make_masking(batch, 0.5, seed=0, order=2)
        assert make_masking(batch, 0.25, seed=0, order=2).n_masked == 1

    def test_bad_fraction(self, rng):
        with pytest.raises(DomainError):
            make_masking(random_batch(rng), 1.0)


class TestMaskedLoss:
    def test_exact_fit(self, rng):
        batch = random_batch(rng)
        plan = make_masking(batch, 0.2, seed=0)
        loss, g = masked_loss(batch.values, batch, plan)
        assert loss == 0 and not g.any()

    def test_single_position(self):
        batch = TimeSeriesBatch(np.arange(5.0), np.zeros(5), np.ones(5))
        plan = make_masking(batch, 0.2, seed=3)
        (t,) = plan.indices[0]
        z = np.zeros((1, 1, 5))
        z[0, 0, t] = 0.7
        loss, g = masked_loss(z, batch, plan)
        assert loss == pytest.approx(0.49)
        expected = np.zeros_like(z)
        expected[0, 0, t] = 1.4
        np.testing.assert_allclose(g, expected)

    @pytest.mark.parametrize('score_invalid', [False, True])
    def test_gradient_matches_fd(self, rng, score_invalid):
        batch = random_batch(rng)
        plan = make_masking(batch, 0.2, seed=2)
        z = rng.standard_normal(batch.values.shape)
        _, g = masked_loss(z, batch, plan, score_invalid)
        h = 1e-6
        for idx in [(0, 0, i) for i in range(batch.n_times)] + [(2, 1, 5)]:
            up, down = z.copy(), z.copy()
            up[idx] += h
            down[idx] -= h
            numeric = (masked_loss(up, batch, plan, score_invalid)[0]
                       - masked_loss(down, batch, plan, score_invalid)[0]) / (2 * h)
            assert abs(numeric - g[idx]) <= 1e-6 * max(1.0, abs(g[idx]))

    def test_invalid_targets_nearest_by_time(self):
        times = np.array([0.0, 1.0, 4.0, 5.0, 9.0])
        values = np.array([10.0, 20.0, 99.0, 40.0, 50.0])
        batch = TimeSeriesBatch(times, values, [1, 1, 0, 1, 1])
        targets = nearest_observed_targets(batch)
        # slot 2 (t = 4) is closest to t = 5
        assert targets[0, 0, 2] == 40.0
        plan = make_masking(batch, 0.0, seed=0)
        z = np.zeros((1, 1, 5))
        loss, g = masked_loss(z, batch, plan, score_invalid=True)
        assert loss == pytest.approx(1600.0)
        assert g[0, 0, 2] == pytest.approx(-80.0) and np.count_nonzero(g) == 1

    def test_padding_never_scored(self):
        batch = TimeSeriesBatch([[0.0, 1, 2, 3]], [[1.0, 2, 3, 0]], [[1, 0, 1, 0]], lengths=[3])
        plan = make_masking(batch, 0.0, seed=0, order=1)
        _, g = masked_loss(np.zeros((1, 1, 4)), batch, plan, score_invalid=True)
        assert g[0, 0, 3] == 0 and g[0, 0, 1] != 0

    def test_empty_plan(self, rng):
        batch = random_batch(rng)
        with pytest.raises(DomainError):
            masked_loss(batch.values, batch, make_masking(batch, 0.0, seed=0))

    def test_shape_checked(self, rng):
        batch = random_batch(rng)
        with pytest.raises(StructuralError):
            masked_loss(np.zeros((1, 1, 3)), batch, make_masking(batch, 0.2, seed=0))


class TestMetrics:
    def test_identical(self, rng):
        x = rng.standard_normal(10)
        assert metrics(x, x, np.ones(10)) == (0.0, 0.0)

    def test_two_point_example(self):
        assert metrics(np.array([1.0, 0.0]), np.zeros(2), np.ones(2)) == (0.5, 1.0)

    def test_divides_by_length(self):
        z, x, mask = np.array([2.0, 0, 0, 0]), np.zeros(4), np.array([1.0, 0, 0, 1])
        assert metrics(z, x, mask) == (1.0, 2.0)
        assert metrics(z, x, mask, normalize='observed') == (2.0, 2.0)

    def test_mask_excludes(self):
        assert metrics(np.array([5.0, 1.0]), np.zeros(2), np.array([0.0, 1.0])) == (0.5, 1.0)

    def test_all_masked_warns(self):
        with pytest.warns(UserWarning, match='all-zero mask'):
            assert metrics(np.ones(3), np.zeros(3), np.zeros(3)) == (0.0, 0.0)

    def test_batched_and_channels(self, rng):
        z = rng.standard_normal((3, 2, 8))
        x = rng.standard_normal((3, 2, 8))
        mask = (rng.random((3, 8)) < 0.7).astype(float)
        mse, maxe = metrics(z, x, mask)
        for b in range(3):
            err = mask[b] * (z[b] - x[b])
            assert mse[b] == pytest.approx((err**2).sum() / (2 * 8))
            assert maxe[b] == np.abs(err).max()

    def test_shape_mismatch(self):
        with pytest.raises(StructuralError):
            metrics(np.zeros(3), np.zeros(4), np.ones(3))

    def test_evaluate_averages(self, rng):
        z = rng.standard_normal((4, 1, 6))
        x = np.zeros_like(z)
        mask = np.ones((4, 6))
        rep = evaluate(z, x, mask, 'homoscedastic', 2, seed=3)
        mse, maxe = metrics(z, x, mask)
        assert rep.mse == pytest.approx(mse.mean()) and rep.maxe == pytest.approx(maxe.mean())
        assert rep.maxe_global == maxe.max() and rep.mse >= 0


def test_reports_csv_round_trip(tmp_path):
    reports = [EvalReport('homoscedastic', 2, 0.1 / 3, 1.25, 7, 2.5),
               EvalReport('heteroscedastic', 4, 1e-17, 0.0, None, 0.0)]
    path = tmp_path / 'reports.csv'
    write_reports(path, reports)
    assert path.read_text().splitlines()[0] == 'model_kind,order,mse,maxe,seed,maxe_global'
    assert read_reports(path) == reports


class TestSynthetic:
    def test_truth_curve(self):
        t = np.array([0.0, 2.5, 5.0])
        np.testing.assert_allclose(synth_truth(t), [0.5, 1 + 0.5 * np.cos(1.25 * np.pi), 0.0],
                                   atol=1e-12)

    def test_noise_variance_ratio(self):
        times, truth, noisy = synth_hetero(0, n_series=1000)
        resid = noisy - truth
        win = in_window(times, (6.0, 10.0))
        ratio = resid[:, win].var() / resid[:, ~win].var()
        assert ratio == pytest.approx((0.5 / 0.02) ** 2, rel=0.05)

    def test_homoscedastic_special_case(self):
        times, truth, noisy = synth_hetero(1, sigma_low=0.3, sigma_high=0.3, n_series=1000)
        resid = noisy - truth
        win = in_window(times, (6.0, 10.0))
        assert resid[:, win].var() / resid[:, ~win].var() == pytest.approx(1.0, rel=0.05)

    def test_deterministic(self):
        np.testing.assert_array_equal(synth_hetero(4)[2], synth_hetero(4)[2])
        assert synth_hetero(4)[2].shape == (150,)

    @pytest.mark.parametrize('kwargs', [{'noise_window': (10.0, 6.0)},
                                        {'noise_window': (6.0, 20.0)},
                                        {'sigma_low': 0.5, 'sigma_high': 0.1},
                                        {'sigma_low': 0.0}])
    def test_invalid(self, kwargs):
        with pytest.raises(DomainError):
            synth_hetero(0, **kwargs)

    def test_sits_structure(self):
        batch, truth = synth_sits(3, n_series=5)
        assert truth.shape == batch.values.shape
        assert len(set(batch.lengths.tolist())) > 1
        pad = batch.padding()
        assert np.all(batch.mask[pad] == 0)
        assert np.all(np.diff(batch.times, axis=1) > 0)
        real = ~pad
        assert 0.6 < batch.mask[real].mean() < 0.95


def test_heldout_values_never_read(rng):
    batch = random_batch(rng, nb=2)
    plan = make_masking(batch, 0.3, seed=1)
    fit_batch = batch.with_mask(plan.fit_mask(batch.mask))
    op = build_diffop(batch.times, 2)
    lam = np.full((2, op.n_rows), 3.0)
    z = smooth_hetero(fit_batch, op, lam).z
    scrambled = np.where(plan.held_out[:, None, :], 1e9, batch.values)
    np.testing.assert_array_equal(smooth_hetero(fit_batch.with_values(scrambled), op, lam).z, z)


def test_scalar_fit_reduces_loss():
    wins = 0
    for seed in range(10):
        times, _, noisy = synth_hetero(seed, T=100, n_series=4)
        batch = TimeSeriesBatch(np.tile(times, (4, 1)), noisy, np.ones_like(noisy))
        plan = make_masking(batch, 0.2, seed=seed)
        with warnings.catch_warnings():
            warnings.simplefilter('error')
            _, trace = fit(scalar_model(2, shared=True), batch, build_diffop(times, 2),
                           LossSpec(plan=plan), OptimizerSpec('adam', lr=0.3, steps=60, seed=seed))
        wins += trace[-1] < trace[0]
    assert wins >= 9
