import time
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import example, given, settings
from hypothesis import strategies as st

from oracles import dense_solve_refined, first_nonpositive_minor, random_spd_band
from whitlayer import bandmat
from whitlayer.bandmat import (BandMatrix, band_from_dense, band_matvec, band_to_dense,
                               banded_cholesky_inplace, solve_factored)
from whitlayer.errors import NotPositiveDefinite, StructuralError

EPS = np.finfo(float).eps
OMEGA3 = np.array([[4.0, 2, 0], [2, 5, 2], [0, 2, 5]])


def factor_of(a, p):
    return banded_cholesky_inplace(band_from_dense(a, p))


class TestStorage:
    def test_tridiagonal_layout(self):
        a = np.diag([11.0, 22, 33, 44]) + np.diag([21.0, 32, 43], -1) + np.diag([21.0, 32, 43], 1)
        m = band_from_dense(a, 1)
        np.testing.assert_array_equal(m.bands, [[11, 22, 33, 44], [21, 32, 43, 0]])
        assert m.n == 4 and m.bandwidth == 1 and m.state == 'raw'

    def test_identity_bandwidth_zero(self):
        np.testing.assert_array_equal(band_from_dense(np.eye(3), 0).bands, [[1, 1, 1]])

    def test_out_of_band_entry(self):
        a = np.eye(4)
        a[3, 0] = a[0, 3] = 0.5
        with pytest.raises(StructuralError):
            band_from_dense(a, 1)

    def test_asymmetry(self):
        a = np.eye(3)
        a[1, 0] = 1e-3
        with pytest.raises(StructuralError):
            band_from_dense(a, 1)

    def test_bandwidth_too_large(self):
        with pytest.raises(StructuralError):
            band_from_dense(np.eye(3), 3)

    def test_round_trip_exact(self, rng):
        a = random_spd_band(rng, 20, 3)
        a = (a + a.T) / 2
        np.testing.assert_array_equal(band_to_dense(band_from_dense(a, 3)), a)

    def test_batched_round_trip(self, rng):
        stack = np.stack([random_spd_band(rng, 9, 2) for _ in range(4)])
        stack = (stack + np.swapaxes(stack, 1, 2)) / 2
        m = band_from_dense(stack, 2)
        assert m.batched and m.batch_size == 4
        np.testing.assert_array_equal(band_to_dense(m), stack)
        np.testing.assert_array_equal(m.series(2).to_dense(), stack[2])

    def test_footprint_is_linear(self):
        m = BandMatrix(np.ones((3, 350)))
        assert m.nbytes == 3 * 350 * 8
        assert m.nbytes / (350 * 350 * 8) == pytest.approx(0.0086, abs=1e-4)


class TestCholesky:
    def test_identity(self):
        m = banded_cholesky_inplace(band_from_dense(np.eye(5), 2))
        np.testing.assert_array_equal(band_to_dense(m), np.eye(5))
        assert m.state == 'factored'

    def test_small_example(self):
        m = factor_of(OMEGA3, 1)
        np.testing.assert_allclose(m.bands, [[2, 2, 2], [1, 1, 0]], rtol=0, atol=1e-15)
        np.testing.assert_allclose(band_to_dense(m), np.linalg.cholesky(OMEGA3), atol=1e-15)

    def test_indefinite_fails_at_column_one(self):
        m = band_from_dense(np.array([[1.0, 2], [2, 1]]), 1)
        with pytest.raises(NotPositiveDefinite) as err:
            banded_cholesky_inplace(m)
        assert err.value.column == 1
        assert m.state == 'failed'

    def test_refactorization_rejected(self):
        m = factor_of(OMEGA3, 1)
        with pytest.raises(ValueError):
            banded_cholesky_inplace(m)

    def test_counter(self):
        bandmat.reset_factorization_count()
        bands = np.zeros((4, 2, 6))
        bands[:, 0] = 1.0
        banded_cholesky_inplace(BandMatrix(bands))
        assert bandmat.factorization_count() == 4

    def test_batched_failure_reports_series(self, rng):
        stack = np.stack([random_spd_band(rng, 8, 2) for _ in range(3)])
        stack = (stack + np.swapaxes(stack, 1, 2)) / 2
        stack[1, 4, 4] = -1.0
        with pytest.raises(NotPositiveDefinite) as err:
            banded_cholesky_inplace(band_from_dense(stack, 2))
        assert err.value.series == 1
        assert err.value.column == first_nonpositive_minor(stack[1])

    @settings(max_examples=60, deadline=None)
    @given(n=st.integers(2, 64), p=st.integers(0, 5), seed=st.integers(0, 2**32 - 1))
    def test_matches_dense_cholesky(self, n, p, seed):
        p = min(p, n - 1)
        a = random_spd_band(np.random.default_rng(seed), n, p)
        a = (a + a.T) / 2
        low = band_to_dense(factor_of(a, p))
        np.testing.assert_allclose(low, np.linalg.cholesky(a), rtol=0, atol=1e-10)

    def test_time_is_linear_in_n(self):
        def best(n):
            stack = np.tile(np.array([[6.0], [-4.0], [1.0]]), (32, 1, n))
            stack[:, 1, -1:] = 0
            stack[:, 2, -2:] = 0
            times = []
            for _ in range(5):
                work = stack.copy()
                start = time.perf_counter()
                banded_cholesky_inplace(BandMatrix._wrap(work))
                times.append(time.perf_counter() - start)
            return min(times)

        ns = np.array([512, 1024, 2048, 4096])
        slope = np.polyfit(np.log(ns), np.log([best(n) for n in ns]), 1)[0]
        assert 0.8 <= slope <= 1.3


class TestSolve:
    def test_identity(self):
        m = factor_of(np.eye(3), 0)
        np.testing.assert_array_equal(solve_factored(m, [3.0, -1, 2]), [3, -1, 2])

    def test_first_column(self):
        np.testing.assert_allclose(solve_factored(factor_of(OMEGA3, 1), [4.0, 2, 0]), [1, 0, 0],
                                   atol=1e-15)

    def test_tridiagonal_vs_dense(self, rng):
        a = random_spd_band(rng, 50, 1)
        a = (a + a.T) / 2
        b = rng.standard_normal(50)
        x = solve_factored(factor_of(a, 1), b)
        ref = np.linalg.solve(a, b)
        assert np.linalg.norm(x - ref) / np.linalg.norm(ref) <= 1e-10

    def test_many_rhs_and_no_mutation(self, rng):
        a = random_spd_band(rng, 12, 2)
        a = (a + a.T) / 2
        b = rng.standard_normal((3, 4, 12))
        b0 = b.copy()
        x = solve_factored(factor_of(a, 2), b)
        np.testing.assert_array_equal(b, b0)
        assert x.shape == b.shape
        np.testing.assert_allclose(np.einsum('ij,abj->abi', a, x), b, atol=1e-10)

    def test_length_mismatch(self):
        with pytest.raises(StructuralError):
            solve_factored(factor_of(OMEGA3, 1), np.ones(4))

    def test_needs_factor(self):
        with pytest.raises(ValueError):
            solve_factored(band_from_dense(OMEGA3, 1), np.ones(3))

    @settings(max_examples=60, deadline=None)
    @given(n=st.integers(2, 64), p=st.integers(0, 5), seed=st.integers(0, 2**32 - 1))
    @example(n=48, p=5, seed=11910430)  # cond ~8e6, |x| ~2e6
    def test_residual(self, n, p, seed):
        rng = np.random.default_rng(seed)
        p = min(p, n - 1)
        a = random_spd_band(rng, n, p)
        a = (a + a.T) / 2
        raw = band_from_dense(a, p)
        b = rng.standard_normal(n)
        x = solve_factored(banded_cholesky_inplace(raw.copy()), b)
        resid = np.linalg.norm(band_matvec(raw, x) - b)
        # backward stable: the residual is eps-small relative to |A| |x| + |b|
        scale = np.linalg.norm(a, 2) * np.linalg.norm(x) + np.linalg.norm(b)
        assert resid <= 64 * n * EPS * scale
        # relative to b alone this needs a well-conditioned system; a dense
        # LAPACK solve misses 1e-10 as well once cond(a) reaches ~1e7
        if np.linalg.cond(a) <= 1e5:
            assert resid <= 1e-10 * max(1.0, np.linalg.norm(b))


class TestMatvec:
    def test_identity(self, rng):
        v = rng.standard_normal(5)
        np.testing.assert_array_equal(band_matvec(band_from_dense(np.eye(5), 1), v), v)

    def test_column(self):
        np.testing.assert_array_equal(band_matvec(band_from_dense(OMEGA3, 1), [1.0, 0, 0]), [4, 2, 0])

    def test_vs_dense(self, rng):
        a = random_spd_band(rng, 40, 4)
        a = (a + a.T) / 2
        v = rng.standard_normal(40)
        out = band_matvec(band_from_dense(a, 4), v)
        assert np.abs(out - a @ v).max() <= 1e-12 * np.abs(a @ v).max()

    def test_length_mismatch(self):
        with pytest.raises(StructuralError):
            band_matvec(band_from_dense(OMEGA3, 1), np.ones(2))


class TestRefinement:
    def ill_conditioned(self, rng, n=40, p=3):
        # graded diagonal spreads the eigenvalues over about ten decades
        scale = np.diag(10.0 ** np.linspace(0, -5, n))
        a = scale @ random_spd_band(rng, n, p) @ scale
        return (a + a.T) / 2

    def test_matches_refined_dense_oracle(self, rng):
        a = self.ill_conditioned(rng)
        assert np.linalg.cond(a) > 1e9
        b = rng.standard_normal((3, 40))
        raw = band_from_dense(a, 3)
        x = bandmat.solve_refined(raw, banded_cholesky_inplace(raw.copy()), b)
        ref = dense_solve_refined(a, b)
        assert np.abs(x - ref).max() <= 4 * np.finfo(float).eps * np.abs(ref).max()

    def test_refinement_beats_plain_solve(self, rng):
        a = self.ill_conditioned(rng)
        b = rng.standard_normal(40)
        raw = band_from_dense(a, 3)
        factor = banded_cholesky_inplace(raw.copy())
        ref = dense_solve_refined(a, b)
        plain = np.abs(solve_factored(factor, b) - ref).max()
        refined = np.abs(bandmat.solve_refined(raw, factor, b) - ref).max()
        assert refined < plain

    def test_split_iterate_sums_to_solution(self, rng):
        a = self.ill_conditioned(rng, n=12, p=2)
        raw = band_from_dense(a, 2)
        factor = banded_cholesky_inplace(raw.copy())
        b = rng.standard_normal(12)

        def residual(hi, lo):
            return bandmat.band_residual(raw, hi, b) - band_matvec(raw, lo)

        hi, lo = bandmat.refine_solution(factor, b, residual)
        assert np.all(np.abs(lo) <= np.spacing(np.abs(hi)))
        # exact residual of hi + lo, in rationals
        frac = [[Fraction(v) for v in row] for row in a]
        x = [Fraction(h) + Fraction(l) for h, l in zip(hi, lo)]
        resid = [Fraction(bi) - sum(r[j] * x[j] for j in range(12)) for bi, r in zip(b, frac)]
        # the pair solves the system far beyond working precision
        assert max(abs(float(r)) for r in resid) <= 1e-3 * np.finfo(float).eps * np.abs(b).max()

    def test_band_residual_is_compensated(self, rng):
        a = random_spd_band(rng, 15, 2)
        a = (a + a.T) / 2
        x, b = rng.standard_normal(15), rng.standard_normal(15)
        got = bandmat.band_residual(band_from_dense(a, 2), x, b)
        exact = [float(Fraction(bi) - sum(Fraction(a[i, j]) * Fraction(x[j]) for j in range(15)))
                 for i, bi in enumerate(b)]
        np.testing.assert_array_equal(got, exact)
