import numpy as np
import pytest

from mortgee import SimulationSpec, simulate_panel
from mortgee.baselines import (
    Ar1Model,
    fit_ar1,
    fit_lee_carter,
    fit_li_lee,
    forecast_ar1,
    forecast_lee_carter,
    forecast_li_lee,
)
from mortgee.covariates import forecast_rw
from mortgee.errors import DataError


def rank_one_als_oracle(centered, rng, restarts=100, sweeps=200):
    """Best rank-one fit by random-restart alternating least squares."""
    best = np.inf
    for _ in range(restarts):
        v = rng.standard_normal(centered.shape[1])
        for _ in range(sweeps):
            u = centered @ v / (v @ v)
            v = centered.T @ u / (u @ u)
        err = float(((centered - np.outer(u, v)) ** 2).sum())
        best = min(best, err)
    return best


def lc_panel(rng, A=8, T=12):
    a = rng.standard_normal(A)
    b = rng.random(A)
    b /= b.sum()
    k = rng.standard_normal(T) * 2
    k -= k.mean()
    return a, b, k, a[:, None] + np.outer(b, k)


class TestLeeCarter:
    def test_exact_recovery_on_rank_one(self, rng):
        a, b, k, Y = lc_panel(rng)
        fit = fit_lee_carter(Y)
        assert np.abs(fit.a - a).max() < 1e-10
        assert np.abs(fit.b - b).max() < 1e-8
        assert np.abs(fit.k - k).max() < 1e-8

    def test_constraints_on_noisy_fits(self, rng):
        for _ in range(5):
            Y = rng.standard_normal((9, 14))
            fit = fit_lee_carter(Y)
            assert abs(fit.b.sum() - 1.0) < 1e-10
            assert abs(fit.k.sum()) < 1e-10

    def test_constant_in_time_degenerates(self):
        Y = np.tile(np.array([[1.0], [2.0], [3.0]]), (1, 5))
        fit = fit_lee_carter(Y)
        assert fit.degenerate
        assert np.allclose(fit.k, 0.0)
        assert np.allclose(fit.a, [1.0, 2.0, 3.0])
        assert np.allclose(fit.b, 1.0 / 3.0)

    def test_reconstruction_error_beats_als_oracle(self, rng):
        for _ in range(3):
            Y = rng.standard_normal((3, 4))
            fit = fit_lee_carter(Y)
            centered = Y - fit.a[:, None]
            mine = float(((centered - np.outer(fit.b, fit.k)) ** 2).sum())
            oracle = rank_one_als_oracle(centered, rng, restarts=20, sweeps=100)
            assert mine <= oracle + 1e-9

    def test_trend_sign_matches_column_sums(self, rng):
        # declining mortality surface: k must decline too
        A, T = 6, 10
        b = rng.random(A)
        b /= b.sum()
        k = -0.8 * np.arange(T) + 0.1 * rng.standard_normal(T)
        k -= k.mean()
        Y = rng.standard_normal(A)[:, None] + np.outer(b, k)
        fit = fit_lee_carter(Y)
        assert fit.k[-1] - fit.k[0] < 0
        assert fit.drift.drift < 0

    def test_input_validation(self):
        with pytest.raises(DataError):
            fit_lee_carter(np.ones((1, 5)))
        with pytest.raises(DataError):
            fit_lee_carter(np.ones((4, 2)))
        with pytest.raises(DataError):
            fit_lee_carter(np.array([[np.nan, 1, 2], [0, 1, 2]]))


class TestLeeCarterForecast:
    def test_zero_loading_age_is_flat(self, rng):
        a, b, k, Y = lc_panel(rng)
        fit = fit_lee_carter(Y)
        zeroed = type(fit)(ages=fit.ages, years=fit.years, a=fit.a,
                           b=np.where(np.arange(fit.b.size) == 2, 0.0, fit.b),
                           k=fit.k, drift=fit.drift, degenerate=False)
        out = forecast_lee_carter(zeroed, 4)
        assert np.allclose(out[2], fit.a[2])

    def test_zero_drift_constant_forecast(self, rng):
        a, b, k, Y = lc_panel(rng)
        fit = fit_lee_carter(Y)
        no_drift = type(fit.drift)(0.0, fit.drift.sigma, fit.drift.last_value,
                                   fit.drift.last_year)
        frozen = type(fit)(ages=fit.ages, years=fit.years, a=fit.a, b=fit.b, k=fit.k,
                           drift=no_drift, degenerate=False)
        out = forecast_lee_carter(frozen, 3)
        expected = fit.a[:, None] + fit.b[:, None] * fit.drift.last_value
        assert np.allclose(out, expected)

    def test_linear_k_continues_line(self, rng):
        A, T = 5, 8
        a = rng.standard_normal(A)
        b = rng.random(A)
        b /= b.sum()
        k = -1.5 * np.arange(T)
        k -= k.mean()
        Y = a[:, None] + np.outer(b, k)
        fit = fit_lee_carter(Y)
        out = forecast_lee_carter(fit, 3)
        k_next = k[-1] + -1.5 * np.arange(1, 4)
        expected = a[:, None] + np.outer(b, k_next)
        assert np.abs(out - expected).max() < 1e-8


class TestAr1Model:
    def test_recovers_coefficient(self, rng):
        phi = 0.6
        k = np.zeros(400)
        for t in range(1, k.size):
            k[t] = 0.5 + phi * k[t - 1] + 0.3 * rng.standard_normal()
        model = fit_ar1(k)
        assert model.coef == pytest.approx(phi, abs=0.08)
        assert model.intercept == pytest.approx(0.5, abs=0.15)

    def test_constant_series_flat_forecast(self):
        model = fit_ar1(np.full(10, 3.25))
        assert model.coef == 0.0
        assert np.allclose(forecast_ar1(model, 5), 3.25)

    def test_forecast_iterates(self):
        model = Ar1Model(intercept=1.0, coef=0.5, last_value=4.0)
        assert np.allclose(forecast_ar1(model, 3), [3.0, 2.5, 2.25])


def identical_population_panel(seed=17):
    spec = SimulationSpec(
        variant="multi_pop", countries=("P1", "P2"), genders=("female", "male"),
        train_years=(1991, 2010), test_years=(2011, 2015), rate_kind="q", seed=seed,
    )
    panel, _ = simulate_panel(spec)
    base = panel.log_rates[0, 0].copy()
    for ci in range(len(panel.countries)):
        for gi in range(len(panel.genders)):
            panel.log_rates[ci, gi] = base
            panel.rates[ci, gi] = np.exp(base)
    return panel


class TestLiLee:
    def test_identical_populations_reproduce_lee_carter(self):
        panel = identical_population_panel()
        ll = fit_li_lee(panel)
        lc = fit_lee_carter(panel.log_rate_matrix("P1", "female", years=panel.train_years))
        ll_fc = forecast_li_lee(ll, 5)
        lc_fc = forecast_lee_carter(lc, 5)
        for pop in ll.populations:
            assert np.abs(ll_fc[pop] - lc_fc).max() < 1e-8

    def test_single_population_collapses_to_lee_carter(self):
        spec = SimulationSpec(seed=23, test_years=(2011, 2013))
        panel, _ = simulate_panel(spec)
        ll = fit_li_lee(panel)
        lc = fit_lee_carter(panel.log_rate_matrix("SIM", "female", years=panel.train_years))
        assert np.allclose(ll.pop_k[("SIM", "female")], 0.0)
        assert np.abs(forecast_li_lee(ll, 3)[("SIM", "female")] - forecast_lee_carter(lc, 3)).max() < 1e-10

    def test_normalizations(self, small_multi_panel):
        panel, _ = small_multi_panel
        ll = fit_li_lee(panel)
        assert abs(ll.common_b.sum() - 1.0) < 1e-10
        assert abs(ll.common_k.sum()) < 1e-10
        for pop in ll.populations:
            assert abs(ll.pop_b[pop].sum() - 1.0) < 1e-10
            assert abs(ll.pop_k[pop].sum()) < 1e-10

    def test_reconstruction_structure(self, small_multi_panel):
        panel, _ = small_multi_panel
        ll = fit_li_lee(panel, population_k_dynamics="rw")
        fc = forecast_li_lee(ll, 2)
        pop = ll.populations[0]
        k_common = forecast_rw(ll.common_drift, 2)
        k_pop = forecast_rw(ll.pop_k_models[pop], 2)
        expected = (
            ll.pop_a[pop][:, None]
            + ll.common_b[:, None] * k_common[None, :]
            + ll.pop_b[pop][:, None] * k_pop[None, :]
        )
        assert np.allclose(fc[pop], expected)

    def test_stage_two_ar_coefficient_recovery(self, rng):
        # common factor plus independent AR(1) population factors; the
        # deviation contrast (k1 - k2)/2 keeps the same AR coefficient
        phi_true = 0.6
        A, T = 10, 50
        estimates = []
        for _ in range(200):
            B = rng.random(A)
            B /= B.sum()
            K = np.cumsum(-0.5 + 0.2 * rng.standard_normal(T))
            K -= K.mean()
            b = rng.random(A)
            b /= b.sum()

            def ar_series():
                k = np.zeros(T)
                k[0] = 0.5 * rng.standard_normal()
                for t in range(1, T):
                    k[t] = phi_true * k[t - 1] + 0.3 * rng.standard_normal()
                return k

            mats = {}
            for name, k_pop in (("P1", ar_series()), ("P2", ar_series())):
                a = rng.standard_normal(A)
                mats[name] = a[:, None] + np.outer(B, K) + 0.8 * np.outer(b, k_pop)

            from mortgee.mortality_data import MortalityPanel, PanelConfig

            cfg = PanelConfig(
                age_min=0, age_max=A - 1, train_years=(2000, 2000 + T - 1),
                test_years=(2000 + T, 2000 + T + 1),
                populations=(("P1", "female"), ("P2", "female")), rate_kind="m",
            )
            full = np.zeros((2, 1, A, len(cfg.years)))
            for ci, name in enumerate(("P1", "P2")):
                full[ci, 0, :, :T] = mats[name]
                full[ci, 0, :, T:] = mats[name][:, -1:]
            panel = MortalityPanel(
                countries=("P1", "P2"), genders=("female",), ages=cfg.ages,
                years=cfg.years, deaths=np.exp(full) * 1e5,
                exposures=np.full_like(full, 1e5), rates=np.exp(full),
                log_rates=full, config=cfg,
            )
            ll = fit_li_lee(panel)
            estimates.append(ll.pop_k_models[("P1", "female")].coef)
        assert np.median(estimates) == pytest.approx(phi_true, abs=0.1)

    def test_deterministic(self, small_multi_panel):
        panel, _ = small_multi_panel
        f1 = forecast_li_lee(fit_li_lee(panel), 4)
        f2 = forecast_li_lee(fit_li_lee(panel), 4)
        for pop in f1:
            assert np.array_equal(f1[pop], f2[pop])


class TestParameterExport:
    def test_lee_carter_frame(self, rng):
        from mortgee.baselines import lee_carter_frame

        _, _, _, Y = lc_panel(rng)
        fit = fit_lee_carter(Y)
        frame = lee_carter_frame(fit, "XX:female")
        assert set(frame.columns) == {"model", "population", "term", "index", "value"}
        assert set(frame["term"]) == {"a", "b", "k"}
        assert len(frame) == 2 * Y.shape[0] + Y.shape[1]
        b_rows = frame[frame["term"] == "b"]
        assert b_rows["value"].sum() == pytest.approx(1.0, abs=1e-10)

    def test_li_lee_frame(self, small_multi_panel):
        from mortgee.baselines import li_lee_frame

        panel, _ = small_multi_panel
        frame = li_lee_frame(fit_li_lee(panel))
        assert set(frame["term"]) == {"A", "B", "K", "a", "b", "k"} - {"A"}
        common = frame[frame["population"] == "common"]
        assert set(common["term"]) == {"B", "K"}
        assert len(frame[frame["term"] == "a"]) == 4 * 61
