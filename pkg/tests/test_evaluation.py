import numpy as np
import pytest

from mortgee import RunConfig, SimulationSpec, simulate_panel
from mortgee.errors import ConvergenceError, DataError
from mortgee.evaluation import (
    MseRecord,
    compare,
    mse_log_scale,
    mse_rates,
    run_experiment,
)


class TestMseRates:
    def test_identical_is_zero(self, rng):
        y = rng.uniform(-8, -2, size=30)
        assert mse_rates(y, y) == 0.0

    def test_rate_scale_arithmetic(self):
        # rate errors of 1e-3 and 3e-3 average to 5e-6
        rates = np.array([0.01, 0.02])
        errs = np.array([1e-3, 3e-3])
        y = np.log(rates)
        y_hat = np.log(rates + errs)
        assert mse_rates(y_hat, y) == pytest.approx(5e-6, rel=1e-12)

    def test_symmetry(self, rng):
        a = rng.uniform(-8, -2, size=25)
        b = rng.uniform(-8, -2, size=25)
        assert mse_rates(a, b) == mse_rates(b, a)
        assert mse_log_scale(a, b) == mse_log_scale(b, a)

    def test_shape_mismatch(self):
        with pytest.raises(DataError):
            mse_rates(np.zeros(3), np.zeros(4))


def records(mses_by_model):
    out = []
    pops = [("A", "female"), ("A", "male"), ("B", "female")]
    for model, values in mses_by_model.items():
        for pop, value in zip(pops, values):
            out.append(MseRecord(pop[0], pop[1], model, value, value))
    return out


class TestCompare:
    def test_identical_models_all_ones_no_wins(self):
        recs = records({"lc": [1.0, 2.0, 3.0], "pca-gee": [1.0, 2.0, 3.0]})
        table = compare(recs, "lc", "pca-gee")
        assert all(row.ratio == 1.0 for row in table.rows)
        assert table.wins == 0  # strict inequality

    def test_halved_mse_doubles_ratio(self):
        recs = records({"lc": [2.0, 4.0, 6.0], "pca-gee": [1.0, 2.0, 3.0]})
        table = compare(recs, "lc", "pca-gee")
        assert all(row.ratio == 2.0 for row in table.rows)
        assert table.wins == 3

    def test_elementwise_division(self):
        recs = records({"ll": [1.5, 0.9, 4.0], "avg-gee": [0.5, 1.8, 5.0]})
        table = compare(recs, "ll", "avg-gee")
        assert [row.ratio for row in table.rows] == pytest.approx([3.0, 0.5, 0.8])
        assert table.wins == 1

    def test_missing_model(self):
        recs = records({"lc": [1.0, 2.0, 3.0]})
        with pytest.raises(DataError):
            compare(recs, "lc", "pca-gee")


def single_cfg(spec, models=("pca-gee",), **kw):
    return RunConfig(
        populations=[("SIM", "female")],
        train_years=spec.train_years,
        test_years=spec.test_years,
        models=models,
        variant="single_pop",
        rate_kind="m",
        **kw,
    )


class TestRunExperiment:
    def test_noiseless_self_consistency(self):
        # exactly representable model, drift-extendable driver: the pipeline
        # must reproduce the test window to numerical noise.  PCA requires an
        # exactly rank-one surface (zero curvature); the band average also
        # tolerates band-mean-zero curvature.
        spec = SimulationSpec(
            seed=31, noise_sd=0.0, cohort_gamma=0.0, curvature_scale=0.0,
            test_k_on_drift_line=True, k_drift=-0.02, k_innovation_sd=0.02,
            test_years=(2011, 2015),
        )
        panel, _ = simulate_panel(spec)
        report = run_experiment(single_cfg(spec, models=("pca-gee", "avg-gee")), panel=panel)
        for record in report.mse_records:
            assert record.mse_log < 1e-20
            assert record.mse_rate < 1e-20

        spec_c = SimulationSpec(
            seed=32, noise_sd=0.0, cohort_gamma=0.0, test_k_on_drift_line=True,
            k_drift=-0.02, k_innovation_sd=0.02, test_years=(2011, 2015),
        )
        panel_c, _ = simulate_panel(spec_c)
        report_c = run_experiment(single_cfg(spec_c, models=("avg-gee",)), panel=panel_c)
        assert report_c.mse_records[0].mse_log < 1e-20

    def test_noise_level_mse(self):
        # with noise, the test-window log MSE sits near the noise floor
        ratios = []
        for seed in range(5):
            spec = SimulationSpec(
                seed=seed, test_years=(2011, 2013), k_drift=-0.003,
                k_innovation_sd=0.03, cohort_gamma=0.0005, test_k_on_drift_line=True,
            )
            panel, _ = simulate_panel(spec)
            report = run_experiment(single_cfg(spec), panel=panel)
            ratios.append(report.mse_records[0].mse_log / spec.noise_sd**2)
        assert 0.8 <= np.median(ratios) <= 1.5

    def test_leakage_bitwise(self):
        spec = SimulationSpec(seed=37, test_years=(2011, 2013))
        cfg = single_cfg(spec, models=("pca-gee", "avg-gee"))
        panel_a, _ = simulate_panel(spec)
        report_a = run_experiment(cfg, panel=panel_a)
        panel_b, _ = simulate_panel(spec)
        test_pos = slice(20, None)
        panel_b.log_rates[..., test_pos] += 0.37
        panel_b.rates[..., test_pos] = np.exp(panel_b.log_rates[..., test_pos])
        report_b = run_experiment(cfg, panel=panel_b)
        for key in report_a.gee_fits:
            assert np.array_equal(report_a.gee_fits[key].beta, report_b.gee_fits[key].beta)
            assert np.array_equal(
                report_a.gee_fits[key].robust_cov, report_b.gee_fits[key].robust_cov
            )

    def test_multi_population_report(self, small_multi_panel):
        panel, _ = small_multi_panel
        cfg = RunConfig(
            populations=[("AUT", "female"), ("AUT", "male"), ("CZE", "female"), ("CZE", "male")],
            models=("pca-gee", "avg-gee", "lc", "ll"),
        )
        report = run_experiment(cfg, panel=panel)
        assert report.variant == "multi_pop"
        assert len(report.mse_records) == 4 * 4
        pairs = {(t.baseline, t.candidate) for t in report.comparisons}
        assert pairs == {
            ("lc", "pca-gee"), ("lc", "avg-gee"), ("ll", "pca-gee"), ("ll", "avg-gee")
        }
        for table in report.comparisons:
            assert len(table.rows) == 4
            by_key = {
                (r.country, r.gender, r.model): r.mse_rate for r in report.mse_records
            }
            for row in table.rows:
                expected = (
                    by_key[(row.country, row.gender, table.baseline)]
                    / by_key[(row.country, row.gender, table.candidate)]
                )
                assert row.ratio == expected

    def test_single_mode_parallel_matches_serial(self):
        spec = SimulationSpec(
            variant="single_pop", countries=("PA", "PB"), genders=("female",),
            seed=41, test_years=(2011, 2013),
        )
        panel, _ = simulate_panel(spec)
        cfg = RunConfig(
            populations=[("PA", "female"), ("PB", "female")],
            train_years=spec.train_years, test_years=spec.test_years,
            models=("pca-gee",), variant="single_pop", rate_kind="m",
        )
        serial = run_experiment(cfg, panel=panel, jobs=1)
        parallel = run_experiment(cfg, panel=panel, jobs=2)
        assert [r.mse_rate for r in serial.mse_records] == [
            r.mse_rate for r in parallel.mse_records
        ]
        for key in serial.gee_fits:
            assert np.array_equal(serial.gee_fits[key].beta, parallel.gee_fits[key].beta)

    def test_nonconvergence_raises_unless_allowed(self):
        spec = SimulationSpec(seed=43, test_years=(2011, 2012))
        panel, _ = simulate_panel(spec)
        cfg = single_cfg(spec, gee_max_iter=1)
        with pytest.raises(ConvergenceError):
            with pytest.warns(UserWarning):
                run_experiment(cfg, panel=panel)
        cfg_ok = single_cfg(spec, gee_max_iter=1, allow_nonconverged=True)
        with pytest.warns(UserWarning):
            report = run_experiment(cfg_ok, panel=panel)
        assert not report.gee_fits[("pca-gee", ("SIM", "female"))].converged

    def test_predictions_cover_test_years(self, small_multi_panel):
        panel, _ = small_multi_panel
        cfg = RunConfig(
            populations=[("AUT", "female"), ("AUT", "male"), ("CZE", "female"), ("CZE", "male")],
            models=("lc",),
        )
        report = run_experiment(cfg, panel=panel)
        for (_, pop), mat in report.predictions.items():
            assert mat.shape == (61, 9)
        assert len(report.lc_fits) == 4


def test_qic_table_multi_population_params(small_multi_panel):
    from mortgee.evaluation import qic_table

    panel, _ = small_multi_panel
    cfg = RunConfig(
        populations=[("AUT", "female"), ("AUT", "male"), ("CZE", "female"), ("CZE", "male")],
        models=("pca-gee", "avg-gee"),
        corstr=("independence",),
    )
    rows = qic_table(cfg, panel)
    assert len(rows) == 2
    for row in rows:
        assert row.report.params == 308
        assert row.fit.n_obs == 4880
        assert row.fit.n_clusters == 244
