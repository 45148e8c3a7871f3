import json

import numpy as np
import pytest

from mortgee import RunConfig, SimulationSpec, run_experiment, simulate_panel
from mortgee.covariates import build_covariates
from mortgee.design import ModelFormula, build_design
from mortgee.errors import DataError
from mortgee.simulate import covariate_affine_maps, expected_single_population_beta


class TestGeneration:
    def test_seed_reproducibility_bitwise(self):
        spec = SimulationSpec(seed=7)
        p1, t1 = simulate_panel(spec)
        p2, t2 = simulate_panel(spec)
        assert np.array_equal(p1.log_rates, p2.log_rates)
        assert np.array_equal(p1.deaths, p2.deaths)
        for key in t1.k:
            assert np.array_equal(t1.k[key], t2.k[key])

    def test_different_seeds_differ(self):
        p1, _ = simulate_panel(SimulationSpec(seed=1))
        p2, _ = simulate_panel(SimulationSpec(seed=2))
        assert not np.array_equal(p1.log_rates, p2.log_rates)

    def test_panel_shape_and_config(self):
        spec = SimulationSpec(
            variant="multi_pop", countries=("AA", "BB"), genders=("female", "male"),
            train_years=(1991, 2010), test_years=(2011, 2019), rate_kind="q", seed=3,
        )
        panel, truth = simulate_panel(spec)
        assert panel.log_rates.shape == (2, 2, 61, 29)
        assert panel.config.rate_kind == "q"
        assert set(truth.k) == {(c, b) for c in ("AA", "BB")
                                for b in ("young_adults", "older_adults")}

    def test_rate_q_requires_negative_log_rates(self):
        spec = SimulationSpec(rate_kind="q", seed=5, k_start=12.0)
        with pytest.raises(DataError, match="below 0"):
            simulate_panel(spec)

    def test_truth_json_round_trip(self):
        _, truth = simulate_panel(SimulationSpec(seed=11))
        payload = json.loads(truth.to_json())
        assert payload["gamma"] == truth.gamma
        assert payload["a"] == truth.a.tolist()
        assert payload["noise"] == {"kind": "ar1", "rho": 0.5, "sd": 0.05}

    def test_band_structure_of_truth(self):
        spec = SimulationSpec(seed=13)
        panel, truth = simulate_panel(spec)
        # slopes average to one and curvatures to zero within each band
        young = panel.band_ages("young_adults")
        older = panel.band_ages("older_adults")
        ypos = np.searchsorted(panel.ages, young)
        opos = np.searchsorted(panel.ages, older)
        assert truth.b[:, ypos].mean() == pytest.approx(1.0, abs=1e-12)
        assert truth.b[:, opos].mean() == pytest.approx(1.0, abs=1e-12)
        assert truth.c[:, ypos].mean() == pytest.approx(0.0, abs=1e-12)
        assert truth.c[:, opos].mean() == pytest.approx(0.0, abs=1e-12)

    def test_drift_line_extension(self):
        spec = SimulationSpec(seed=17, test_k_on_drift_line=True, test_years=(2011, 2015))
        _, truth = simulate_panel(spec)
        for series in truth.k.values():
            train = series[:20]
            drift = (train[-1] - train[0]) / 19
            expected = train[-1] + drift * np.arange(1, 6)
            assert np.allclose(series[20:], expected, atol=1e-12)

    def test_exchangeable_and_iid_noise_kinds(self):
        for kind in ("exchangeable", "iid"):
            spec = SimulationSpec(seed=19, noise_kind=kind)
            panel, _ = simulate_panel(spec)
            assert np.isfinite(panel.log_rates).all()


class TestTruthEncoding:
    def test_noiseless_coefficient_recovery(self):
        # gamma = 0 makes the derived covariate an exact affine image of the
        # driver (avg needs band-mean-zero curvature, PCA zero curvature), so
        # the fit must recover the design-parameterization truth exactly
        for method, model, curvature in (("avg", "avg-gee", 0.01), ("pca", "pca-gee", 0.0)):
            spec = SimulationSpec(
                seed=23, noise_sd=0.0, cohort_gamma=0.0, curvature_scale=curvature,
                k_drift=-0.02, k_innovation_sd=0.02, test_k_on_drift_line=True,
                test_years=(2011, 2015),
            )
            panel, truth = simulate_panel(spec)
            cfg = RunConfig(
                populations=[("SIM", "female")], train_years=spec.train_years,
                test_years=spec.test_years, models=(model,), variant="single_pop",
                rate_kind="m",
            )
            report = run_experiment(cfg, panel=panel)
            fit = report.gee_fits[(model, ("SIM", "female"))]
            covs = report.covariate_sets[(model, ("SIM", "female"))]
            design, _ = build_design(panel, covs, ModelFormula("single_pop", method))
            maps = covariate_affine_maps(truth, covs)
            expected = expected_single_population_beta(truth, design, maps)
            assert np.abs(fit.beta - expected).max() < 1e-6

    def test_pca_noiseless_needs_zero_curvature(self):
        # nonzero curvature breaks exact rank-one structure for PCA but not avg
        spec = SimulationSpec(
            seed=29, noise_sd=0.0, cohort_gamma=0.0, curvature_scale=0.0,
            slope_spread=0.3, k_drift=-0.02, k_innovation_sd=0.02,
            test_k_on_drift_line=True, test_years=(2011, 2013),
        )
        panel, truth = simulate_panel(spec)
        covs = build_covariates(panel, "pca")
        for series in covs.values():
            assert series.pc1_meta.variance_explained == pytest.approx(1.0, abs=1e-10)

    def test_affine_maps_are_tight_without_noise(self):
        spec = SimulationSpec(seed=31, noise_sd=0.0, cohort_gamma=0.0,
                              k_drift=-0.02, k_innovation_sd=0.02)
        panel, truth = simulate_panel(spec)
        covs = build_covariates(panel, "avg")
        maps = covariate_affine_maps(truth, covs)
        for key, series in covs.items():
            alpha, beta = maps[key]
            k_true = truth.k_training(*key)
            assert np.abs(series.values - (alpha + beta * k_true)).max() < 1e-10
