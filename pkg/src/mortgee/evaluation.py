"""Train/test orchestration, rate-scale accuracy scoring and model comparison.

All fitted artifacts (covariates, drift models, design centering, GEE
coefficients) are functions of the training years only; test-year data
enters solely through the accuracy metrics.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .baselines import fit_lee_carter, fit_li_lee, forecast_lee_carter, forecast_li_lee
from .config import (
    GEE_MODELS,
    MODEL_AVG_GEE,
    MODEL_LC,
    MODEL_LL,
    MODEL_PCA_GEE,
    RunConfig,
)
from .covariates import build_covariates, extend_with_forecast
from .design import (
    VARIANT_MULTI,
    ModelFormula,
    build_design,
)
from .errors import ConvergenceError, DataError
from .gee import GeeFit, QicReport, fit_gee, predict, qic_report
from .mortality_data import MortalityPanel, build_panel, load_country_tables

_METHOD_OF_MODEL = {MODEL_PCA_GEE: "pca", MODEL_AVG_GEE: "avg"}


def mse_rates(predicted_log, actual_log) -> float:
    """Mean squared error on the rate scale: mean((exp(yhat) - exp(y))^2)."""
    yhat = np.asarray(predicted_log, dtype=float)
    y = np.asarray(actual_log, dtype=float)
    if yhat.shape != y.shape:
        raise DataError(f"prediction/actual shape mismatch: {yhat.shape} vs {y.shape}")
    diff = np.exp(yhat) - np.exp(y)
    return float(np.mean(diff * diff))


def mse_log_scale(predicted_log, actual_log) -> float:
    """Mean squared error on the log scale (diagnostic companion to mse_rates)."""
    yhat = np.asarray(predicted_log, dtype=float)
    y = np.asarray(actual_log, dtype=float)
    if yhat.shape != y.shape:
        raise DataError(f"prediction/actual shape mismatch: {yhat.shape} vs {y.shape}")
    diff = yhat - y
    return float(np.mean(diff * diff))


@dataclass(frozen=True)
class MseRecord:
    country: str
    gender: str
    model: str
    mse_rate: float
    mse_log: float


@dataclass(frozen=True)
class RatioRow:
    country: str
    gender: str
    ratio: float


@dataclass(frozen=True)
class ComparisonTable:
    baseline: str
    candidate: str
    rows: tuple[RatioRow, ...]

    @property
    def wins(self) -> int:
        """Populations where the candidate strictly beats the baseline."""
        return sum(1 for row in self.rows if row.ratio > 1.0)


@dataclass
class EvalReport:
    variant: str
    mse_records: tuple[MseRecord, ...]
    comparisons: tuple[ComparisonTable, ...]
    predictions: dict
    gee_fits: dict
    covariate_sets: dict
    panel: MortalityPanel
    lc_fits: dict | None = None
    ll_fit: object | None = None


def compare(report, baseline: str, candidate: str) -> ComparisonTable:
    """Per-population ratio mse(baseline) / mse(candidate) and win count."""
    records = report.mse_records if isinstance(report, EvalReport) else tuple(report)
    by_key = {(r.country, r.gender, r.model): r.mse_rate for r in records}
    populations = sorted({(r.country, r.gender) for r in records})
    models = {r.model for r in records}
    for model in (baseline, candidate):
        if model not in models:
            raise DataError(f"model {model!r} not present in the evaluation records")
    rows = []
    for country, gender in populations:
        base = by_key[(country, gender, baseline)]
        cand = by_key[(country, gender, candidate)]
        rows.append(RatioRow(country, gender, base / cand))
    return ComparisonTable(baseline, candidate, tuple(rows))


def _require_converged(fit: GeeFit, allow_nonconverged: bool, label: str) -> None:
    if fit.converged or allow_nonconverged:
        return
    raise ConvergenceError(f"GEE fit {label} did not converge in {fit.n_iter} iterations")


def _fit_and_forecast_gee(panel: MortalityPanel, model: str, variant: str, cfg: RunConfig):
    """Fit one GEE model on the training years and predict the test years.

    Returns (fit, covariates, predictions) with predictions keyed by
    population as (ages x test-years) log-rate matrices.
    """
    method = _METHOD_OF_MODEL[model]
    covariates = build_covariates(panel, method)
    formula = ModelFormula(variant, method)
    design, layout = build_design(panel, covariates, formula)
    fit = fit_gee(
        design,
        layout,
        corstr=cfg.primary_corstr,
        tol=cfg.gee_tol,
        max_iter=cfg.gee_max_iter,
        small_sample_correction=cfg.small_sample_correction,
        rho_matrix=cfg.user_correlation,
    )
    horizon = len(panel.test_years)
    extended = {key: extend_with_forecast(s, horizon) for key, s in covariates.items()}
    design_test, layout_test = build_design(
        panel,
        extended,
        formula,
        years=panel.test_years,
        cohort_center=design.cohort_center,
        require_full_rank=False,
    )
    yhat = predict(fit, design_test)
    n_ages = len(panel.ages)
    predictions = {}
    for pop in panel.config.populations:
        mask = layout_test.population_mask(*pop)
        predictions[pop] = yhat[mask].reshape(n_ages, horizon)
    return fit, covariates, predictions


def _single_population_job(args):
    panel, model, variant, cfg = args
    fit, covariates, predictions = _fit_and_forecast_gee(panel, model, variant, cfg)
    (pop,) = panel.config.populations
    return pop, model, fit, covariates, predictions[pop]


def load_panel(cfg: RunConfig, tables=None) -> MortalityPanel:
    """Build the panel from preparsed tables or from ``cfg.data_dir``."""
    if tables is not None:
        deaths, exposures = tables
    else:
        if cfg.data_dir is None:
            raise DataError("no data_dir configured and no tables supplied")
        countries = sorted({c for c, _ in cfg.populations})
        deaths, exposures = load_country_tables(cfg.data_dir, countries)
    return build_panel(deaths, exposures, cfg.panel_config())


def run_experiment(cfg: RunConfig, panel: MortalityPanel | None = None, tables=None,
                   jobs: int | None = None) -> EvalReport:
    """Fit the requested models, forecast the test window, and score them.

    Covariates, drift models and design centering are built from training
    years only; perturbing test-year inputs leaves every fitted artifact
    bitwise unchanged.
    """
    if panel is None:
        panel = load_panel(cfg, tables)
    variant = cfg.resolved_variant
    jobs = cfg.jobs if jobs is None else jobs
    horizon = len(panel.test_years)
    populations = panel.config.populations

    predictions: dict = {}
    gee_fits: dict = {}
    covariate_sets: dict = {}

    gee_models = [m for m in cfg.models if m in GEE_MODELS]
    if gee_models:
        if variant == VARIANT_MULTI:
            for model in gee_models:
                fit, covs, preds = _fit_and_forecast_gee(panel, model, variant, cfg)
                _require_converged(fit, cfg.allow_nonconverged, model)
                gee_fits[(model, None)] = fit
                covariate_sets[(model, None)] = covs
                for pop, mat in preds.items():
                    predictions[(model, pop)] = mat
        else:
            tasks = [
                (panel.select(*pop), model, variant, cfg)
                for pop in populations
                for model in gee_models
            ]
            if jobs > 1 and len(tasks) > 1:
                with ProcessPoolExecutor(max_workers=jobs) as pool:
                    results = list(pool.map(_single_population_job, tasks))
            else:
                results = [_single_population_job(task) for task in tasks]
            for pop, model, fit, covs, pred in sorted(
                results, key=lambda item: (item[1], item[0])
            ):
                _require_converged(fit, cfg.allow_nonconverged, f"{model} {pop}")
                gee_fits[(model, pop)] = fit
                covariate_sets[(model, pop)] = covs
                predictions[(model, pop)] = pred

    lc_fits: dict = {}
    ll_fit = None
    if MODEL_LC in cfg.models:
        for pop in populations:
            mat = panel.log_rate_matrix(pop[0], pop[1], years=panel.train_years)
            fit = fit_lee_carter(mat, ages=panel.ages, years=panel.train_years)
            lc_fits[pop] = fit
            predictions[(MODEL_LC, pop)] = forecast_lee_carter(fit, horizon)

    if MODEL_LL in cfg.models:
        ll_fit = fit_li_lee(panel, population_k_dynamics=cfg.population_k_dynamics)
        for pop, mat in forecast_li_lee(ll_fit, horizon).items():
            predictions[(MODEL_LL, pop)] = mat

    records = []
    for model in cfg.models:
        for pop in populations:
            key = (model, pop)
            if key not in predictions:
                continue
            actual = panel.log_rate_matrix(pop[0], pop[1], years=panel.test_years)
            records.append(
                MseRecord(
                    country=pop[0],
                    gender=pop[1],
                    model=model,
                    mse_rate=mse_rates(predictions[key], actual),
                    mse_log=mse_log_scale(predictions[key], actual),
                )
            )
    records = tuple(records)

    comparisons = []
    present = {r.model for r in records}
    for baseline in (MODEL_LC, MODEL_LL):
        for candidate in (MODEL_PCA_GEE, MODEL_AVG_GEE):
            if baseline in present and candidate in present:
                comparisons.append(compare(records, baseline, candidate))

    return EvalReport(
        variant=variant,
        mse_records=records,
        comparisons=tuple(comparisons),
        predictions=predictions,
        gee_fits=gee_fits,
        covariate_sets=covariate_sets,
        panel=panel,
        lc_fits=lc_fits,
        ll_fit=ll_fit,
    )


@dataclass(frozen=True)
class QicRow:
    model: str
    corstr: str
    population: tuple[str, str] | None
    fit: GeeFit
    report: QicReport


def qic_table(cfg: RunConfig, panel: MortalityPanel) -> list[QicRow]:
    """One QIC row per requested (model, corstr), per population in single mode.

    Every row is scored against an independence refit of the same design,
    which is computed once per model.
    """
    variant = cfg.resolved_variant
    gee_models = [m for m in cfg.models if m in GEE_MODELS]

    def rows_for(sub_panel, population):
        out = []
        for model in gee_models:
            method = _METHOD_OF_MODEL[model]
            covariates = build_covariates(sub_panel, method)
            formula = ModelFormula(variant, method)
            design, layout = build_design(sub_panel, covariates, formula)

            def fit_with(token):
                fit = fit_gee(
                    design,
                    layout,
                    corstr=token,
                    tol=cfg.gee_tol,
                    max_iter=cfg.gee_max_iter,
                    small_sample_correction=cfg.small_sample_correction,
                    rho_matrix=cfg.user_correlation,
                )
                _require_converged(
                    fit, cfg.allow_nonconverged, f"{model}/{token}"
                )
                return fit

            independence_fit = fit_with("independence")
            for token in cfg.corstr:
                fit = independence_fit if token == "independence" else fit_with(token)
                out.append(
                    QicRow(model, token, population, fit, qic_report(fit, independence_fit))
                )
        return out

    rows: list[QicRow] = []
    if cfg.single_mode:
        for pop in panel.config.populations:
            rows.extend(rows_for(panel.select(*pop), pop))
    else:
        rows.extend(rows_for(panel, None))
    if not rows:
        warnings.warn("no GEE models requested; QIC table is empty")
    return rows
