"""Lee-Carter and Li-Lee benchmark models.

Lee-Carter decomposes a log-rate matrix into age means plus a rank-one
age-by-period term (leading singular triple of the row-centered matrix)
under the constraints sum(b) = 1 and sum(k) = 0, and extrapolates the
period index by a random walk with drift.  Li-Lee adds a common factor
fitted on the cross-population mean and population-specific rank-one
residual factors; the common index follows a random walk with drift, the
population indices a first-order autoregression with intercept (mean
reverting) or, optionally, their own drift.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .covariates import DriftModel, fit_drift, forecast_rw
from .errors import DataError, DegenerateDataError
from .mortality_data import MortalityPanel

K_DYNAMICS = ("ar1", "rw")


@dataclass(frozen=True)
class LeeCarterFit:
    ages: np.ndarray
    years: np.ndarray
    a: np.ndarray
    b: np.ndarray
    k: np.ndarray
    drift: DriftModel
    degenerate: bool = False


@dataclass(frozen=True)
class Ar1Model:
    """First-order autoregression with intercept, for point forecasts."""

    intercept: float
    coef: float
    last_value: float


def fit_ar1(values) -> Ar1Model:
    v = np.asarray(values, dtype=float)
    if v.size < 2:
        raise DataError(f"need at least 2 observations for an AR fit, got {v.size}")
    x, y = v[:-1], v[1:]
    xc = x - x.mean()
    denom = float(xc @ xc)
    scale = max(1.0, float(np.abs(v).max()))
    if denom <= (1e-12 * scale) ** 2 * x.size:
        # no usable variation in the lagged series: forecast flat
        return Ar1Model(intercept=float(v[-1]), coef=0.0, last_value=float(v[-1]))
    coef = float(xc @ (y - y.mean())) / denom
    intercept = float(y.mean() - coef * x.mean())
    return Ar1Model(intercept=intercept, coef=coef, last_value=float(v[-1]))


def forecast_ar1(model: Ar1Model, horizon: int) -> np.ndarray:
    out = np.empty(horizon)
    current = model.last_value
    for h in range(horizon):
        current = model.intercept + model.coef * current
        out[h] = current
    return out


def _leading_rank_one(centered: np.ndarray) -> tuple[np.ndarray, np.ndarray, bool]:
    """Best rank-one factors (b, k) of a row-centered matrix, sum(b)=1, sum(k)=0.

    A matrix with no time variation is degenerate: b is uniform and k is
    zero.  The sum-one normalization of b fixes the sign of the singular
    pair, so k's trend matches the trend of the matrix's column sums.
    """
    n_ages, n_years = centered.shape
    scale = float(np.abs(centered).max(initial=0.0))
    if np.allclose(centered, 0.0, atol=1e-12 * max(1.0, scale)):
        return np.full(n_ages, 1.0 / n_ages), np.zeros(n_years), True
    u, s, vt = np.linalg.svd(centered, full_matrices=False)
    u1 = u[:, 0]
    b_sum = float(u1.sum())
    if abs(b_sum) < 1e-10:
        raise DegenerateDataError("age loadings sum to zero; cannot normalize to sum one")
    b = u1 / b_sum
    k = s[0] * vt[0] * b_sum
    k = k - k.mean()  # exact zero-sum (row centering already gives ~1e-16)
    return b, k, False


def fit_lee_carter(Y, ages=None, years=None) -> LeeCarterFit:
    """Lee-Carter fit of a log-rate matrix (rows ages, columns years)."""
    Y = np.asarray(Y, dtype=float)
    if Y.ndim != 2 or Y.shape[0] < 2 or Y.shape[1] < 3:
        raise DataError(f"need at least 2 ages and 3 years, got shape {Y.shape}")
    if not np.isfinite(Y).all():
        raise DataError("log-rate matrix contains non-finite values")
    ages = np.arange(Y.shape[0]) if ages is None else np.asarray(ages, dtype=int)
    years = np.arange(Y.shape[1]) if years is None else np.asarray(years, dtype=int)
    a = Y.mean(axis=1)
    b, k, degenerate = _leading_rank_one(Y - a[:, None])
    return LeeCarterFit(ages=ages, years=years, a=a, b=b, k=k,
                        drift=fit_drift(k, int(years[-1])), degenerate=degenerate)


def forecast_lee_carter(fit: LeeCarterFit, horizon: int) -> np.ndarray:
    """Forecast log rates (ages x horizon) by drift-extrapolating the period index."""
    k_hat = forecast_rw(fit.drift, horizon)
    return fit.a[:, None] + fit.b[:, None] * k_hat[None, :]


@dataclass(frozen=True)
class LiLeeFit:
    populations: tuple[tuple[str, str], ...]
    ages: np.ndarray
    years: np.ndarray
    common_b: np.ndarray
    common_k: np.ndarray
    common_drift: DriftModel
    pop_a: dict
    pop_b: dict
    pop_k: dict
    pop_k_models: dict
    population_k_dynamics: str


def fit_li_lee(panel: MortalityPanel, population_k_dynamics: str = "ar1") -> LiLeeFit:
    """Two-stage coherent fit over all populations of the panel (training years).

    Stage one fits Lee-Carter to the cross-population mean log-rate matrix.
    Stage two fits a rank-one term to each population's deviation from the
    average age pattern, (y^c - a^c) - mean_c(y^c - a^c); the common factor
    cancels out of that deviation, so populations identical to the average
    get an exactly zero second stage and the model collapses to the common
    Lee-Carter fit (as it does for a single population).
    """
    if population_k_dynamics not in K_DYNAMICS:
        raise ValueError(f"population_k_dynamics must be one of {K_DYNAMICS}")
    populations = panel.config.populations
    years = panel.train_years
    last_year = int(years[-1])
    mats = {
        pop: panel.log_rate_matrix(pop[0], pop[1], years=years) for pop in populations
    }
    mean_mat = np.mean(np.stack(list(mats.values())), axis=0)
    common = fit_lee_carter(mean_mat, ages=panel.ages, years=years)

    pop_a, pop_b, pop_k, pop_models = {}, {}, {}, {}
    mean_centered = mean_mat - common.a[:, None]
    for pop, mat in mats.items():
        a = mat.mean(axis=1)
        residual = (mat - a[:, None]) - mean_centered
        b, k, _ = _leading_rank_one(residual)
        pop_a[pop] = a
        pop_b[pop] = b
        pop_k[pop] = k
        if population_k_dynamics == "ar1":
            pop_models[pop] = fit_ar1(k)
        else:
            pop_models[pop] = fit_drift(k, last_year)
    return LiLeeFit(
        populations=populations,
        ages=panel.ages,
        years=years,
        common_b=common.b,
        common_k=common.k,
        common_drift=common.drift,
        pop_a=pop_a,
        pop_b=pop_b,
        pop_k=pop_k,
        pop_k_models=pop_models,
        population_k_dynamics=population_k_dynamics,
    )


def forecast_li_lee(fit: LiLeeFit, horizon: int) -> dict:
    """Per-population forecast log rates (ages x horizon)."""
    k_common = forecast_rw(fit.common_drift, horizon)
    common_term = fit.common_b[:, None] * k_common[None, :]
    out = {}
    for pop in fit.populations:
        model = fit.pop_k_models[pop]
        if isinstance(model, Ar1Model):
            k_pop = forecast_ar1(model, horizon)
        else:
            k_pop = forecast_rw(model, horizon)
        out[pop] = fit.pop_a[pop][:, None] + common_term + fit.pop_b[pop][:, None] * k_pop[None, :]
    return out


def _term_records(model, population, term, index, values):
    return [
        {"model": model, "population": population, "term": term,
         "index": int(i), "value": float(v)}
        for i, v in zip(index, values)
    ]


def lee_carter_frame(fit: LeeCarterFit, population: str):
    """Tidy parameter export with columns model,population,term,index,value."""
    import pandas as pd

    records = (
        _term_records("lc", population, "a", fit.ages, fit.a)
        + _term_records("lc", population, "b", fit.ages, fit.b)
        + _term_records("lc", population, "k", fit.years, fit.k)
    )
    return pd.DataFrame.from_records(records)


def li_lee_frame(fit: LiLeeFit):
    """Tidy parameter export; common terms use population 'common'."""
    import pandas as pd

    records = (
        _term_records("ll", "common", "B", fit.ages, fit.common_b)
        + _term_records("ll", "common", "K", fit.years, fit.common_k)
    )
    for pop in fit.populations:
        label = f"{pop[0]}:{pop[1]}"
        records += _term_records("ll", label, "a", fit.ages, fit.pop_a[pop])
        records += _term_records("ll", label, "b", fit.ages, fit.pop_b[pop])
        records += _term_records("ll", label, "k", fit.years, fit.pop_k[pop])
    return pd.DataFrame.from_records(records)
