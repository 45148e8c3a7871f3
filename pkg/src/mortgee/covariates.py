"""Mortality covariates: band PC1 scores, band averages, drift extrapolation.

Each (country, band) gets one time series ``k`` built from the training
years only, either as first-principal-component scores of the band's
log-rate series or as their plain average.  Forecasting is a random walk
with drift, point forecasts only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from .errors import DataError, DegenerateDataError, DomainError
from .mortality_data import MortalityPanel

COVARIATE_METHODS = ("pca", "avg")


class Pc1Result(NamedTuple):
    scores: np.ndarray
    variance_explained: float
    loadings: np.ndarray
    col_means: np.ndarray
    sign_flipped: bool


def pc1_scores(X) -> Pc1Result:
    """First-principal-component scores of the columns of ``X``.

    Columns are centered by their means and the sample covariance (divisor
    n - 1) is decomposed.  Scores are the projection of the centered data
    onto the unit-norm leading eigenvector, with the sign chosen so that
    the scores correlate non-negatively with the per-row mean of the
    centered data.  ``variance_explained`` is the leading eigenvalue share.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise DomainError(f"expected a 2-d matrix, got shape {X.shape}")
    n, m = X.shape
    if n < 2 or m < 1:
        raise DomainError(f"need at least 2 rows and 1 column, got shape {X.shape}")
    if not np.isfinite(X).all():
        raise DomainError("matrix contains non-finite values")
    col_means = X.mean(axis=0)
    centered = X - col_means
    _, svals, vt = np.linalg.svd(centered, full_matrices=False)
    eigvals = svals**2 / (n - 1)
    total = float(eigvals.sum())
    if total <= 0.0:
        raise DegenerateDataError("all columns are constant; no principal direction")
    loadings = vt[0]
    scores = centered @ loadings
    sign_flipped = False
    if float(scores @ centered.mean(axis=1)) < 0.0:
        scores = -scores
        loadings = -loadings
        sign_flipped = True
    return Pc1Result(scores, float(eigvals[0] / total), loadings, col_means, sign_flipped)


@dataclass(frozen=True)
class Pc1Meta:
    col_means: np.ndarray
    loadings: np.ndarray
    sign_flipped: bool
    variance_explained: float


@dataclass(frozen=True)
class CovariateSeries:
    """Per-(country, band) covariate values over an ordered year grid."""

    country: str
    band: str
    years: np.ndarray
    values: np.ndarray
    method: str
    pc1_meta: Pc1Meta | None = None

    def __post_init__(self):
        years = np.asarray(self.years, dtype=int)
        values = np.asarray(self.values, dtype=float)
        if years.ndim != 1 or years.shape != values.shape:
            raise ValueError("years and values must be 1-d and aligned")
        if years.size and np.any(np.diff(years) <= 0):
            raise ValueError("years must be strictly increasing")
        if self.method not in COVARIATE_METHODS:
            raise ValueError(f"method must be one of {COVARIATE_METHODS}")
        object.__setattr__(self, "years", years)
        object.__setattr__(self, "values", values)

    def value_at(self, year: int) -> float:
        idx = int(np.searchsorted(self.years, year))
        if idx >= self.years.size or self.years[idx] != year:
            raise DataError(
                f"no covariate value for ({self.country}, {self.band}) in year {year}"
            )
        return float(self.values[idx])


def _band_training_matrix(panel: MortalityPanel, country: str, band: str) -> np.ndarray:
    """Training-year matrix with one column per (gender, age) series in the band."""
    band_ages = panel.band_ages(band)
    if band_ages.size == 0:
        raise DataError(f"band {band!r} is empty within ages {panel.config.age_min}"
                        f"..{panel.config.age_max}")
    age_pos = np.searchsorted(panel.ages, band_ages)
    years = panel.train_years
    cols = []
    for gender in panel.genders:
        mat = panel.log_rate_matrix(country, gender, years=years)
        cols.append(mat[age_pos, :].T)  # years x band ages
    return np.hstack(cols)


def build_pca_covariate(panel: MortalityPanel, country: str, band: str) -> CovariateSeries:
    """PC1-score covariate for one (country, band), training years only."""
    X = _band_training_matrix(panel, country, band)
    res = pc1_scores(X)
    meta = Pc1Meta(res.col_means, res.loadings, res.sign_flipped, res.variance_explained)
    return CovariateSeries(country, band, panel.train_years, res.scores, "pca", meta)


def build_avg_covariate(panel: MortalityPanel, country: str, band: str) -> CovariateSeries:
    """Band-average covariate: mean log rate over the band's (gender, age) cells."""
    X = _band_training_matrix(panel, country, band)
    return CovariateSeries(country, band, panel.train_years, X.mean(axis=1), "avg")


def build_covariates(
    panel: MortalityPanel, method: str
) -> dict[tuple[str, str], CovariateSeries]:
    """One covariate series per (country, non-empty band)."""
    if method not in COVARIATE_METHODS:
        raise ValueError(f"method must be one of {COVARIATE_METHODS}")
    builder = build_pca_covariate if method == "pca" else build_avg_covariate
    return {
        (country, band): builder(panel, country, band)
        for country in panel.countries
        for band in panel.bands()
    }


@dataclass(frozen=True)
class DriftModel:
    """Random walk with drift fitted to an observed series.

    ``sigma_fallback`` marks the two-observation case where the innovation
    standard deviation is undefined and reported as zero.
    """

    drift: float
    sigma: float
    last_value: float
    last_year: int
    sigma_fallback: bool = False


def fit_drift(values, last_year: int) -> DriftModel:
    """Drift model from raw series values (telescoping mean of first differences)."""
    v = np.asarray(values, dtype=float)
    if v.ndim != 1 or v.size < 2:
        raise DataError(f"need at least 2 observations to fit a drift, got {v.size}")
    n = v.size
    drift = float((v[-1] - v[0]) / (n - 1))
    if n == 2:
        return DriftModel(drift, 0.0, float(v[-1]), int(last_year), sigma_fallback=True)
    diffs = np.diff(v) - drift
    sigma = math.sqrt(float(diffs @ diffs) / (n - 2))
    return DriftModel(drift, sigma, float(v[-1]), int(last_year))


def fit_rw_drift(series: CovariateSeries) -> DriftModel:
    return fit_drift(series.values, int(series.years[-1]))


def forecast_rw(model: DriftModel, horizon: int) -> np.ndarray:
    """Point forecasts for years last_year+1 .. last_year+horizon."""
    if horizon < 1:
        raise DomainError(f"horizon must be >= 1, got {horizon}")
    return model.last_value + model.drift * np.arange(1, horizon + 1)


def extend_with_forecast(series: CovariateSeries, horizon: int) -> CovariateSeries:
    """Series with drift point forecasts appended after the last observed year."""
    model = fit_rw_drift(series)
    future_years = series.years[-1] + np.arange(1, horizon + 1)
    return replace(
        series,
        years=np.concatenate([series.years, future_years]),
        values=np.concatenate([series.values, forecast_rw(model, horizon)]),
    )
