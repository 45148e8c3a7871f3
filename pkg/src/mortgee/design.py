"""Regression design assembly: factor coding, covariate interactions, clusters.

Three model variants are supported.  ``multi_pop`` regresses log rates on
country, gender and age intercepts plus per-(gender, age) slopes on the
mortality covariate and its square plus a linear cohort term.
``single_pop`` drops country and gender; ``single_pop_nocohort``
additionally drops the quadratic and cohort terms.  Factors use
treatment (drop-first) coding with the lexicographically first level as
reference.  Rows are ordered by (country, gender, age, year) so clusters
are contiguous blocks with strictly increasing waves.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np
from scipy import linalg

from .covariates import COVARIATE_METHODS, CovariateSeries
from .errors import DataError, DesignError
from .mortality_data import MortalityPanel, band_of

VARIANT_MULTI = "multi_pop"
VARIANT_SINGLE = "single_pop"
VARIANT_SINGLE_NOCOHORT = "single_pop_nocohort"
VARIANTS = (VARIANT_MULTI, VARIANT_SINGLE, VARIANT_SINGLE_NOCOHORT)


@dataclass(frozen=True)
class ModelFormula:
    variant: str
    covariate_method: str = "pca"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.covariate_method not in COVARIATE_METHODS:
            raise ValueError(f"covariate_method must be one of {COVARIATE_METHODS}")

    @property
    def include_cohort(self) -> bool:
        return self.variant != VARIANT_SINGLE_NOCOHORT

    @property
    def include_quadratic(self) -> bool:
        return self.variant != VARIANT_SINGLE_NOCOHORT


@dataclass(frozen=True)
class DesignMatrix:
    labels: tuple[str, ...]
    matrix: np.ndarray
    response: np.ndarray
    cohort_center: float | None = None

    @property
    def n_rows(self) -> int:
        return int(self.matrix.shape[0])

    @property
    def n_cols(self) -> int:
        return int(self.matrix.shape[1])


@dataclass(frozen=True)
class ClusterLayout:
    """Row-aligned cluster ids, waves and prior weights.

    Rows are sorted by cluster with waves strictly increasing inside each
    cluster, so clusters are contiguous row blocks.
    """

    cluster_labels: tuple[str, ...]
    cluster_index: np.ndarray
    waves: np.ndarray
    weights: np.ndarray
    row_country: np.ndarray
    row_gender: np.ndarray
    row_age: np.ndarray
    row_year: np.ndarray

    def __post_init__(self):
        for label, start, stop in self.blocks():
            w = self.waves[start:stop]
            if np.any(np.diff(w) <= 0):
                raise DesignError(f"waves not strictly increasing in cluster {label!r}")
        if np.any(self.weights <= 0):
            raise DesignError("weights must be positive")

    @property
    def n_clusters(self) -> int:
        return len(self.cluster_labels)

    def sizes(self) -> np.ndarray:
        return np.bincount(self.cluster_index, minlength=self.n_clusters)

    def blocks(self) -> Iterator[tuple[str, int, int]]:
        """Yield (label, start, stop) row ranges, one per cluster, in order."""
        boundaries = np.flatnonzero(np.diff(self.cluster_index)) + 1
        starts = np.concatenate([[0], boundaries])
        stops = np.concatenate([boundaries, [self.cluster_index.size]])
        for start, stop in zip(starts, stops):
            yield self.cluster_labels[self.cluster_index[start]], int(start), int(stop)

    def population_mask(self, country: str, gender: str) -> np.ndarray:
        return (self.row_country == country) & (self.row_gender == gender)


def weights_from_age(ages) -> np.ndarray:
    """Prior weights: numeric age divided by the mean age over all rows."""
    a = np.asarray(ages, dtype=float)
    return a / a.mean()


def design_to_frame(design: DesignMatrix, layout: ClusterLayout):
    """Debug export: one row per observation, design columns plus
    cluster, wave, weight and the response."""
    import pandas as pd

    frame = pd.DataFrame(design.matrix, columns=list(design.labels))
    frame["cluster"] = [layout.cluster_labels[i] for i in layout.cluster_index]
    frame["wave"] = layout.waves
    frame["weight"] = layout.weights
    frame["y"] = design.response
    return frame


def _check_full_rank(matrix: np.ndarray, labels: tuple[str, ...]) -> None:
    r, pivots = linalg.qr(matrix, mode="r", pivoting=True)
    diag = np.abs(np.diag(r))
    if diag.size == 0 or diag[0] == 0.0:
        raise DesignError("design matrix is identically zero")
    tol = diag[0] * max(matrix.shape) * np.finfo(float).eps
    rank = int(np.sum(diag > tol))
    if rank < matrix.shape[1]:
        collinear = sorted(labels[j] for j in pivots[rank:])
        raise DesignError(
            f"design matrix is rank deficient ({rank}/{matrix.shape[1]}); "
            f"collinear columns: {', '.join(collinear)}"
        )


def build_design(
    panel: MortalityPanel,
    covariates: dict[tuple[str, str], CovariateSeries],
    formula: ModelFormula,
    years=None,
    cohort_center: float | None = None,
    require_full_rank: bool = True,
) -> tuple[DesignMatrix, ClusterLayout]:
    """Numeric design matrix and cluster layout for one model variant.

    ``years`` defaults to the panel's training years; prediction designs
    pass the test years together with the training fit's ``cohort_center``
    and ``require_full_rank=False`` (drift-extrapolated covariates are
    exactly linear in time, which makes prediction designs collinear by
    construction).
    """
    if formula.variant in (VARIANT_SINGLE, VARIANT_SINGLE_NOCOHORT):
        if len(panel.countries) != 1 or len(panel.genders) != 1:
            raise DesignError(
                f"variant {formula.variant!r} requires a single-population panel, "
                f"got {len(panel.countries)} countries x {len(panel.genders)} genders"
            )
    years = panel.train_years if years is None else np.asarray(years, dtype=int)
    countries = panel.countries
    genders = panel.genders
    ages = panel.ages
    boundaries = panel.config.band_boundaries
    n_c, n_g, n_a, n_t = len(countries), len(genders), len(ages), len(years)
    n = n_c * n_g * n_a * n_t

    # row attribute grids in (country, gender, age, year) order
    ci, gi, ai, ti = np.meshgrid(
        np.arange(n_c), np.arange(n_g), np.arange(n_a), np.arange(n_t), indexing="ij"
    )
    ci, gi, ai, ti = (idx.reshape(-1) for idx in (ci, gi, ai, ti))
    row_country = np.array(countries, dtype=object)[ci]
    row_gender = np.array(genders, dtype=object)[gi]
    row_age = ages[ai].astype(int)
    row_year = years[ti].astype(int)

    # covariate value per row via the row's (country, band(age)) series
    k_by_key: dict[tuple[str, str], np.ndarray] = {}
    for country in countries:
        for band in panel.bands():
            series = covariates.get((country, band))
            if series is None:
                raise DesignError(f"missing covariate series for ({country!r}, {band!r})")
            try:
                k_by_key[(country, band)] = np.array(
                    [series.value_at(int(y)) for y in years], dtype=float
                )
            except DataError as exc:
                raise DesignError(str(exc)) from None
    band_idx = {b: i for i, b in enumerate(panel.bands())}
    age_band = np.array([band_idx[band_of(int(a), boundaries)] for a in ages])
    k_grid = np.empty((n_c, len(band_idx), n_t))
    for country in countries:
        for band, bi_ in band_idx.items():
            k_grid[countries.index(country), bi_] = k_by_key[(country, band)]
    k_row = k_grid[ci, age_band[ai], ti]

    year_pos = panel._year_positions(years)
    response = panel.log_rates[np.ix_(range(n_c), range(n_g), range(n_a), year_pos)].reshape(-1)

    cols: list[np.ndarray] = [np.ones(n)]
    labels: list[str] = ["intercept"]
    if formula.variant == VARIANT_MULTI:
        for country in countries[1:]:
            cols.append((row_country == country).astype(float))
            labels.append(f"country[{country}]")
        for gender in genders[1:]:
            cols.append((row_gender == gender).astype(float))
            labels.append(f"gender[{gender}]")
    for age in ages[1:]:
        cols.append((row_age == age).astype(float))
        labels.append(f"age[{int(age)}]")

    def interaction_columns(power_label: str, values: np.ndarray) -> None:
        if formula.variant == VARIANT_MULTI:
            for gender in genders:
                g_mask = row_gender == gender
                for age in ages:
                    mask = g_mask & (row_age == age)
                    cols.append(np.where(mask, values, 0.0))
                    labels.append(f"{power_label}:{gender}:{int(age)}")
        else:
            for age in ages:
                mask = row_age == age
                cols.append(np.where(mask, values, 0.0))
                labels.append(f"{power_label}:{int(age)}")

    interaction_columns("k", k_row)
    if formula.include_quadratic:
        interaction_columns("k2", k_row**2)
    if formula.include_cohort:
        cohort = (row_year - row_age).astype(float)
        if cohort_center is None:
            cohort_center = float(cohort.mean())
        cols.append(cohort - cohort_center)
        labels.append("cohort")
    else:
        cohort_center = None

    matrix = np.column_stack(cols)
    label_tuple = tuple(labels)
    if require_full_rank:
        _check_full_rank(matrix, label_tuple)

    if formula.variant == VARIANT_MULTI:
        cluster_of_row = [
            f"{c}:{g}:{x}" for c, g, x in zip(row_country, row_gender, row_age)
        ]
    else:
        cluster_of_row = [str(x) for x in row_age]
    cluster_labels: list[str] = []
    seen: dict[str, int] = {}
    cluster_index = np.empty(n, dtype=int)
    for i, lab in enumerate(cluster_of_row):
        if lab not in seen:
            seen[lab] = len(cluster_labels)
            cluster_labels.append(lab)
        cluster_index[i] = seen[lab]

    layout = ClusterLayout(
        cluster_labels=tuple(cluster_labels),
        cluster_index=cluster_index,
        waves=row_year.copy(),
        weights=weights_from_age(row_age),
        row_country=row_country,
        row_gender=row_gender,
        row_age=row_age,
        row_year=row_year,
    )
    design = DesignMatrix(
        labels=label_tuple,
        matrix=matrix,
        response=response,
        cohort_center=cohort_center,
    )
    return design, layout
