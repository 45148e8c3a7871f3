"""Synthetic panel generation with known coefficient structure.

Panels are generated from the regression models the package fits: age
intercepts (plus country and gender effects in the multi-population
variant), per-age slopes on a band-level driver series and its square, a
linear cohort term, and AR(1), exchangeable or independent cluster noise.
The driver follows a random walk with drift.  The generator returns the
ground truth so recovery can be checked end to end; ``noise_sd`` is the
marginal (stationary) standard deviation of the noise.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from itertools import product

import numpy as np

from .design import (
    VARIANT_MULTI,
    VARIANT_SINGLE,
    VARIANT_SINGLE_NOCOHORT,
    VARIANTS,
    DesignMatrix,
)
from .errors import DataError
from .mortality_data import BANDS, MortalityPanel, PanelConfig, band_of

NOISE_KINDS = ("ar1", "exchangeable", "iid")


@dataclass(frozen=True)
class SimulationSpec:
    variant: str = VARIANT_SINGLE
    countries: tuple[str, ...] = ("SIM",)
    genders: tuple[str, ...] = ("female",)
    age_min: int = 20
    age_max: int = 80
    train_years: tuple[int, int] = (1991, 2010)
    test_years: tuple[int, int] = (2011, 2015)
    band_boundaries: tuple[int, int] = (19, 50)
    rate_kind: str = "m"
    k_start: float = 0.0
    k_drift: float = -0.025
    k_innovation_sd: float = 0.008
    noise_kind: str = "ar1"
    noise_rho: float = 0.5
    noise_sd: float = 0.05
    cohort_gamma: float = 0.005
    slope_spread: float = 0.2
    curvature_scale: float = 0.01
    country_effect_sd: float = 0.25
    gender_effect: float = 0.45
    exposure_scale: float = 1e5
    test_k_on_drift_line: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.noise_kind not in NOISE_KINDS:
            raise ValueError(f"noise_kind must be one of {NOISE_KINDS}")
        if self.noise_kind == "exchangeable" and self.noise_rho < 0:
            raise ValueError("exchangeable noise requires rho >= 0")
        object.__setattr__(self, "countries", tuple(self.countries))
        object.__setattr__(self, "genders", tuple(self.genders))
        object.__setattr__(self, "train_years", tuple(int(y) for y in self.train_years))
        object.__setattr__(self, "test_years", tuple(int(y) for y in self.test_years))

    def panel_config(self) -> PanelConfig:
        populations = tuple(product(self.countries, self.genders))
        return PanelConfig(
            age_min=self.age_min,
            age_max=self.age_max,
            train_years=self.train_years,
            test_years=self.test_years,
            populations=populations,
            band_boundaries=self.band_boundaries,
            rate_kind=self.rate_kind,
        )


@dataclass(frozen=True)
class SimulationTruth:
    spec: SimulationSpec
    years: np.ndarray
    ages: np.ndarray
    k: dict
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    gamma: float
    cohort_anchor: float
    country_effects: dict
    gender_effects: dict

    def k_training(self, country: str, band: str) -> np.ndarray:
        n_train = self.spec.train_years[1] - self.spec.train_years[0] + 1
        return self.k[(country, band)][:n_train]

    def to_json(self) -> str:
        payload = {
            "variant": self.spec.variant,
            "countries": list(self.spec.countries),
            "genders": list(self.spec.genders),
            "years": self.years.tolist(),
            "ages": self.ages.tolist(),
            "k": {f"{c}:{band}": v.tolist() for (c, band), v in self.k.items()},
            "a": self.a.tolist(),
            "b": self.b.tolist(),
            "c": self.c.tolist(),
            "gamma": self.gamma,
            "cohort_anchor": self.cohort_anchor,
            "country_effects": dict(self.country_effects),
            "gender_effects": dict(self.gender_effects),
            "noise": {
                "kind": self.spec.noise_kind,
                "rho": self.spec.noise_rho,
                "sd": self.spec.noise_sd,
            },
            "seed": self.spec.seed,
        }
        return json.dumps(payload, indent=2, sort_keys=True)


def _driver_path(spec: SimulationSpec, rng: np.random.Generator, n_train: int,
                 n_total: int) -> np.ndarray:
    """Random walk with drift over all panel years.

    With ``test_k_on_drift_line`` the post-training values sit exactly on
    the telescoped-drift extrapolation of the training path, so a drift
    point forecast reproduces them without error.
    """
    steps = spec.k_drift + spec.k_innovation_sd * rng.standard_normal(n_total - 1)
    path = spec.k_start + np.concatenate([[0.0], np.cumsum(steps)])
    if spec.test_k_on_drift_line and n_total > n_train:
        train = path[:n_train]
        drift_hat = (train[-1] - train[0]) / (n_train - 1)
        horizon = np.arange(1, n_total - n_train + 1)
        path = np.concatenate([train, train[-1] + drift_hat * horizon])
    return path


def _cluster_noise(spec: SimulationSpec, rng: np.random.Generator, n: int) -> np.ndarray:
    sd, rho = spec.noise_sd, spec.noise_rho
    if sd == 0.0:
        return np.zeros(n)
    if spec.noise_kind == "iid":
        return sd * rng.standard_normal(n)
    if spec.noise_kind == "exchangeable":
        shared = rng.standard_normal()
        return sd * (np.sqrt(rho) * shared + np.sqrt(1 - rho) * rng.standard_normal(n))
    noise = np.empty(n)
    noise[0] = sd * rng.standard_normal()
    innov_sd = sd * np.sqrt(1 - rho**2)
    for t in range(1, n):
        noise[t] = rho * noise[t - 1] + innov_sd * rng.standard_normal()
    return noise


def simulate_panel(spec: SimulationSpec) -> tuple[MortalityPanel, SimulationTruth]:
    """Generate a complete panel and its ground truth, fully reproducible by seed."""
    rng = np.random.default_rng(spec.seed)
    cfg = spec.panel_config()
    countries, genders = cfg.countries, cfg.genders
    ages, years = cfg.ages, cfg.years
    n_train = spec.train_years[1] - spec.train_years[0] + 1
    n_total = len(years)
    n_a, n_g = len(ages), len(genders)
    bands = [b for b in BANDS
             if any(band_of(int(x), cfg.band_boundaries) == b for x in ages)]
    band_of_age = {int(x): band_of(int(x), cfg.band_boundaries) for x in ages}

    rel = ages - spec.age_min
    a = -9.5 + 0.09 * rel - 0.0003 * rel**2

    b = 1.0 + spec.slope_spread * rng.standard_normal((n_g, n_a))
    c = spec.curvature_scale * rng.standard_normal((n_g, n_a))
    for band in bands:
        cols = np.array([band_of_age[int(x)] == band for x in ages])
        b[:, cols] += 1.0 - b[:, cols].mean()
        c[:, cols] -= c[:, cols].mean()
    gamma = spec.cohort_gamma
    if spec.variant == VARIANT_SINGLE_NOCOHORT:
        c = np.zeros_like(c)
        gamma = 0.0

    if spec.variant == VARIANT_MULTI:
        country_effects = {
            ctry: float(spec.country_effect_sd * rng.standard_normal())
            for ctry in countries
        }
        gender_effects = {g: (spec.gender_effect if g == "male" else 0.0) for g in genders}
    else:
        country_effects = {ctry: 0.0 for ctry in countries}
        gender_effects = {g: 0.0 for g in genders}

    k = {
        (ctry, band): _driver_path(spec, rng, n_train, n_total)
        for ctry in countries
        for band in bands
    }

    log_rates = np.empty((len(countries), n_g, n_a, n_total))
    cohort = years[None, :] - ages[:, None]  # (A, T)
    # anchor the cohort term at the training-mean cohort so the log-rate
    # level stays in a mortality-like range with calendar years
    train_years_arr = np.arange(spec.train_years[0], spec.train_years[1] + 1)
    cohort_anchor = float(np.mean(train_years_arr[None, :] - ages[:, None]))
    for ci, ctry in enumerate(countries):
        k_by_age = np.stack([k[(ctry, band_of_age[int(x)])] for x in ages])  # (A, T)
        for gi, g in enumerate(genders):
            mean = (
                country_effects[ctry]
                + gender_effects[g]
                + a[:, None]
                + b[gi][:, None] * k_by_age
                + c[gi][:, None] * k_by_age**2
                + gamma * (cohort - cohort_anchor)
            )
            noise = np.stack([_cluster_noise(spec, rng, n_total) for _ in range(n_a)])
            log_rates[ci, gi] = mean + noise

    if spec.rate_kind == "q" and log_rates.max() >= 0.0:
        raise DataError("simulated log rates must stay below 0 for rate_kind 'q'")
    rates = np.exp(log_rates)
    exposures = np.full_like(rates, spec.exposure_scale)
    if spec.rate_kind == "q":
        deaths = -exposures * np.log1p(-rates)
    else:
        deaths = exposures * rates

    panel = MortalityPanel(
        countries=countries,
        genders=genders,
        ages=ages,
        years=years,
        deaths=deaths,
        exposures=exposures,
        rates=rates,
        log_rates=log_rates,
        config=cfg,
    )
    truth = SimulationTruth(
        spec=spec,
        years=years,
        ages=ages,
        k=k,
        a=a,
        b=b,
        c=c,
        gamma=gamma,
        cohort_anchor=cohort_anchor,
        country_effects=country_effects,
        gender_effects=gender_effects,
    )
    return panel, truth


def covariate_affine_maps(truth: SimulationTruth, covariates: dict) -> dict:
    """Least-squares affine map (alpha, beta) from each true driver series to
    the corresponding derived training covariate."""
    maps = {}
    for (country, band), series in covariates.items():
        k_true = truth.k_training(country, band)
        if k_true.size != series.values.size:
            raise DataError("covariate series does not span the training years")
        design = np.column_stack([np.ones_like(k_true), k_true])
        (alpha, beta), *_ = np.linalg.lstsq(design, series.values, rcond=None)
        maps[(country, band)] = (float(alpha), float(beta))
    return maps


def expected_single_population_beta(
    truth: SimulationTruth, design: DesignMatrix, maps: dict
) -> np.ndarray:
    """Design-parameterization truth for a single-population fit.

    The derived covariate is an affine image k_hat = alpha + beta * k of the
    true driver; substituting k = (k_hat - alpha) / beta into the generating
    model rewrites the coefficients as

        a'_x = a_x - b_x alpha / beta + c_x (alpha / beta)^2
        b'_x = b_x / beta - 2 c_x alpha / beta^2
        c'_x = c_x / beta^2

    while the cohort slope is invariant.  The returned vector is aligned
    with ``design.labels``.
    """
    if truth.spec.variant == VARIANT_MULTI:
        raise NotImplementedError("truth encoding is defined for single-population variants")
    (country,) = truth.spec.countries
    boundaries = truth.spec.band_boundaries
    ages = truth.ages
    a_prime = np.empty(len(ages))
    b_prime = np.empty(len(ages))
    c_prime = np.empty(len(ages))
    for i, x in enumerate(ages):
        alpha, beta = maps[(country, band_of(int(x), boundaries))]
        ratio = alpha / beta
        a_prime[i] = truth.a[i] - truth.b[0, i] * ratio + truth.c[0, i] * ratio**2
        b_prime[i] = truth.b[0, i] / beta - 2.0 * truth.c[0, i] * alpha / beta**2
        c_prime[i] = truth.c[0, i] / beta**2
    by_age = {int(x): i for i, x in enumerate(ages)}
    ref = a_prime[0]

    expected = np.empty(len(design.labels))
    for j, label in enumerate(design.labels):
        if label == "intercept":
            value = ref
            if design.cohort_center is not None:
                value += truth.gamma * (design.cohort_center - truth.cohort_anchor)
        elif label == "cohort":
            value = truth.gamma
        elif label.startswith("age["):
            value = a_prime[by_age[int(label[4:-1])]] - ref
        elif label.startswith("k2:"):
            value = c_prime[by_age[int(label[3:])]]
        elif label.startswith("k:"):
            value = b_prime[by_age[int(label[2:])]]
        else:
            raise DataError(f"unrecognized design label {label!r}")
        expected[j] = value
    return expected
