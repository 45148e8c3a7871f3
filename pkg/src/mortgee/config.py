"""Run configuration loaded from a JSON file.

Defaults mirror the reference experiment: ages 20-80, training years
1991-2010, test years 2011-2019, AR(1) working correlation, age-based
prior weights.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .design import VARIANT_MULTI, VARIANT_SINGLE, VARIANT_SINGLE_NOCOHORT, VARIANTS
from .errors import ConfigError
from .gee import CORR_KINDS
from .mortality_data import PanelConfig

MODEL_PCA_GEE = "pca-gee"
MODEL_AVG_GEE = "avg-gee"
MODEL_LC = "lc"
MODEL_LL = "ll"
MODEL_TOKENS = (MODEL_PCA_GEE, MODEL_AVG_GEE, MODEL_LC, MODEL_LL)

GEE_MODELS = (MODEL_PCA_GEE, MODEL_AVG_GEE)


@dataclass
class RunConfig:
    populations: tuple[tuple[str, str], ...] = (
        ("AUT", "female"),
        ("AUT", "male"),
        ("CZE", "female"),
        ("CZE", "male"),
    )
    age_min: int = 20
    age_max: int = 80
    train_years: tuple[int, int] = (1991, 2010)
    test_years: tuple[int, int] = (2011, 2019)
    band_boundaries: tuple[int, int] = (19, 50)
    rate_kind: str | None = None  # default: 'q' for multi-population, 'm' for single
    zero_death_rule: bool = False
    data_dir: str | None = None
    models: tuple[str, ...] = MODEL_TOKENS
    corstr: tuple[str, ...] = ("ar1",)
    user_correlation: list | None = None
    variant: str = "auto"
    gee_tol: float = 1e-8
    gee_max_iter: int = 50
    small_sample_correction: bool = True
    population_k_dynamics: str = "ar1"
    out_dir: str = "out"
    seed: int = 0
    jobs: int = 1
    allow_nonconverged: bool = False
    simulation: dict = field(default_factory=dict)

    def __post_init__(self):
        self.populations = tuple((str(c), str(g)) for c, g in self.populations)
        self.train_years = tuple(int(y) for y in self.train_years)
        self.test_years = tuple(int(y) for y in self.test_years)
        self.band_boundaries = tuple(int(b) for b in self.band_boundaries)
        if isinstance(self.models, str):
            self.models = (self.models,)
        self.models = tuple(self.models)
        if isinstance(self.corstr, str):
            self.corstr = (self.corstr,)
        self.corstr = tuple(self.corstr)
        if not self.models:
            raise ConfigError("model list must be non-empty")
        for model in self.models:
            if model not in MODEL_TOKENS:
                raise ConfigError(f"unknown model {model!r}; choose from {MODEL_TOKENS}")
        for token in self.corstr:
            if token not in CORR_KINDS:
                raise ConfigError(f"unknown corstr {token!r}; choose from {CORR_KINDS}")
        if "userdefined" in self.corstr and self.user_correlation is None:
            raise ConfigError("corstr 'userdefined' requires a user_correlation matrix")
        if self.variant not in ("auto",) + VARIANTS:
            raise ConfigError(f"variant must be 'auto' or one of {VARIANTS}")
        if self.rate_kind not in (None, "q", "m"):
            raise ConfigError("rate_kind must be 'q' or 'm'")
        if self.population_k_dynamics not in ("ar1", "rw"):
            raise ConfigError("population_k_dynamics must be 'ar1' or 'rw'")
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")

    @property
    def resolved_variant(self) -> str:
        if self.variant != "auto":
            return self.variant
        return VARIANT_MULTI if len(self.populations) > 1 else VARIANT_SINGLE

    @property
    def single_mode(self) -> bool:
        return self.resolved_variant in (VARIANT_SINGLE, VARIANT_SINGLE_NOCOHORT)

    @property
    def effective_rate_kind(self) -> str:
        if self.rate_kind is not None:
            return self.rate_kind
        return "m" if self.single_mode else "q"

    @property
    def primary_corstr(self) -> str:
        return self.corstr[0]

    def panel_config(self) -> PanelConfig:
        try:
            return PanelConfig(
                age_min=self.age_min,
                age_max=self.age_max,
                train_years=self.train_years,
                test_years=self.test_years,
                populations=self.populations,
                band_boundaries=self.band_boundaries,
                rate_kind=self.effective_rate_kind,
                zero_death_rule=self.zero_death_rule,
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_dict(cls, payload: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(payload) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        try:
            return cls(**payload)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            payload = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON in {path}: {exc}") from None
        if not isinstance(payload, dict):
            raise ConfigError(f"config root must be a JSON object, got {type(payload).__name__}")
        return cls.from_dict(payload)

    def to_dict(self) -> dict:
        return {
            "populations": [list(p) for p in self.populations],
            "age_min": self.age_min,
            "age_max": self.age_max,
            "train_years": list(self.train_years),
            "test_years": list(self.test_years),
            "band_boundaries": list(self.band_boundaries),
            "rate_kind": self.rate_kind,
            "zero_death_rule": self.zero_death_rule,
            "data_dir": self.data_dir,
            "models": list(self.models),
            "corstr": list(self.corstr),
            "user_correlation": self.user_correlation,
            "variant": self.variant,
            "gee_tol": self.gee_tol,
            "gee_max_iter": self.gee_max_iter,
            "small_sample_correction": self.small_sample_correction,
            "population_k_dynamics": self.population_k_dynamics,
            "out_dir": self.out_dir,
            "seed": self.seed,
            "jobs": self.jobs,
            "allow_nonconverged": self.allow_nonconverged,
            "simulation": self.simulation,
        }
