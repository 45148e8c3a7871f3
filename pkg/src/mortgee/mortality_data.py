"""Ingestion of HMD-style 1x1 count tables and assembly of log death-rate panels.

Input files follow the Human Mortality Database period 1x1 layout: two
preamble lines, a ``Year Age Female Male Total`` header, then one
whitespace-separated row per (year, age).  ``.`` marks a missing value and
a trailing ``+`` on the age token marks the open age interval.
"""

from __future__ import annotations

import math
from collections.abc import Mapping
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

from .errors import DataError, DomainError, ParseError

GENDERS = ("female", "male")

BAND_CHILDREN = "children"
BAND_YOUNG_ADULTS = "young_adults"
BAND_OLDER_ADULTS = "older_adults"
BANDS = (BAND_CHILDREN, BAND_YOUNG_ADULTS, BAND_OLDER_ADULTS)

RATE_KINDS = ("q", "m")

_HEADER = ("year", "age", "female", "male", "total")
_MISSING_TOKEN = "."


def band_of(age: int, boundaries: tuple[int, int] = (19, 50)) -> str:
    """Age-band label for a single age.

    Ages up to ``boundaries[0]`` are children, ages up to ``boundaries[1]``
    are young adults, everything older is an older adult.
    """
    children_max, young_max = boundaries
    if children_max >= young_max:
        raise ValueError(f"band boundaries must increase, got {boundaries}")
    if age <= children_max:
        return BAND_CHILDREN
    if age <= young_max:
        return BAND_YOUNG_ADULTS
    return BAND_OLDER_ADULTS


def asdr_from_counts(deaths: float, exposure: float) -> float:
    """Death probability q = 1 - exp(-deaths / exposure)."""
    if not exposure > 0:
        raise DomainError(f"exposure must be positive, got {exposure}")
    if deaths < 0:
        raise DomainError(f"deaths must be non-negative, got {deaths}")
    return -math.expm1(-deaths / exposure)


def central_rate_from_counts(deaths: float, exposure: float) -> float:
    """Central death rate m = deaths / exposure."""
    if not exposure > 0:
        raise DomainError(f"exposure must be positive, got {exposure}")
    if deaths < 0:
        raise DomainError(f"deaths must be non-negative, got {deaths}")
    return deaths / exposure


@dataclass(frozen=True)
class CountRow:
    year: int
    age: int
    open_interval: bool
    female: float | None
    male: float | None
    total: float | None

    def value(self, column: str) -> float | None:
        if column not in ("female", "male", "total"):
            raise ValueError(f"unknown column {column!r}")
        return getattr(self, column)


@dataclass
class RawCountTable:
    """One parsed deaths or exposures table (a single country's file)."""

    kind: str
    rows: list[CountRow]
    _index: dict[tuple[int, int], CountRow] = field(init=False, repr=False)

    def __post_init__(self):
        if self.kind not in ("deaths", "exposures"):
            raise ValueError(f"kind must be 'deaths' or 'exposures', got {self.kind!r}")
        index: dict[tuple[int, int], CountRow] = {}
        for row in self.rows:
            key = (row.year, row.age)
            if key in index:
                raise DataError(f"duplicate (year, age) pair {key} in {self.kind} table")
            index[key] = row
        self._index = index

    def get(self, year: int, age: int) -> CountRow | None:
        return self._index.get((year, age))

    def __len__(self) -> int:
        return len(self.rows)


def _parse_int(token: str, lineno: int, what: str) -> int:
    try:
        return int(token)
    except ValueError:
        raise ParseError(f"invalid {what} token {token!r}", lineno) from None


def _parse_age(token: str, lineno: int) -> tuple[int, bool]:
    open_interval = token.endswith("+")
    if open_interval:
        token = token[:-1]
    return _parse_int(token, lineno, "age"), open_interval


def _parse_value(token: str, lineno: int, column: str) -> float | None:
    if token == _MISSING_TOKEN:
        return None
    try:
        value = float(token)
    except ValueError:
        raise ParseError(f"invalid {column} value {token!r}", lineno) from None
    if not math.isfinite(value):
        raise ParseError(f"non-finite {column} value {token!r}", lineno)
    if value < 0:
        raise ParseError(f"negative {column} value {token!r}", lineno)
    return value


def parse_hmd_table(source, kind: str) -> RawCountTable:
    """Parse an HMD 1x1 text table.

    ``source`` is a string or a file-like object.  Raises ParseError with a
    line number on malformed rows and DataError on duplicate (year, age)
    pairs.
    """
    text = source.read() if hasattr(source, "read") else source
    lines = text.splitlines()
    if len(lines) < 3:
        raise ParseError("file too short: expected two preamble lines and a header")
    header = lines[2].split()
    if tuple(tok.lower() for tok in header) != _HEADER:
        raise ParseError(
            f"unexpected header {' '.join(header)!r}, expected 'Year Age Female Male Total'",
            lineno=3,
        )
    rows: list[CountRow] = []
    seen: dict[tuple[int, int], int] = {}
    for lineno, line in enumerate(lines[3:], start=4):
        if not line.strip():
            continue
        tokens = line.split()
        if len(tokens) != 5:
            raise ParseError(f"expected 5 fields, got {len(tokens)}", lineno)
        year = _parse_int(tokens[0], lineno, "year")
        age, open_interval = _parse_age(tokens[1], lineno)
        female = _parse_value(tokens[2], lineno, "female")
        male = _parse_value(tokens[3], lineno, "male")
        total = _parse_value(tokens[4], lineno, "total")
        key = (year, age)
        if key in seen:
            raise DataError(
                f"duplicate (year, age) pair {key} at lines {seen[key]} and {lineno}"
            )
        seen[key] = lineno
        rows.append(CountRow(year, age, open_interval, female, male, total))
    return RawCountTable(kind=kind, rows=rows)


def serialize_hmd_table(table: RawCountTable, title: str | None = None) -> str:
    """Render a RawCountTable back into the HMD text layout.

    Values are written with full float precision so that a parse round-trip
    is value-identical.
    """

    def fmt(value: float | None) -> str:
        return _MISSING_TOKEN if value is None else repr(value)

    if title is None:
        title = f"Synthetic, {table.kind.capitalize()} (period 1x1)"
    lines = [title, "", "  Year          Age             Female            Male           Total"]
    for row in table.rows:
        age_tok = f"{row.age}+" if row.open_interval else str(row.age)
        lines.append(
            f"  {row.year}  {age_tok}  {fmt(row.female)}  {fmt(row.male)}  {fmt(row.total)}"
        )
    return "\n".join(lines) + "\n"


def _as_population_tuple(populations) -> tuple[tuple[str, str], ...]:
    pops = tuple((str(c), str(g)) for c, g in populations)
    if not pops:
        raise ValueError("populations must be non-empty")
    for _, gender in pops:
        if gender not in GENDERS:
            raise ValueError(f"unknown gender {gender!r}")
    if len(set(pops)) != len(pops):
        raise ValueError("duplicate population selectors")
    return tuple(sorted(pops))


@dataclass(frozen=True)
class PanelConfig:
    """Rectangle selection for panel construction.

    The panel spans the contiguous year range from the first training year
    to the last test year; bands clip automatically to the age window.
    """

    age_min: int
    age_max: int
    train_years: tuple[int, int]
    test_years: tuple[int, int]
    populations: tuple[tuple[str, str], ...]
    band_boundaries: tuple[int, int] = (19, 50)
    rate_kind: str = "q"
    zero_death_rule: bool = False

    def __post_init__(self):
        object.__setattr__(self, "train_years", tuple(int(y) for y in self.train_years))
        object.__setattr__(self, "test_years", tuple(int(y) for y in self.test_years))
        object.__setattr__(self, "band_boundaries", tuple(int(b) for b in self.band_boundaries))
        object.__setattr__(self, "populations", _as_population_tuple(self.populations))
        if self.age_min > self.age_max:
            raise ValueError("age_min must not exceed age_max")
        t0, t1 = self.train_years
        s0, s1 = self.test_years
        if t0 > t1 or s0 > s1:
            raise ValueError("year ranges must be (first, last) with first <= last")
        if s0 <= t1:
            raise ValueError("test years must start strictly after the training years")
        if self.rate_kind not in RATE_KINDS:
            raise ValueError(f"rate_kind must be one of {RATE_KINDS}, got {self.rate_kind!r}")
        band_of(self.age_min, self.band_boundaries)  # validates boundary ordering
        # a partial cross product would leave holes in the rectangle
        expected = {(c, g) for c in self.countries for g in self.genders}
        if set(self.populations) != expected:
            raise ValueError("populations must form a full country x gender cross product")

    @property
    def countries(self) -> tuple[str, ...]:
        return tuple(sorted({c for c, _ in self.populations}))

    @property
    def genders(self) -> tuple[str, ...]:
        present = {g for _, g in self.populations}
        return tuple(g for g in GENDERS if g in present)

    @property
    def ages(self) -> np.ndarray:
        return np.arange(self.age_min, self.age_max + 1)

    @property
    def years(self) -> np.ndarray:
        return np.arange(self.train_years[0], self.test_years[1] + 1)


@dataclass(frozen=True)
class MortalityPanel:
    """Complete rectangular panel of log age-specific death rates.

    Arrays are indexed ``[country, gender, age, year]`` following the order
    of the ``countries``/``genders``/``ages``/``years`` fields.  Panels are
    treated as immutable once built and are safe to share across parallel
    fits.
    """

    countries: tuple[str, ...]
    genders: tuple[str, ...]
    ages: np.ndarray
    years: np.ndarray
    deaths: np.ndarray
    exposures: np.ndarray
    rates: np.ndarray
    log_rates: np.ndarray
    config: PanelConfig
    zero_substituted: tuple[tuple[str, str, int, int], ...] = ()

    @property
    def n_cells(self) -> int:
        return int(self.log_rates.size)

    @property
    def train_years(self) -> np.ndarray:
        t0, t1 = self.config.train_years
        return np.arange(t0, t1 + 1)

    @property
    def test_years(self) -> np.ndarray:
        s0, s1 = self.config.test_years
        return np.arange(s0, s1 + 1)

    def country_index(self, country: str) -> int:
        try:
            return self.countries.index(country)
        except ValueError:
            raise DataError(f"country {country!r} not in panel") from None

    def gender_index(self, gender: str) -> int:
        try:
            return self.genders.index(gender)
        except ValueError:
            raise DataError(f"gender {gender!r} not in panel") from None

    def _year_positions(self, years) -> np.ndarray:
        pos = np.searchsorted(self.years, years)
        ok = (pos < len(self.years)) & (self.years[np.minimum(pos, len(self.years) - 1)] == years)
        if not np.all(ok):
            missing = np.asarray(years)[~ok]
            raise DataError(f"years {missing.tolist()} not in panel")
        return pos

    def log_rate_matrix(self, country: str, gender: str, years=None) -> np.ndarray:
        """Log-rate matrix (ages x years) for one population."""
        ci = self.country_index(country)
        gi = self.gender_index(gender)
        mat = self.log_rates[ci, gi]
        if years is None:
            return mat.copy()
        return mat[:, self._year_positions(np.asarray(years))]

    def band_ages(self, band: str) -> np.ndarray:
        """Ages of the window belonging to a band (possibly empty)."""
        if band not in BANDS:
            raise ValueError(f"unknown band {band!r}")
        labels = [band_of(int(a), self.config.band_boundaries) for a in self.ages]
        return self.ages[np.array([lab == band for lab in labels])]

    def bands(self) -> tuple[str, ...]:
        """Bands that are non-empty under the configured age window."""
        return tuple(b for b in BANDS if self.band_ages(b).size > 0)

    def select(self, country: str | None = None, gender: str | None = None) -> "MortalityPanel":
        """Restrict the panel to one country and/or one gender."""
        ci = [self.country_index(country)] if country is not None else list(range(len(self.countries)))
        gi = [self.gender_index(gender)] if gender is not None else list(range(len(self.genders)))
        countries = tuple(self.countries[i] for i in ci)
        genders = tuple(self.genders[i] for i in gi)
        pops = tuple((c, g) for c in countries for g in genders)
        cfg = replace(self.config, populations=pops)
        take = np.ix_(ci, gi)
        subs = tuple(z for z in self.zero_substituted if z[0] in countries and z[1] in genders)
        return MortalityPanel(
            countries=countries,
            genders=genders,
            ages=self.ages,
            years=self.years,
            deaths=self.deaths[take],
            exposures=self.exposures[take],
            rates=self.rates[take],
            log_rates=self.log_rates[take],
            config=cfg,
            zero_substituted=subs,
        )

    def to_frame(self) -> pd.DataFrame:
        """Flat cell table with one row per (country, gender, age, year)."""
        records = []
        for ci, c in enumerate(self.countries):
            for gi, g in enumerate(self.genders):
                for ai, x in enumerate(self.ages):
                    band = band_of(int(x), self.config.band_boundaries)
                    for ti, t in enumerate(self.years):
                        records.append(
                            {
                                "country": c,
                                "gender": g,
                                "age": int(x),
                                "year": int(t),
                                "cohort": int(t) - int(x),
                                "band": band,
                                "deaths": self.deaths[ci, gi, ai, ti],
                                "exposure": self.exposures[ci, gi, ai, ti],
                                "q": self.rates[ci, gi, ai, ti],
                                "y": self.log_rates[ci, gi, ai, ti],
                            }
                        )
        return pd.DataFrame.from_records(records)


def build_panel(
    deaths: Mapping[str, RawCountTable],
    exposures: Mapping[str, RawCountTable],
    cfg: PanelConfig,
) -> MortalityPanel:
    """Assemble the complete log-rate panel for the configured rectangle.

    ``deaths`` and ``exposures`` map country codes to their parsed tables.
    Every cell must be present with positive exposure.  Zero-death cells
    are a hard error unless ``cfg.zero_death_rule`` is on, in which case the
    death count is replaced by 0.5 and the substitution is recorded.
    """
    countries = cfg.countries
    genders = cfg.genders
    ages = cfg.ages
    years = cfg.years
    shape = (len(countries), len(genders), len(ages), len(years))
    d_arr = np.empty(shape)
    e_arr = np.empty(shape)
    substituted: list[tuple[str, str, int, int]] = []

    for ci, c in enumerate(countries):
        if c not in deaths or c not in exposures:
            raise DataError(f"no input tables for country {c!r}")
        dt, et = deaths[c], exposures[c]
        if dt.kind != "deaths" or et.kind != "exposures":
            raise DataError(
                f"tables for {c!r} have kinds ({dt.kind!r}, {et.kind!r}), "
                "expected ('deaths', 'exposures')"
            )
        for gi, g in enumerate(genders):
            for ai, x in enumerate(ages):
                for ti, t in enumerate(years):
                    cell = f"({c}, {g}, age {int(x)}, year {int(t)})"
                    drow = dt.get(int(t), int(x))
                    erow = et.get(int(t), int(x))
                    if drow is None:
                        raise DataError(f"missing deaths row for {cell}")
                    if erow is None:
                        raise DataError(f"missing exposures row for {cell}")
                    d = drow.value(g)
                    e = erow.value(g)
                    if d is None:
                        raise DataError(f"missing deaths value for {cell}")
                    if e is None:
                        raise DataError(f"missing exposures value for {cell}")
                    if e <= 0:
                        raise DataError(f"non-positive exposure {e} for {cell}")
                    if d == 0:
                        if not cfg.zero_death_rule:
                            raise DataError(
                                f"zero deaths for {cell}; log rate undefined "
                                "(enable the zero-cell rule to substitute 0.5)"
                            )
                        d = 0.5
                        substituted.append((c, g, int(x), int(t)))
                    d_arr[ci, gi, ai, ti] = d
                    e_arr[ci, gi, ai, ti] = e

    if cfg.rate_kind == "q":
        rates = -np.expm1(-d_arr / e_arr)
    else:
        rates = d_arr / e_arr
    log_rates = np.log(rates)
    if not np.isfinite(log_rates).all():
        bad = np.argwhere(~np.isfinite(log_rates))[0]
        c, g = countries[bad[0]], genders[bad[1]]
        raise DataError(
            f"non-finite log rate at ({c}, {g}, age {int(ages[bad[2]])}, year {int(years[bad[3]])})"
        )

    return MortalityPanel(
        countries=countries,
        genders=genders,
        ages=ages,
        years=years,
        deaths=d_arr,
        exposures=e_arr,
        rates=rates,
        log_rates=log_rates,
        config=cfg,
        zero_substituted=tuple(substituted),
    )


def load_country_tables(
    data_dir, countries
) -> tuple[dict[str, RawCountTable], dict[str, RawCountTable]]:
    """Read ``<data_dir>/<COUNTRY>/{Deaths_1x1.txt,Exposures_1x1.txt}``."""
    from pathlib import Path

    root = Path(data_dir)
    deaths: dict[str, RawCountTable] = {}
    exposures: dict[str, RawCountTable] = {}
    for c in countries:
        for kind, name, store in (
            ("deaths", "Deaths_1x1.txt", deaths),
            ("exposures", "Exposures_1x1.txt", exposures),
        ):
            path = root / c / name
            if not path.is_file():
                raise DataError(f"missing input file {path}")
            store[c] = parse_hmd_table(path.read_text(encoding="utf-8-sig"), kind)
    return deaths, exposures
