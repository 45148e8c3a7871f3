"""Command-line interface: ingest, fit, forecast, evaluate, simulate, report.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical or convergence error.  All outputs are CSV (plus JSON
sidecars); timestamps are confined to the run manifest so repeated runs
with identical inputs are bitwise identical elsewhere.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .config import GEE_MODELS, RunConfig
from .errors import (
    ConfigError,
    ConvergenceError,
    DataError,
    DegenerateDataError,
    DesignError,
    DomainError,
    MortGeeError,
    ParseError,
)
from .evaluation import load_panel, qic_table, run_experiment
from .mortality_data import serialize_hmd_table, RawCountTable, CountRow
from .simulate import SimulationSpec, simulate_panel

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

_DATA_ERRORS = (ParseError, DataError, DomainError, DegenerateDataError)
_NUMERIC_ERRORS = (ConvergenceError, DesignError, np.linalg.LinAlgError)


class _ArgumentParser(argparse.ArgumentParser):
    def error(self, message):  # map argparse usage errors onto exit code 1
        raise ConfigError(message)


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as handle:
            handle.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _write_frame(path: Path, frame: pd.DataFrame) -> None:
    _atomic_write(path, frame.to_csv(index=False))


def _write_manifest(out_dir: Path, command: str, cfg: RunConfig) -> None:
    manifest = {
        "command": command,
        "package_version": __version__,
        "created_utc": datetime.now(timezone.utc).isoformat(),
        "config": cfg.to_dict(),
    }
    _atomic_write(out_dir / "run_manifest.json", json.dumps(manifest, indent=2))


def _out_dir(cfg: RunConfig, args) -> Path:
    return Path(args.out if args.out is not None else cfg.out_dir)


def _load_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config)
    if getattr(args, "jobs", None) is not None:
        cfg.jobs = args.jobs
    if getattr(args, "allow_nonconverged", False):
        cfg.allow_nonconverged = True
    return cfg


def cmd_ingest(cfg: RunConfig, out_dir: Path) -> int:
    panel = load_panel(cfg)
    frame = panel.to_frame()
    _write_frame(out_dir / "panel.csv", frame)
    summary = {
        "countries": list(panel.countries),
        "genders": list(panel.genders),
        "n_ages": len(panel.ages),
        "n_years": len(panel.years),
        "n_cells": panel.n_cells,
        "rate_kind": panel.config.rate_kind,
        "zero_death_cells": [list(cell) for cell in panel.zero_substituted],
    }
    _atomic_write(out_dir / "ingest_summary.json", json.dumps(summary, indent=2))
    print(
        f"ingest: {panel.n_cells} cells "
        f"({len(panel.countries)} countries x {len(panel.genders)} genders x "
        f"{len(panel.ages)} ages x {len(panel.years)} years), "
        f"{len(panel.zero_substituted)} zero-death substitutions"
    )
    return EXIT_OK


def cmd_fit(cfg: RunConfig, out_dir: Path) -> int:
    if not any(model in GEE_MODELS for model in cfg.models):
        raise ConfigError("fit requires at least one of the GEE models in 'models'")
    panel = load_panel(cfg)
    rows = qic_table(cfg, panel)
    coef_records = []
    qic_records = []
    for row in rows:
        pop = row.population or ("all", "all")
        naive_se = row.fit.naive_se()
        robust_se = row.fit.robust_se()
        for term, est, nse, rse in zip(row.fit.labels, row.fit.beta, naive_se, robust_se):
            coef_records.append(
                {
                    "model": row.model,
                    "corstr": row.corstr,
                    "country": pop[0],
                    "gender": pop[1],
                    "term": term,
                    "estimate": est,
                    "naive_se": nse,
                    "robust_se": rse,
                }
            )
        qic_records.append(
            {
                "model": row.model,
                "corstr": row.corstr,
                "country": pop[0],
                "gender": pop[1],
                "QIC": row.report.qic,
                "QICu": row.report.qicu,
                "QuasiLik": row.report.quasi_lik,
                "CIC": row.report.cic,
                "Params": row.report.params,
                "QICC": row.report.qicc,
            }
        )
    _write_frame(out_dir / "coefficients.csv", pd.DataFrame.from_records(coef_records))
    _write_frame(out_dir / "qic.csv", pd.DataFrame.from_records(qic_records))
    print(f"fit: {len(qic_records)} model/corstr rows written to {out_dir / 'qic.csv'}")
    return EXIT_OK


def cmd_forecast(cfg: RunConfig, out_dir: Path) -> int:
    report = run_experiment(cfg)
    panel = report.panel
    records = []
    for (model, pop), mat in sorted(report.predictions.items()):
        for ai, age in enumerate(panel.ages):
            for ti, year in enumerate(panel.test_years):
                records.append(
                    {
                        "model": model,
                        "country": pop[0],
                        "gender": pop[1],
                        "age": int(age),
                        "year": int(year),
                        "y_hat": mat[ai, ti],
                        "rate_hat": float(np.exp(mat[ai, ti])),
                    }
                )
    _write_frame(out_dir / "forecast.csv", pd.DataFrame.from_records(records))

    cov_records = []
    meta = {}
    from .covariates import extend_with_forecast

    horizon = len(panel.test_years)
    for (model, pop), covs in sorted(report.covariate_sets.items(), key=str):
        for (country, band), series in sorted(covs.items()):
            extended = extend_with_forecast(series, horizon)
            for year, value in zip(extended.years, extended.values):
                cov_records.append(
                    {
                        "model": model,
                        "country": country,
                        "band": band,
                        "method": series.method,
                        "year": int(year),
                        "k": value,
                        "phase": "train" if year <= panel.train_years[-1] else "forecast",
                    }
                )
            if series.pc1_meta is not None:
                meta[f"{model}:{country}:{band}"] = {
                    "variance_explained": series.pc1_meta.variance_explained,
                    "sign_flipped": series.pc1_meta.sign_flipped,
                    "loadings": series.pc1_meta.loadings.tolist(),
                    "col_means": series.pc1_meta.col_means.tolist(),
                }
    _write_frame(out_dir / "covariates.csv", pd.DataFrame.from_records(cov_records))
    _atomic_write(out_dir / "covariates_meta.json", json.dumps(meta, indent=2, sort_keys=True))
    print(f"forecast: {len(records)} cells over {horizon} test years")
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig, out_dir: Path) -> int:
    report = run_experiment(cfg)
    mse_frame = pd.DataFrame.from_records(
        [
            {
                "country": r.country,
                "gender": r.gender,
                "model": r.model,
                "mse_rate": r.mse_rate,
                "mse_log": r.mse_log,
            }
            for r in report.mse_records
        ]
    )
    _write_frame(out_dir / "mse_report.csv", mse_frame)

    ratio_records = []
    summary_records = []
    for table in report.comparisons:
        for row in table.rows:
            ratio_records.append(
                {
                    "country": row.country,
                    "gender": row.gender,
                    "baseline": table.baseline,
                    "candidate": table.candidate,
                    "ratio": row.ratio,
                }
            )
        summary_records.append(
            {
                "baseline": table.baseline,
                "candidate": table.candidate,
                "wins": table.wins,
                "populations": len(table.rows),
            }
        )
    _write_frame(out_dir / "ratio_report.csv", pd.DataFrame.from_records(ratio_records))
    _write_frame(out_dir / "summary.csv", pd.DataFrame.from_records(summary_records))

    # wide plot-data table: one row per population, one ratio column per pair
    populations = sorted({(r.country, r.gender) for r in report.mse_records})
    wide = {"country": [p[0] for p in populations], "gender": [p[1] for p in populations]}
    for table in report.comparisons:
        lookup = {(row.country, row.gender): row.ratio for row in table.rows}
        wide[f"{table.baseline}_over_{table.candidate}"] = [
            lookup[pop] for pop in populations
        ]
    _write_frame(out_dir / "ratios_by_population.csv", pd.DataFrame(wide))

    from .baselines import lee_carter_frame, li_lee_frame

    baseline_frames = []
    if report.lc_fits:
        baseline_frames.extend(
            lee_carter_frame(fit, f"{pop[0]}:{pop[1]}") for pop, fit in sorted(report.lc_fits.items())
        )
    if report.ll_fit is not None:
        baseline_frames.append(li_lee_frame(report.ll_fit))
    if baseline_frames:
        _write_frame(out_dir / "baseline_parameters.csv", pd.concat(baseline_frames, ignore_index=True))

    for line in summary_lines(report):
        print(line)
    return EXIT_OK


def summary_lines(report) -> list[str]:
    lines = []
    for record in report.mse_records:
        lines.append(
            f"evaluate: {record.country}/{record.gender} {record.model} "
            f"mse_rate={record.mse_rate:.3e} mse_log={record.mse_log:.3e}"
        )
    for table in report.comparisons:
        lines.append(
            f"evaluate: {table.candidate} beats {table.baseline} in "
            f"{table.wins}/{len(table.rows)} populations"
        )
    return lines


def _table_from_panel(panel, country: str, kind: str) -> RawCountTable:
    ci = panel.countries.index(country)
    values = panel.deaths if kind == "deaths" else panel.exposures
    rows = []
    gi = {g: i for i, g in enumerate(panel.genders)}
    for ti, year in enumerate(panel.years):
        for ai, age in enumerate(panel.ages):
            female = values[ci, gi["female"], ai, ti] if "female" in gi else None
            male = values[ci, gi["male"], ai, ti] if "male" in gi else None
            parts = [v for v in (female, male) if v is not None]
            rows.append(
                CountRow(
                    year=int(year),
                    age=int(age),
                    open_interval=False,
                    female=float(female) if female is not None else None,
                    male=float(male) if male is not None else None,
                    total=float(sum(parts)),
                )
            )
    return RawCountTable(kind=kind, rows=rows)


def cmd_simulate(cfg: RunConfig, out_dir: Path) -> int:
    payload = dict(cfg.simulation)
    payload.setdefault("variant", cfg.resolved_variant)
    payload.setdefault("countries", sorted({c for c, _ in cfg.populations}))
    payload.setdefault("genders", sorted({g for _, g in cfg.populations}))
    payload.setdefault("age_min", cfg.age_min)
    payload.setdefault("age_max", cfg.age_max)
    payload.setdefault("train_years", cfg.train_years)
    payload.setdefault("test_years", cfg.test_years)
    payload.setdefault("band_boundaries", cfg.band_boundaries)
    payload.setdefault("rate_kind", cfg.effective_rate_kind)
    payload.setdefault("seed", cfg.seed)
    try:
        spec = SimulationSpec(**{k: tuple(v) if isinstance(v, list) else v
                                 for k, v in payload.items()})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid simulation settings: {exc}") from None
    panel, truth = simulate_panel(spec)
    data_dir = out_dir / "data"
    for country in panel.countries:
        for kind, name in (("deaths", "Deaths_1x1.txt"), ("exposures", "Exposures_1x1.txt")):
            table = _table_from_panel(panel, country, kind)
            _atomic_write(data_dir / country / name, serialize_hmd_table(table))
    _atomic_write(out_dir / "truth.json", truth.to_json())
    _write_frame(out_dir / "panel.csv", panel.to_frame())
    print(
        f"simulate: wrote {panel.n_cells} cells for {len(panel.countries)} countries "
        f"to {data_dir} (seed {spec.seed})"
    )
    return EXIT_OK


def cmd_report(cfg: RunConfig, out_dir: Path) -> int:
    any_found = False
    for name in ("qic.csv", "mse_report.csv", "ratio_report.csv", "summary.csv"):
        path = out_dir / name
        if not path.is_file():
            continue
        any_found = True
        frame = pd.read_csv(path)
        print(f"== {name} ==")
        print(frame.to_string(index=False))
        print()
    if not any_found:
        raise ConfigError(f"no report inputs found in {out_dir}; run fit/evaluate first")
    return EXIT_OK


_COMMANDS = {
    "ingest": cmd_ingest,
    "fit": cmd_fit,
    "forecast": cmd_forecast,
    "evaluate": cmd_evaluate,
    "simulate": cmd_simulate,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _ArgumentParser(prog="mortgee", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        cmd = sub.add_parser(name, description=f"run the {name} step")
        cmd.add_argument("--config", required=True, help="path to the JSON run config")
        cmd.add_argument("--out", default=None, help="output directory (overrides config)")
        cmd.add_argument("--jobs", type=int, default=None, help="population-level parallelism")
        cmd.add_argument(
            "--allow-nonconverged",
            action="store_true",
            help="keep going when a GEE fit fails to converge",
        )
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = _load_config(args)
        out_dir = _out_dir(cfg, args)
        out_dir.mkdir(parents=True, exist_ok=True)
        code = _COMMANDS[args.command](cfg, out_dir)
        _write_manifest(out_dir, args.command, cfg)
        return code
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except _NUMERIC_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except _DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except MortGeeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
