"""Mortality-rate forecasting with GEE regression on PCA and band-average covariates.

The package ingests HMD-style deaths/exposures tables, builds log
death-rate panels, derives per-(country, age-band) covariate series
(first-principal-component scores or band averages), fits marginal
Gaussian GEE models under several working correlation structures with
QIC-based model selection, extrapolates the covariates by random walks
with drift, and benchmarks the forecasts against Lee-Carter and Li-Lee
baselines on train/test splits.
"""

__version__ = "0.1.0"

from .baselines import (
    Ar1Model,
    LeeCarterFit,
    LiLeeFit,
    fit_ar1,
    fit_lee_carter,
    fit_li_lee,
    forecast_ar1,
    forecast_lee_carter,
    forecast_li_lee,
)
from .config import RunConfig
from .covariates import (
    CovariateSeries,
    DriftModel,
    Pc1Meta,
    build_avg_covariate,
    build_covariates,
    build_pca_covariate,
    extend_with_forecast,
    fit_drift,
    fit_rw_drift,
    forecast_rw,
    pc1_scores,
)
from .design import (
    VARIANT_MULTI,
    VARIANT_SINGLE,
    VARIANT_SINGLE_NOCOHORT,
    ClusterLayout,
    DesignMatrix,
    ModelFormula,
    build_design,
    weights_from_age,
)
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
from .evaluation import (
    ComparisonTable,
    EvalReport,
    MseRecord,
    compare,
    mse_log_scale,
    mse_rates,
    qic_table,
    run_experiment,
)
from .gee import (
    GeeFit,
    QicReport,
    WorkingCorrelation,
    correlation_matrix,
    estimate_dispersion,
    estimate_rho,
    fit_gee,
    predict,
    qic_report,
    quasi_likelihood,
)
from .mortality_data import (
    MortalityPanel,
    PanelConfig,
    RawCountTable,
    asdr_from_counts,
    band_of,
    build_panel,
    parse_hmd_table,
    serialize_hmd_table,
)
from .simulate import (
    SimulationSpec,
    SimulationTruth,
    covariate_affine_maps,
    expected_single_population_beta,
    simulate_panel,
)
