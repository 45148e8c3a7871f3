"""Gaussian identity-link generalized estimating equations with prior weights.

Estimation alternates a generalized-least-squares update for the
coefficients with moment updates for the dispersion and the working
correlation parameter, starting from the weighted least-squares
(independence) solution.  Prior weights act as inverse-variance scalars,
Var(y_i) = phi / w_i.  Coefficient covariances are reported both
model-based (naive) and sandwich (robust), and the QIC family of
quasi-likelihood information criteria supports model selection across
working correlation structures.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .design import ClusterLayout, DesignMatrix
from .errors import DesignError, DomainError

CORR_KINDS = ("independence", "exchangeable", "ar1", "unstructured", "userdefined")

_CLAMP_MARGIN = 1e-6


@dataclass(frozen=True)
class WorkingCorrelation:
    """Working within-cluster correlation structure.

    Scalar-parameter kinds carry ``rho``; unstructured and userdefined
    carry a full ``rho_matrix`` on the common wave grid.
    """

    kind: str
    rho: float | None = None
    rho_matrix: np.ndarray | None = None
    clamped: bool = False

    def __post_init__(self):
        if self.kind not in CORR_KINDS:
            raise DomainError(f"correlation kind must be one of {CORR_KINDS}, got {self.kind!r}")
        if self.rho_matrix is not None:
            object.__setattr__(self, "rho_matrix", np.asarray(self.rho_matrix, dtype=float))


def validate_working_correlation(corr: WorkingCorrelation, n_max: int) -> None:
    """Check the positive-definiteness constraints for cluster size ``n_max``."""
    if corr.kind == "independence":
        return
    if corr.kind in ("exchangeable", "ar1"):
        if corr.rho is None:
            raise DomainError(f"{corr.kind} correlation requires rho")
        if corr.kind == "ar1" and not abs(corr.rho) < 1:
            raise DomainError(f"ar1 rho must satisfy |rho| < 1, got {corr.rho}")
        if corr.kind == "exchangeable":
            lower = -1.0 / (n_max - 1) if n_max > 1 else -1.0
            if not (lower < corr.rho < 1.0):
                raise DomainError(
                    f"exchangeable rho must lie in ({lower:.6g}, 1) for cluster size "
                    f"{n_max}, got {corr.rho}"
                )
        return
    mat = corr.rho_matrix
    if mat is None:
        raise DomainError(f"{corr.kind} correlation requires rho_matrix")
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise DomainError("rho_matrix must be square")
    if not np.allclose(np.diag(mat), 1.0, atol=1e-8):
        raise DomainError("rho_matrix must have a unit diagonal")
    if not np.allclose(mat, mat.T, atol=1e-8):
        raise DomainError("rho_matrix must be symmetric")
    if np.linalg.eigvalsh((mat + mat.T) / 2).min() <= 0:
        raise DomainError("rho_matrix must be positive definite")


def correlation_matrix(
    corr: WorkingCorrelation, n: int, wave_positions=None
) -> np.ndarray:
    """The n x n working correlation matrix for one cluster.

    For unstructured and userdefined kinds the stored matrix is restricted
    to ``wave_positions`` (indices into the common wave grid); by default
    the leading n x n block is used.
    """
    if n < 1:
        raise DomainError(f"cluster size must be >= 1, got {n}")
    validate_working_correlation(corr, n)
    if corr.kind == "independence":
        return np.eye(n)
    if corr.kind == "exchangeable":
        mat = np.full((n, n), corr.rho, dtype=float)
        np.fill_diagonal(mat, 1.0)
        return mat
    if corr.kind == "ar1":
        idx = np.arange(n)
        return corr.rho ** np.abs(idx[:, None] - idx[None, :])
    stored = corr.rho_matrix
    pos = np.arange(n) if wave_positions is None else np.asarray(wave_positions, dtype=int)
    if pos.size != n or pos.max(initial=-1) >= stored.shape[0]:
        raise DomainError(
            f"cannot restrict a {stored.shape[0]}x{stored.shape[0]} correlation "
            f"matrix to {n} waves at positions {pos.tolist()}"
        )
    return stored[np.ix_(pos, pos)]


def estimate_dispersion(
    residuals, weights, n_obs: int, p: int, small_sample_correction: bool = True
) -> float:
    """Moment estimate phi = sum(w * r^2) / (N - p)."""
    r = np.asarray(residuals, dtype=float)
    w = np.asarray(weights, dtype=float)
    den = n_obs - p if small_sample_correction else n_obs
    if den <= 0:
        raise DomainError(f"cannot estimate dispersion with N={n_obs} and p={p}")
    return float(w @ (r * r)) / den


def _standardize(resid_clusters, phi, weights_clusters):
    scale = math.sqrt(phi)
    out = []
    for i, r in enumerate(resid_clusters):
        r = np.asarray(r, dtype=float)
        if weights_clusters is not None:
            r = r * np.sqrt(np.asarray(weights_clusters[i], dtype=float))
        out.append(r / scale)
    return out


def _clamp(value: float, lower: float, upper: float) -> tuple[float, bool]:
    # clamp inside an open interval, keeping a margin so the working
    # correlation matrix stays numerically positive definite
    if value >= upper - _CLAMP_MARGIN:
        return upper - _CLAMP_MARGIN, True
    if value <= lower + _CLAMP_MARGIN:
        return lower + _CLAMP_MARGIN, True
    return value, False


def estimate_rho(
    resid_clusters,
    phi: float,
    kind: str,
    weights_clusters=None,
    p: int = 0,
    small_sample_correction: bool = True,
):
    """Moment estimate of the working correlation parameter.

    ``resid_clusters`` holds the Pearson residuals per cluster (a list of
    1-d arrays, or a 2-d array for clusters of equal size); they are
    standardized internally by sqrt(phi) and the prior weights.  Returns
    ``(rho, clamped)`` for scalar kinds or ``(matrix, adjusted)`` for the
    unstructured kind.  Estimates outside the positive-definite range are
    clamped to the boundary minus 1e-6 with a warning.
    """
    if kind not in ("exchangeable", "ar1", "unstructured"):
        raise DomainError(f"no correlation parameter to estimate for kind {kind!r}")
    if isinstance(resid_clusters, np.ndarray) and resid_clusters.ndim == 2:
        resid_clusters = list(resid_clusters)
        if weights_clusters is not None:
            weights_clusters = list(np.asarray(weights_clusters))
    if phi <= 0:
        raise DomainError("phi must be positive to standardize residuals")
    std = _standardize(resid_clusters, phi, weights_clusters)
    sizes = np.array([r.size for r in std])
    correction = p if small_sample_correction else 0

    if kind == "exchangeable":
        num = sum(((r.sum() ** 2 - r @ r) / 2.0) for r in std)
        den = float(np.sum(sizes * (sizes - 1) / 2.0)) - correction
        if den <= 0:
            raise DomainError("non-positive denominator in exchangeable rho estimate")
        n_max = int(sizes.max())
        lower = -1.0 / (n_max - 1) if n_max > 1 else -1.0
        rho, clamped = _clamp(num / den, lower, 1.0)
        if clamped:
            warnings.warn("exchangeable rho clamped to the positive-definite range")
        return rho, clamped

    if kind == "ar1":
        num = sum(float(r[:-1] @ r[1:]) for r in std if r.size >= 2)
        den = float(np.sum(sizes - 1)) - correction
        if den <= 0:
            raise DomainError("non-positive denominator in ar1 rho estimate")
        rho, clamped = _clamp(num / den, -1.0, 1.0)
        if clamped:
            warnings.warn("ar1 rho clamped to the positive-definite range")
        return rho, clamped

    # unstructured: elementwise average at matched wave pairs
    if len(set(sizes.tolist())) != 1:
        raise DesignError("unstructured correlation requires a common wave grid")
    stacked = np.vstack(std)
    den = stacked.shape[0] - correction
    if den <= 0:
        raise DomainError("non-positive denominator in unstructured estimate")
    raw = stacked.T @ stacked / den
    d = np.sqrt(np.diag(raw))
    if np.any(d <= 0):
        raise DomainError("degenerate wave variance in unstructured estimate")
    mat = raw / np.outer(d, d)
    adjusted = False
    eigvals, eigvecs = np.linalg.eigh((mat + mat.T) / 2)
    if eigvals.min() <= 0:
        eigvals = np.clip(eigvals, 1e-6, None)
        mat = eigvecs @ np.diag(eigvals) @ eigvecs.T
        d = np.sqrt(np.diag(mat))
        mat = mat / np.outer(d, d)
        adjusted = True
        warnings.warn("unstructured correlation adjusted to be positive definite")
    np.fill_diagonal(mat, 1.0)
    return (mat + mat.T) / 2, adjusted


@dataclass(frozen=True)
class GeeFit:
    labels: tuple[str, ...]
    beta: np.ndarray
    naive_cov: np.ndarray
    robust_cov: np.ndarray
    phi: float
    corr: WorkingCorrelation
    quasi_lik: float
    n_iter: int
    converged: bool
    n_clusters: int
    n_obs: int
    p: int

    def naive_se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.naive_cov))

    def robust_se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.robust_cov))


@dataclass(frozen=True)
class QicReport:
    qic: float
    qicu: float
    quasi_lik: float
    cic: float
    params: int
    qicc: float | None


def _normalize_corstr(corstr, rho_matrix) -> WorkingCorrelation:
    if isinstance(corstr, WorkingCorrelation):
        return corstr
    if corstr not in CORR_KINDS:
        raise DomainError(f"corstr must be one of {CORR_KINDS}, got {corstr!r}")
    if corstr == "userdefined":
        if rho_matrix is None:
            raise DomainError("userdefined correlation requires rho_matrix")
        return WorkingCorrelation("userdefined", rho_matrix=rho_matrix)
    if corstr == "unstructured" and rho_matrix is not None:
        return WorkingCorrelation("unstructured", rho_matrix=rho_matrix)
    return WorkingCorrelation(corstr)


class _ClusterData:
    """Per-cluster views of the weighted design, batched when rectangular."""

    def __init__(self, design: DesignMatrix, layout: ClusterLayout):
        self.X = design.matrix
        self.y = design.response
        self.w = layout.weights
        self.n_obs, self.p = self.X.shape
        self.blocks = list(layout.blocks())
        self.sizes = np.array([stop - start for _, start, stop in self.blocks])
        self.rectangular = bool(self.sizes.size) and bool(np.all(self.sizes == self.sizes[0]))
        sw = np.sqrt(self.w)
        self.Xw = self.X * sw[:, None]
        self.yw = self.y * sw
        self.sw = sw
        if self.rectangular:
            k, n = len(self.blocks), int(self.sizes[0])
            self.U = self.Xw.reshape(k, n, self.p)
            self.Yw = self.yw.reshape(k, n)
        waves = layout.waves
        grids = {tuple(waves[start:stop].tolist()) for _, start, stop in self.blocks}
        self.common_waves = len(grids) == 1

    def whitened_system(self, r_chol_by_size: dict[int, np.ndarray] | None):
        """Stacked rows (W, z) with W' W = sum_i X_i' V0^-1 X_i.

        ``r_chol_by_size`` maps cluster size to an upper-triangular C with
        C' C = R^-1 (None means independence).  Solving the least-squares
        problem min ||W beta - z|| is the GLS coefficient update; working
        at cond(X) instead of cond(X)^2 keeps the update accurate when the
        covariate and its square are nearly collinear.
        """
        if r_chol_by_size is None:
            return self.Xw, self.yw
        if self.rectangular:
            c = r_chol_by_size[int(self.sizes[0])]
            w = np.matmul(c, self.U).reshape(-1, self.p)
            z = (self.Yw @ c.T).reshape(-1)
            return w, z
        w_parts, z_parts = [], []
        for _, a, b in self.blocks:
            c = r_chol_by_size[b - a]
            w_parts.append(c @ self.Xw[a:b])
            z_parts.append(c @ self.yw[a:b])
        return np.vstack(w_parts), np.concatenate(z_parts)

    def scores(self, r_inv_by_size: dict[int, np.ndarray] | None, resid):
        """Per-cluster score vectors X_i' V0^-1 (y_i - mu_i), stacked (K, p)."""
        if r_inv_by_size is None:
            rw = resid * self.sw
            starts = np.array([a for _, a, _ in self.blocks])
            return np.add.reduceat(self.Xw * rw[:, None], starts, axis=0)
        if self.rectangular:
            r_inv = r_inv_by_size[int(self.sizes[0])]
            rw = (resid * self.sw).reshape(len(self.blocks), -1)
            return np.einsum("knp,kn->kp", self.U, rw @ r_inv.T)
        out = []
        for _, a, b in self.blocks:
            ri = r_inv_by_size[b - a]
            out.append(self.Xw[a:b].T @ (ri @ (resid[a:b] * self.sw[a:b])))
        return np.stack(out)

    def residual_clusters(self, resid):
        if self.rectangular:
            return resid.reshape(len(self.blocks), -1)
        return [resid[a:b] for _, a, b in self.blocks]

    def weight_clusters(self):
        if self.rectangular:
            return self.w.reshape(len(self.blocks), -1)
        return [self.w[a:b] for _, a, b in self.blocks]


def _lstsq_beta(w: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Least-squares coefficients of the whitened system, column-equilibrated."""
    norms = np.linalg.norm(w, axis=0)
    if np.any(norms == 0):
        raise DesignError("design has an identically zero column after whitening")
    solution, _, rank, _ = linalg.lstsq(w / norms, z, lapack_driver="gelsy")
    if rank < w.shape[1]:
        raise DesignError("singular bread matrix in GEE update")
    return solution / norms


def _bread_inverse(w: np.ndarray) -> np.ndarray:
    """(W' W)^-1 via the QR factor of the equilibrated whitened system."""
    norms = np.linalg.norm(w, axis=0)
    r = np.linalg.qr(w / norms, mode="r")
    ident = np.eye(w.shape[1])
    r_inv = linalg.solve_triangular(r, ident, lower=False)
    scaled = r_inv @ r_inv.T
    return scaled / np.outer(norms, norms)


def fit_gee(
    design: DesignMatrix,
    layout: ClusterLayout,
    corstr="ar1",
    tol: float = 1e-8,
    max_iter: int = 50,
    small_sample_correction: bool = True,
    rho_matrix=None,
) -> GeeFit:
    """Fit the marginal Gaussian model by iterated generalized least squares.

    ``corstr`` is a kind token or a WorkingCorrelation (required for the
    userdefined pass-through).  Convergence is max|delta beta| < tol; a fit
    that exhausts ``max_iter`` is returned with ``converged=False``.  When a
    correlation-parameter update is undefined (degenerate moment
    denominator), the update falls back to the independence matrix with a
    warning rather than aborting the fit.
    """
    corr = _normalize_corstr(corstr, rho_matrix)
    data = _ClusterData(design, layout)
    n_obs, p = data.n_obs, data.p
    n_max = int(data.sizes.max())
    if corr.kind in ("unstructured", "userdefined"):
        if not (data.rectangular and data.common_waves):
            raise DesignError(f"{corr.kind} correlation requires a common wave grid")
    if corr.kind == "userdefined":
        validate_working_correlation(corr, n_max)
        if corr.rho_matrix.shape[0] != n_max:
            raise DesignError(
                f"userdefined matrix is {corr.rho_matrix.shape[0]}x"
                f"{corr.rho_matrix.shape[0]} but clusters have {n_max} waves"
            )

    distinct_sizes = sorted(set(int(s) for s in data.sizes))

    def correlation_operators(state: WorkingCorrelation):
        """Per-size inverse correlations and factors C with C'C = R^-1."""
        if state.kind == "independence":
            return None, None
        if state.rho is None and state.rho_matrix is None:
            # no parameter estimated yet (e.g. perfect fit): behave as independence
            return None, None
        inverses, factors = {}, {}
        for size in distinct_sizes:
            mat = correlation_matrix(state, size)
            try:
                chol = np.linalg.cholesky(mat)
            except np.linalg.LinAlgError:
                raise DomainError("working correlation matrix is not positive definite")
            c = linalg.solve_triangular(chol, np.eye(size), lower=True)
            factors[size] = c
            inverses[size] = c.T @ c
        return inverses, factors

    estimate_kind = corr.kind if corr.kind in ("exchangeable", "ar1", "unstructured") else None
    state = corr
    beta = _lstsq_beta(*data.whitened_system(None))
    # residual mass at floating-point noise level counts as a perfect fit
    y_scale = math.sqrt(max(float(data.w @ (data.y * data.y)) / n_obs, 1e-300))
    phi_floor = (1e-12 * max(1.0, y_scale)) ** 2

    def dispersion(resid):
        value = estimate_dispersion(resid, data.w, n_obs, p, small_sample_correction)
        return 0.0 if value < phi_floor else value

    phi = 0.0
    n_iter = 0
    converged = False
    for n_iter in range(1, max_iter + 1):
        resid = data.y - data.X @ beta
        phi = dispersion(resid)
        if estimate_kind is not None and phi > 0:
            try:
                value, clamped = estimate_rho(
                    data.residual_clusters(resid),
                    phi,
                    estimate_kind,
                    weights_clusters=data.weight_clusters(),
                    p=p,
                    small_sample_correction=small_sample_correction,
                )
            except DomainError as exc:
                warnings.warn(
                    f"correlation update unavailable ({exc}); using independence"
                )
                if estimate_kind == "unstructured":
                    state = WorkingCorrelation("unstructured", rho_matrix=np.eye(n_max))
                else:
                    state = WorkingCorrelation(corr.kind, rho=0.0)
                value = None
            if value is not None:
                if estimate_kind == "unstructured":
                    state = WorkingCorrelation("unstructured", rho_matrix=value, clamped=clamped)
                else:
                    state = WorkingCorrelation(corr.kind, rho=value, clamped=clamped)
        beta_new = _lstsq_beta(*data.whitened_system(correlation_operators(state)[1]))
        delta = float(np.max(np.abs(beta_new - beta)))
        beta = beta_new
        if delta < tol:
            converged = True
            break

    # refresh dispersion and correlation at the final coefficients
    resid = data.y - data.X @ beta
    phi = dispersion(resid)
    if estimate_kind is not None and phi > 0:
        try:
            value, clamped = estimate_rho(
                data.residual_clusters(resid),
                phi,
                estimate_kind,
                weights_clusters=data.weight_clusters(),
                p=p,
                small_sample_correction=small_sample_correction,
            )
            if estimate_kind == "unstructured":
                state = WorkingCorrelation("unstructured", rho_matrix=value, clamped=clamped)
            else:
                state = WorkingCorrelation(corr.kind, rho=value, clamped=clamped)
        except DomainError:
            pass

    inverses, factors = correlation_operators(state)
    bread_inv = _bread_inverse(data.whitened_system(factors)[0])
    naive_cov = phi * bread_inv
    scores = data.scores(inverses, resid)
    meat = scores.T @ scores
    robust_cov = bread_inv @ meat @ bread_inv
    naive_cov = (naive_cov + naive_cov.T) / 2
    robust_cov = (robust_cov + robust_cov.T) / 2
    weighted_ss = float(data.w @ (resid * resid))
    quasi_lik = 0.0 if phi == 0.0 else -0.5 * weighted_ss / phi

    if not converged:
        warnings.warn(
            f"GEE did not converge in {max_iter} iterations (last max|dbeta| > {tol:g})"
        )
    return GeeFit(
        labels=design.labels,
        beta=beta,
        naive_cov=naive_cov,
        robust_cov=robust_cov,
        phi=phi,
        corr=state,
        quasi_lik=quasi_lik,
        n_iter=n_iter,
        converged=converged,
        n_clusters=data.sizes.size,
        n_obs=n_obs,
        p=p,
    )


def quasi_likelihood(fit: GeeFit, design: DesignMatrix, layout: ClusterLayout) -> float:
    """Gaussian quasi-likelihood -0.5 * sum(w * r^2) / phi at the fitted beta.

    A zero dispersion marks a perfect fit, for which the quasi-likelihood
    is zero by convention.
    """
    if fit.phi == 0.0:
        return 0.0
    resid = design.response - design.matrix @ fit.beta
    weighted_ss = float(layout.weights @ (resid * resid))
    return -0.5 * weighted_ss / fit.phi


def qic_report(fit: GeeFit, independence_refit: GeeFit) -> QicReport:
    """QIC family for ``fit`` using the matching independence refit.

    CIC = trace(Omega_I V_R) with Omega_I the naive information of the
    independence fit and V_R the robust covariance of ``fit``.
    """
    if independence_refit.corr.kind != "independence":
        raise DomainError("independence_refit must use the independence structure")
    if fit.labels != independence_refit.labels or fit.n_obs != independence_refit.n_obs:
        raise DesignError("fits compare different designs")
    cic = float(np.trace(np.linalg.solve(independence_refit.naive_cov, fit.robust_cov)))
    q = fit.quasi_lik
    p = fit.p
    qic = -2.0 * q + 2.0 * cic
    qicu = -2.0 * q + 2.0 * p
    qicc = None
    if fit.n_obs > p + 1:
        qicc = qic + 2.0 * p * (p + 1) / (fit.n_obs - p - 1)
    return QicReport(qic, qicu, q, cic, p, qicc)


def predict(fit: GeeFit, new_design: DesignMatrix) -> np.ndarray:
    """Fitted values X_new @ beta on the log-rate scale."""
    if tuple(new_design.labels) != tuple(fit.labels):
        raise DesignError("prediction design columns do not match the fit")
    return new_design.matrix @ fit.beta
