"""Regression kernels for chained-equations imputation.

Three families: linear (continuous targets), logistic (binary) and
baseline-category multinomial logit (categorical, reference = lowest level).
Each fitter returns a :class:`FitResult`; :func:`draw_params` takes one
approximate-posterior draw around the MLE and :func:`impute_cells` turns a
draw into imputed values.

The ``*_xy`` functions take a ready design matrix and are what the
imputation engine calls in its inner loop; ``fit_linear``/``fit_logistic``/
``fit_multinomial`` build the design from named columns first.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.special import expit, log_expit

MAX_ITER = 50
TOL = 1e-8
MAX_HALVINGS = 10
COEF_BOUND = 30.0
RIDGE = 1e-8
EIG_FLOOR = 1e-10


class FitError(RuntimeError):
    pass


class FitWarning(UserWarning):
    pass


@dataclass(frozen=True)
class DesignSpec:
    """Response plus predictors; categorical predictors expand to indicators
    for every level but the lowest."""

    response: str
    predictors: tuple[str, ...] = ()
    categorical: Mapping[str, Sequence[float]] = field(default_factory=dict)
    include_intercept: bool = True

    def __post_init__(self):
        if self.response in self.predictors:
            raise ValueError(f"response {self.response!r} is also a predictor")
        object.__setattr__(self, "predictors", tuple(self.predictors))

    @property
    def labels(self) -> list[str]:
        out = ["(intercept)"] if self.include_intercept else []
        for p in self.predictors:
            if p in self.categorical:
                out += [f"{p}={lvl:g}" for lvl in sorted(self.categorical[p])[1:]]
            else:
                out.append(p)
        return out


@dataclass
class FitResult:
    family: str
    coef: np.ndarray
    coef_cov: np.ndarray
    converged: bool
    iterations: int
    loglik: float
    n: int
    sigma2: float | None = None
    rss: float | None = None
    xtx_inv: np.ndarray | None = None
    levels: tuple[float, ...] | None = None
    flags: tuple[str, ...] = ()
    predictors: tuple[str, ...] | None = None

    @property
    def n_params(self) -> int:
        return self.coef.size

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.coef_cov), 0, None)).reshape(self.coef.shape)


@dataclass
class ParamDraw:
    family: str
    coef: np.ndarray
    sigma2: float | None = None
    levels: tuple[float, ...] | None = None
    flags: tuple[str, ...] = ()


def design_matrix(data: Mapping[str, np.ndarray], spec: DesignSpec, rows: np.ndarray | None = None) -> np.ndarray:
    n = len(data[spec.response]) if spec.response in data else len(next(iter(data.values())))
    idx = slice(None) if rows is None else rows
    cols = []
    if spec.include_intercept:
        m = n if rows is None else (int(rows.sum()) if rows.dtype == bool else len(rows))
        cols.append(np.ones(m))
    for p in spec.predictors:
        v = np.asarray(data[p], dtype=float)[idx]
        if p in spec.categorical:
            for lvl in sorted(spec.categorical[p])[1:]:
                cols.append((v == lvl).astype(float))
        else:
            cols.append(v)
    return np.column_stack(cols)


def complete_rows(data: Mapping[str, np.ndarray], spec: DesignSpec) -> np.ndarray:
    ok = ~np.isnan(np.asarray(data[spec.response], dtype=float))
    for p in spec.predictors:
        ok &= ~np.isnan(np.asarray(data[p], dtype=float))
    return ok


def _check_rows(n: int, p: int) -> None:
    if n < p + 2:
        raise FitError(f"need at least {p + 2} complete rows for {p} parameters, got {n}")


# linear -----------------------------------------------------------------

def fit_linear_xy(X: np.ndarray, y: np.ndarray) -> FitResult:
    n, p = X.shape
    _check_rows(n, p)
    xtx = X.T @ X
    flags = ()
    try:
        L = np.linalg.cholesky(xtx)
        if np.min(np.diag(L)) ** 2 < 1e-12 * np.max(np.diag(xtx)):
            raise np.linalg.LinAlgError
    except np.linalg.LinAlgError:
        flags = ("degraded",)
        xtx = xtx + RIDGE * np.eye(p)
        L = np.linalg.cholesky(xtx)
    Linv = np.linalg.inv(L)
    xtx_inv = Linv.T @ Linv
    coef = xtx_inv @ (X.T @ y)
    resid = y - X @ coef
    rss = float(resid @ resid)
    sigma2 = rss / (n - p)
    loglik = -0.5 * n * (np.log(2 * np.pi * max(rss / n, 1e-300)) + 1)
    return FitResult("linear", coef, sigma2 * xtx_inv, True, 1, loglik, n,
                     sigma2=sigma2, rss=rss, xtx_inv=xtx_inv, flags=flags)


def fit_linear(data: Mapping[str, np.ndarray], spec: DesignSpec) -> FitResult:
    rows = complete_rows(data, spec)
    X = design_matrix(data, spec, rows)
    y = np.asarray(data[spec.response], dtype=float)[rows]
    return fit_linear_xy(X, y)


# logistic ---------------------------------------------------------------

def logistic_loglik(beta: np.ndarray, X: np.ndarray, y: np.ndarray) -> float:
    eta = X @ beta
    return float(y @ eta + np.sum(log_expit(-eta)))


def logistic_score(beta: np.ndarray, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    return X.T @ (y - expit(X @ beta))


def fit_logistic_xy(X: np.ndarray, y: np.ndarray, max_iter: int = MAX_ITER, tol: float = TOL,
                    start: np.ndarray | None = None) -> FitResult:
    """Logistic MLE by IRLS (Newton) with step halving.

    Converged means max |score| < ``tol``. Coefficients that run past
    ``COEF_BOUND`` are clamped there and the fit is flagged as separated.
    """
    n, p = X.shape
    _check_rows(n, p)
    beta = np.zeros(p) if start is None else np.array(start, dtype=float)
    eta = X @ beta
    ll = float(y @ eta + np.sum(log_expit(-eta)))
    flags: list[str] = []
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        mu = expit(eta)
        score = X.T @ (y - mu)
        if np.max(np.abs(score)) < tol:
            converged = True
            break
        w = mu * (1.0 - mu)
        H = (X.T * w) @ X
        try:
            step = np.linalg.solve(H, score)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, score, rcond=None)[0]
        t = 1.0
        for _ in range(MAX_HALVINGS + 1):
            cand = beta + t * step
            eta_c = X @ cand
            ll_c = float(y @ eta_c + np.sum(log_expit(-eta_c)))
            if ll_c >= ll - 1e-12 * abs(ll):
                break
            t *= 0.5
        else:
            flags.append("stalled")
            break
        if np.max(np.abs(t * step)) < 1e-14 * (1 + np.max(np.abs(beta))):
            beta, eta, ll = cand, eta_c, ll_c
            converged = bool(np.max(np.abs(X.T @ (y - expit(eta)))) < max(tol, 1e-6))
            break
        beta, eta, ll = cand, eta_c, ll_c
        if np.max(np.abs(beta)) > COEF_BOUND:
            flags.append("separation")
            beta = np.clip(beta, -COEF_BOUND, COEF_BOUND)
            eta = X @ beta
            ll = float(y @ eta + np.sum(log_expit(-eta)))
            break
    if not converged and "separation" not in flags and "stalled" not in flags:
        flags.append("nonconvergence")
    mu = expit(eta)
    H = (X.T * (mu * (1.0 - mu))) @ X
    cov = _safe_inverse(H)
    return FitResult("logistic", beta, cov, converged, it, ll, n, flags=tuple(flags))


def fit_logistic(data: Mapping[str, np.ndarray], spec: DesignSpec, max_iter: int = MAX_ITER,
                 tol: float = TOL) -> FitResult:
    rows = complete_rows(data, spec)
    X = design_matrix(data, spec, rows)
    y = np.asarray(data[spec.response], dtype=float)[rows]
    if not np.isin(y, (0.0, 1.0)).all():
        raise FitError(f"response {spec.response!r} is not binary")
    return fit_logistic_xy(X, y, max_iter, tol)


# multinomial ------------------------------------------------------------

def _multinomial_probs(X: np.ndarray, B: np.ndarray) -> np.ndarray:
    """n x K probabilities; ``B`` is (K-1) x p with the reference level implicit."""
    eta = X @ B.T
    m = np.maximum(eta.max(axis=1, initial=0.0), 0.0)
    e = np.exp(eta - m[:, None])
    e0 = np.exp(-m)
    denom = e0 + e.sum(axis=1)
    return np.column_stack([e0 / denom, e / denom[:, None]])


def multinomial_loglik(B: np.ndarray, X: np.ndarray, Y: np.ndarray) -> float:
    """``Y`` is the n x K one-hot response."""
    eta = np.column_stack([np.zeros(len(X)), X @ B.T])
    m = eta.max(axis=1)
    lse = m + np.log(np.exp(eta - m[:, None]).sum(axis=1))
    return float(np.sum(Y * eta) - lse.sum())


def multinomial_score(B: np.ndarray, X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    P = _multinomial_probs(X, B)
    return ((Y[:, 1:] - P[:, 1:]).T @ X).ravel()


def _multinomial_info(X: np.ndarray, P: np.ndarray) -> np.ndarray:
    K1 = P.shape[1] - 1
    p = X.shape[1]
    H = np.empty((K1 * p, K1 * p))
    for k in range(K1):
        pk = P[:, k + 1]
        for l in range(k, K1):
            w = pk * ((k == l) - P[:, l + 1])
            blk = (X.T * w) @ X
            H[k * p:(k + 1) * p, l * p:(l + 1) * p] = blk
            if l != k:
                H[l * p:(l + 1) * p, k * p:(k + 1) * p] = blk.T
    return H


def fit_multinomial_xy(X: np.ndarray, y: np.ndarray, levels: Sequence[float] | None = None,
                       max_iter: int = MAX_ITER, tol: float = TOL,
                       start: np.ndarray | None = None) -> FitResult:
    """Baseline-category logit by Newton-Raphson on the stacked score.

    ``coef`` has one row per non-reference level (reference = first of
    ``levels``); ``coef_cov`` is ordered level-major to match ``coef.ravel()``.
    """
    levels = tuple(sorted(np.unique(y))) if levels is None else tuple(levels)
    K = len(levels)
    if K < 2:
        raise FitError("multinomial response needs at least two levels")
    n, p = X.shape
    _check_rows(n, p)
    Y = (y[:, None] == np.asarray(levels)[None, :]).astype(float)
    if not np.all(Y.sum(axis=1) == 1):
        raise FitError("response has values outside the declared levels")
    B = np.zeros((K - 1, p)) if start is None else np.array(start, dtype=float).reshape(K - 1, p)
    ll = multinomial_loglik(B, X, Y)
    flags: list[str] = []
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        P = _multinomial_probs(X, B)
        score = ((Y[:, 1:] - P[:, 1:]).T @ X).ravel()
        if np.max(np.abs(score)) < tol:
            converged = True
            break
        H = _multinomial_info(X, P)
        try:
            step = np.linalg.solve(H, score)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, score, rcond=None)[0]
        step = step.reshape(K - 1, p)
        t = 1.0
        for _ in range(MAX_HALVINGS + 1):
            cand = B + t * step
            ll_c = multinomial_loglik(cand, X, Y)
            if ll_c >= ll - 1e-12 * abs(ll):
                break
            t *= 0.5
        else:
            flags.append("stalled")
            break
        if np.max(np.abs(t * step)) < 1e-14 * (1 + np.max(np.abs(B))):
            B, ll = cand, ll_c
            converged = bool(np.max(np.abs(multinomial_score(B, X, Y))) < max(tol, 1e-6))
            break
        B, ll = cand, ll_c
        if np.max(np.abs(B)) > COEF_BOUND:
            flags.append("separation")
            B = np.clip(B, -COEF_BOUND, COEF_BOUND)
            ll = multinomial_loglik(B, X, Y)
            break
    if not converged and "separation" not in flags and "stalled" not in flags:
        flags.append("nonconvergence")
    cov = _safe_inverse(_multinomial_info(X, _multinomial_probs(X, B)))
    return FitResult("multinomial", B, cov, converged, it, ll, n, levels=levels, flags=tuple(flags))


def fit_multinomial(data: Mapping[str, np.ndarray], spec: DesignSpec, max_iter: int = MAX_ITER,
                    tol: float = TOL, levels: Sequence[float] | None = None) -> FitResult:
    rows = complete_rows(data, spec)
    X = design_matrix(data, spec, rows)
    y = np.asarray(data[spec.response], dtype=float)[rows]
    return fit_multinomial_xy(X, y, levels, max_iter, tol)


# draws and imputation ---------------------------------------------------

def _safe_inverse(H: np.ndarray) -> np.ndarray:
    try:
        cov = np.linalg.inv(H)
    except np.linalg.LinAlgError:
        cov = np.linalg.pinv(H)
    return 0.5 * (cov + cov.T)


def _sqrt_cov(cov: np.ndarray) -> tuple[np.ndarray, bool]:
    """Lower factor ``A`` with ``A A^T = cov``; eigenvalues floored if needed."""
    if not np.any(cov):
        return np.zeros_like(cov), False
    try:
        return np.linalg.cholesky(cov), False
    except np.linalg.LinAlgError:
        vals, vecs = np.linalg.eigh(0.5 * (cov + cov.T))
        return vecs * np.sqrt(np.maximum(vals, EIG_FLOOR)), True


def draw_params(fit: FitResult, rng: np.random.Generator, warn: bool = True) -> ParamDraw:
    """One draw from the asymptotic-normal posterior around the MLE.

    Linear fits draw ``sigma2 = RSS / chi2(n - p)`` first and then
    ``coef ~ N(coef_hat, sigma2 * (X'X)^-1)``. A covariance that is not
    positive definite is repaired by flooring its eigenvalues; the draw is
    then flagged ``"eigen-floor"`` and, if ``warn``, a FitWarning is issued.
    """
    flags: list[str] = []
    if fit.family == "linear":
        df = fit.n - fit.n_params
        sigma2 = fit.rss / rng.chisquare(df) if fit.rss > 0 else 0.0
        A, floored = _sqrt_cov(fit.xtx_inv)
        coef = fit.coef + np.sqrt(sigma2) * (A @ rng.standard_normal(fit.n_params))
    else:
        sigma2 = None
        A, floored = _sqrt_cov(fit.coef_cov)
        coef = fit.coef + (A @ rng.standard_normal(fit.n_params)).reshape(fit.coef.shape)
    if floored:
        flags.append("eigen-floor")
        if warn:
            warnings.warn("coefficient covariance not positive definite; eigenvalues floored",
                          FitWarning)
    return ParamDraw(fit.family, coef, sigma2, fit.levels, tuple(flags))


def impute_cells(draw: ParamDraw, X: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Draw values for the rows of design matrix ``X`` from the drawn model."""
    m = X.shape[0]
    if draw.family == "linear":
        mu = X @ draw.coef
        if not draw.sigma2:
            return mu
        return mu + np.sqrt(draw.sigma2) * rng.standard_normal(m)
    if draw.family == "logistic":
        return (rng.random(m) < expit(X @ draw.coef)).astype(float)
    P = _multinomial_probs(X, draw.coef)
    u = rng.random(m)
    idx = (u[:, None] > np.cumsum(P, axis=1)[:, :-1]).sum(axis=1)
    return np.asarray(draw.levels, dtype=float)[idx]
