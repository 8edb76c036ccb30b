"""Rubin's-rules pooling and the inverse-probability-weighting comparator."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from scipy import stats
from scipy.special import expit

from . import glm
from .data import CompletedDataset
from .estimands import mor as _mor
from .estimands import var_mor_from_log


@dataclass
class PooledEstimate:
    """Combined estimate across D imputations.

    For ``scale == "log-then-exp"`` the variance components are on the log
    scale and ``point``/``ci_*`` are exponentiated; ``natural_var`` is the
    delta-method variance on the natural scale.
    """

    point: float
    within_bar: float
    between: float
    total_var: float
    df: float
    ci_low: float
    ci_high: float
    D: int
    scale: str = "natural"

    @property
    def natural_var(self) -> float:
        if self.scale == "log-then-exp":
            return var_mor_from_log(self.point, self.total_var)
        return self.total_var

    @property
    def se(self) -> float:
        return math.sqrt(self.natural_var)

    def covers(self, truth: float) -> bool:
        return self.ci_low <= truth <= self.ci_high

    def to_dict(self) -> dict:
        out = asdict(self)
        out["se"] = self.se
        return out


def rubin_df(within_bar: float, between: float, D: int, method: str = "rubin") -> float:
    """Reference t degrees of freedom.

    ``"rubin"``: ``(D-1) * (1 + W / ((1 + 1/D) B))**2``.
    ``"printed"``: ``(D-1) * (1 + D/(D+1) * (W/B)**2)``, kept for comparison.
    """
    if between <= 0:
        return math.inf
    if method == "rubin":
        r = (1 + 1 / D) * between / within_bar if within_bar > 0 else math.inf
        try:
            return (D - 1) * (1 + 1 / r) ** 2
        except (OverflowError, ZeroDivisionError):
            # B negligible next to W: the t reference is effectively normal
            return math.inf
    if method == "printed":
        try:
            return (D - 1) * (1 + D / (D + 1) * (within_bar / between) ** 2)
        except OverflowError:
            return math.inf
    raise ValueError(f"unknown df method {method!r}")


def pool(estimates: Sequence[float], withins: Sequence[float], D: int | None = None, level: float = 0.95,
         df_method: str = "rubin") -> PooledEstimate:
    est = np.asarray(estimates, dtype=float)
    w = np.asarray(withins, dtype=float)
    D = len(est) if D is None else D
    if D < 2 or len(est) != D or len(w) != D:
        raise ValueError("pooling needs D >= 2 estimates and as many within-variances")
    point = float(est.mean())
    w_bar = float(w.mean())
    between = float(np.sum((est - point) ** 2) / (D - 1))
    total = w_bar + (1 + 1 / D) * between
    df = rubin_df(w_bar, between, D, df_method)
    q = stats.norm.ppf(0.5 + level / 2) if math.isinf(df) else stats.t.ppf(0.5 + level / 2, df)
    half = q * math.sqrt(total)
    return PooledEstimate(point, w_bar, between, total, df, point - half, point + half, D)


def pool_mor(log_mors: Sequence[float], var_log_mors: Sequence[float], D: int | None = None,
             level: float = 0.95, df_method: str = "rubin") -> PooledEstimate:
    """Pool on the log scale, then exponentiate the point and interval."""
    log_mors = np.asarray(log_mors, dtype=float)
    if not np.all(np.isfinite(log_mors)):
        raise ValueError("MOR inputs must be positive and finite")
    p = pool(log_mors, var_log_mors, D, level, df_method)
    return PooledEstimate(math.exp(p.point), p.within_bar, p.between, p.total_var, p.df,
                          math.exp(p.ci_low), math.exp(p.ci_high), p.D, "log-then-exp")


# IPW -------------------------------------------------------------------

@dataclass
class IpwResult:
    p0: float
    p1: float
    ate: float
    mor: float
    log_mor: float
    var_ate: float
    var_log_mor: float
    var_mor: float
    propensity_fit: glm.FitResult
    n: int


class PropensityError(ValueError):
    pass


def fit_propensity(c: CompletedDataset, covariates: Sequence[str] | None = None) -> glm.FitResult:
    """Main-effects logistic model of the exposure on ``covariates``."""
    src = c.source
    covariates = [k for k in src.covariates] if covariates is None else list(covariates)
    X = np.column_stack([np.ones(c.n_rows)] + [np.asarray(c[k], dtype=float) for k in covariates])
    z = np.asarray(c[src.exposure], dtype=float)
    fit = glm.fit_logistic_xy(X, z)
    fit.predictors = tuple(covariates)
    return fit


def propensity_scores(c: CompletedDataset, fit: glm.FitResult) -> np.ndarray:
    cov = fit.predictors if fit.predictors is not None else c.source.covariates
    X = np.column_stack([np.ones(c.n_rows)] + [np.asarray(c[k], dtype=float) for k in cov])
    return expit(X @ fit.coef)


def ipw_estimate(c: CompletedDataset, propensity: glm.FitResult | np.ndarray, clip: float | None = None) -> IpwResult:
    """Horvitz-Thompson means of the two arms with plug-in (fixed) propensities.

    Variances come from the delta method applied to the per-row
    contributions ``Z Y / pi`` and ``(1 - Z) Y / (1 - pi)``; log(MOR) first,
    then the MOR scale.
    """
    src = c.source
    z = np.asarray(c[src.exposure], dtype=float)
    y = np.asarray(c[src.outcome], dtype=float)
    if isinstance(propensity, glm.FitResult):
        pi = propensity_scores(c, propensity)
        fit = propensity
    else:
        pi = np.asarray(propensity, dtype=float)
        fit = None
    if clip is not None:
        pi = np.clip(pi, clip, 1 - clip)
    bad = (pi <= 0) | (pi >= 1)
    if bad.any():
        raise PropensityError(f"propensity outside (0, 1) in rows {np.flatnonzero(bad)[:10].tolist()}")
    n = len(z)
    a = z * y / pi
    b = (1 - z) * y / (1 - pi)
    p1 = float(a.mean())
    p0 = float(b.mean())
    cov = np.cov(np.vstack([a, b]), ddof=1) / n
    v1, v0, c10 = cov[0, 0], cov[1, 1], cov[0, 1]
    var_ate = float(v1 + v0 - 2 * c10)
    m = _mor(p0, p1, n)
    g1 = 1.0 / (p1 * (1 - p1))
    g0 = -1.0 / (p0 * (1 - p0))
    var_log = float(g1 * g1 * v1 + g0 * g0 * v0 + 2 * g1 * g0 * c10)
    return IpwResult(p0, p1, p1 - p0, m, math.log(m), var_ate, var_log, var_mor_from_log(m, var_log), fit, n)
