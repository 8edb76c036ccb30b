"""Causal estimands computed on one completed dataset.

Cell order everywhere is (00, 01, 10, 11) for (Y0, Y1): never treated,
treatment encouraged, treatment discouraged, always treated.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import glm
from .data import CompletedDataset

CELLS = ("p00", "p01", "p10", "p11")


class BoundaryWarning(UserWarning):
    """A probability hit 0 or 1 and was continuity-corrected."""


class EmptyCellError(ValueError):
    pass


@dataclass
class EstimandSet:
    n: int
    props: tuple[float, float, float, float]
    p0: float
    p1: float
    ate: float
    mor: float
    log_mor: float
    within_var: dict[str, float]
    corrected: bool = False
    membership: glm.FitResult | None = None
    extra: dict = field(default_factory=dict)

    @property
    def p11(self) -> float:
        return self.props[3]

    def point(self, name: str) -> float:
        if name in CELLS:
            return self.props[CELLS.index(name)]
        return getattr(self, name)


def cell_counts(y0: np.ndarray, y1: np.ndarray) -> np.ndarray:
    code = 2 * np.asarray(y0, dtype=np.int64) + np.asarray(y1, dtype=np.int64)
    return np.bincount(code, minlength=4)[:4]


def subgroup_proportions(c: CompletedDataset) -> tuple[float, float, float, float]:
    counts = cell_counts(c.y0, c.y1)
    return tuple((counts / counts.sum()).tolist())


def ate(props: Sequence[float]) -> float:
    return props[1] - props[2]


def _correct(p: float, n: int, mass: float) -> float:
    return (p + mass / n) / (1.0 + 2.0 / n)


def _boundary(*ps: float) -> bool:
    return any(p <= 0.0 or p >= 1.0 for p in ps)


def mor(p0: float, p1: float, n: int | None = None) -> float:
    """Odds of treatment if everyone were tested over the odds if no one were."""
    if _boundary(p0, p1):
        if n is None:
            raise ValueError("boundary probability needs n for the continuity correction")
        warnings.warn("marginal probability at 0 or 1; applying 0.5/n continuity correction", BoundaryWarning)
        # 0.5/n added to each of the four joint cells adds 1/n to each marginal
        p0, p1 = _correct(p0, n, 1.0), _correct(p1, n, 1.0)
    return (p1 * (1.0 - p0)) / (p0 * (1.0 - p1))


def within_var_ate(p0: float, p1: float, p11: float, n: int) -> float:
    if n < 2:
        raise ValueError("n must be at least 2")
    v = (p0 * (1 - p0) + p1 * (1 - p1) - 2 * (p11 - p0 * p1)) / (n - 1)
    return max(v, 0.0)


def within_var_log_mor(p0: float, p1: float, p11: float, n: int) -> float:
    """Delta-method variance of log(MOR) with the Y0/Y1 covariance ``p11 - p0 p1``."""
    if n < 2:
        raise ValueError("n must be at least 2")
    if _boundary(p0, p1):
        warnings.warn("marginal probability at 0 or 1; applying 0.5/n continuity correction", BoundaryWarning)
        p0, p1, p11 = _correct(p0, n, 1.0), _correct(p1, n, 1.0), _correct(p11, n, 0.5)
    num = p0 + p1 - (p0 - p1) ** 2 - 2 * p11
    den = n * p0 * p1 * (1 - p0) * (1 - p1)
    return max(num / den, 0.0)


def var_mor_from_log(mor_hat: float, var_log_mor: float) -> float:
    return mor_hat ** 2 * var_log_mor


def within_var_props(props: Sequence[float], n: int) -> tuple[float, ...]:
    if n < 2:
        raise ValueError("n must be at least 2")
    return tuple(p * (1 - p) / n for p in props)


def membership_codes(y0: np.ndarray, y1: np.ndarray) -> np.ndarray:
    """0, 1, 2, 3 for cells 00, 01, 10, 11."""
    return 2 * np.asarray(y0, dtype=float) + np.asarray(y1, dtype=float)


def fit_membership(c: CompletedDataset, predictors: Sequence[str], max_iter: int = glm.MAX_ITER,
                   tol: float = glm.TOL) -> glm.FitResult:
    """Generalized logit for subgroup membership with never-treated (00) as reference.

    ``coef`` rows are the 01, 10 and 11 contrasts; columns are the intercept
    followed by ``predictors`` in order.
    """
    code = membership_codes(c.y0, c.y1)
    counts = np.bincount(code.astype(int), minlength=4)
    if (counts == 0).any():
        raise EmptyCellError(f"empty potential-outcome subgroup; cell counts (00,01,10,11) = {counts.tolist()}")
    X = np.column_stack([np.ones(c.n_rows)] + [np.asarray(c[p], dtype=float) for p in predictors])
    return glm.fit_multinomial_xy(X, code, (0.0, 1.0, 2.0, 3.0), max_iter, tol)


def estimate(c: CompletedDataset, membership: Sequence[str] | None = None) -> EstimandSet:
    """All estimands and their within-imputation variances for one completed dataset."""
    counts = cell_counts(c.y0, c.y1)
    n = int(counts.sum())
    props = tuple((counts / n).tolist())
    p0 = props[2] + props[3]
    p1 = props[1] + props[3]
    corrected = _boundary(p0, p1)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", BoundaryWarning)
        m = mor(p0, p1, n)
        v_log = within_var_log_mor(p0, p1, props[3], n)
    wv = {"ate": within_var_ate(p0, p1, props[3], n), "log_mor": v_log, "mor": var_mor_from_log(m, v_log)}
    wv.update(zip(CELLS, within_var_props(props, n)))
    fit = fit_membership(c, membership) if membership else None
    return EstimandSet(n, props, p0, p1, ate(props), m, float(np.log(m)), wv, corrected, fit)
