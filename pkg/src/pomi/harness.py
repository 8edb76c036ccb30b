"""Replicated simulation studies: truth oracle, per-replicate method runs,
bias/ESD/SE/CR/MSE aggregation and table output."""
from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import glm
from .data import ObservedDataset
from .estimands import CELLS, EmptyCellError, EstimandSet, estimate, fit_membership, mor as mor_of
from .estimands import within_var_ate, within_var_log_mor, within_var_props, var_mor_from_log
from .fcs import FcsSettings, impute
from .pooling import PooledEstimate, fit_propensity, ipw_estimate, pool, pool_mor
from .samplers import (SimConfig, attach_sensitivity_u, make_rng, simulate_observed,
                       variance_explained_by_u, world_chunks)

log = logging.getLogger(__name__)

METHODS = ("POMI-Z", "POMI", "POMI+IND", "POMI+IND-R", "IPW")
METHOD_VARIANT = {"POMI-Z": "pomi-z", "POMI": "pomi", "POMI+IND": "pomi-ind",
                  "POMI+IND-R": "pomi-ind-r", "IPW": "observed-only"}
BASE_ESTIMANDS = ("ate", "mor") + CELLS
MEMBERSHIP_PREDICTORS = ("x2", "x1")
MEMBERSHIP_CONTRASTS = ("01", "10", "11")
BETA_GRID = (0.0, 0.9, 1.06, 1.2, 1.38, 1.49)


def membership_names(predictors: Sequence[str] = MEMBERSHIP_PREDICTORS) -> list[str]:
    labels = ["const"] + list(predictors)
    return [f"g{cell}:{lab}" for cell in MEMBERSHIP_CONTRASTS for lab in labels]


class StudyError(RuntimeError):
    pass


@dataclass
class StudySpec:
    config: SimConfig = field(default_factory=SimConfig)
    methods: tuple[str, ...] = METHODS
    replicates: int = 500
    D: int = 5
    cycles: int = 10
    estimands: tuple[str, ...] = BASE_ESTIMANDS
    membership_methods: tuple[str, ...] = ()
    seed: int = 20240101
    n_truth: int = 10_000_000
    truth_seed: int = 7
    workers: int = 1
    name: str = "study"
    initial_fill: str = "hot-deck"

    def __post_init__(self):
        if self.replicates < 2:
            raise ValueError("replicates must be at least 2")
        if not self.methods:
            raise ValueError("at least one method is required")
        bad = set(self.methods) - set(METHODS)
        if bad:
            raise ValueError(f"unknown method(s) {sorted(bad)}")
        self.methods = tuple(self.methods)
        self.estimands = tuple(self.estimands)
        self.membership_methods = tuple(self.membership_methods)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["config"] = self.config.to_dict()
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "StudySpec":
        raw = dict(raw)
        cfg = SimConfig.from_dict(raw.pop("config", {}))
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown StudySpec field(s): {sorted(unknown)}")
        return cls(config=cfg, **{k: tuple(v) if isinstance(v, list) else v for k, v in raw.items()})


@dataclass
class MetricRow:
    estimand: str
    method: str
    true: float
    bias: float
    esd: float
    se: float
    cr: float
    mse: float
    mean: float
    n_reps: int
    n_failed: int = 0


# truth -----------------------------------------------------------------

def _membership_design(w) -> tuple[np.ndarray, np.ndarray]:
    X = np.column_stack([np.ones(len(w)), w.x2, w.x1])
    code = 2 * w.y0.astype(np.int64) + w.y1.astype(np.int64)
    Y = np.zeros((len(w), 4))
    Y[np.arange(len(w)), code] = 1.0
    return X, Y


def _streamed_membership(cfg: SimConfig, n_truth: int, chunk: int, seed: int,
                         max_iter: int = 25, tol: float = 1e-9) -> glm.FitResult:
    """Newton iterations for the membership logit, one streamed pass per step."""
    p = 3
    B = np.zeros((3, p))
    converged = False
    it = 0
    H = None
    for it in range(1, max_iter + 1):
        score = np.zeros(3 * p)
        H = np.zeros((3 * p, 3 * p))
        for w in world_chunks(cfg, n_truth, chunk, seed):
            X, Y = _membership_design(w)
            P = glm._multinomial_probs(X, B)
            score += ((Y[:, 1:] - P[:, 1:]).T @ X).ravel()
            H += glm._multinomial_info(X, P)
        step = np.linalg.solve(H, score).reshape(3, p)
        B = B + step
        if np.max(np.abs(step)) < tol:
            converged = True
            break
    return glm.FitResult("multinomial", B, np.linalg.inv(H), converged, it, float("nan"), n_truth,
                         levels=(0.0, 1.0, 2.0, 3.0), predictors=MEMBERSHIP_PREDICTORS)


_TRUTH_CACHE: dict = {}


def truth_oracle(cfg: SimConfig, n_truth: int = 10_000_000, seed: int = 7, chunk: int = 1_000_000,
                 membership: bool = False) -> EstimandSet:
    """True estimands from a large complete (Y0, Y1) world, accumulated chunk by chunk."""
    key = (json.dumps({**cfg.to_dict(), "n": 0, "seed": 0}, sort_keys=True), n_truth, seed, chunk, membership)
    if key in _TRUTH_CACHE:
        return _TRUTH_CACHE[key]
    counts = np.zeros(4, dtype=np.int64)
    for w in world_chunks(cfg, n_truth, chunk, seed):
        counts += np.bincount(2 * w.y0.astype(np.int64) + w.y1, minlength=4)[:4]
    n = int(counts.sum())
    props = tuple((counts / n).tolist())
    p0, p1 = props[2] + props[3], props[1] + props[3]
    m = mor_of(p0, p1, n)
    v_log = within_var_log_mor(p0, p1, props[3], n)
    wv = {"ate": within_var_ate(p0, p1, props[3], n), "log_mor": v_log, "mor": var_mor_from_log(m, v_log)}
    wv.update(zip(CELLS, within_var_props(props, n)))
    fit = _streamed_membership(cfg, n_truth, chunk, seed) if membership else None
    out = EstimandSet(n, props, p0, p1, props[1] - props[2], m, math.log(m), wv, False, fit)
    _TRUTH_CACHE[key] = out
    return out


def truth_values(t: EstimandSet) -> dict[str, float]:
    vals = {"ate": t.ate, "mor": t.mor, **dict(zip(CELLS, t.props))}
    if t.membership is not None:
        vals.update(zip(membership_names(), t.membership.coef.ravel().tolist()))
    return vals


# one replicate ---------------------------------------------------------

def pooled_estimates(d: ObservedDataset, method: str, settings: FcsSettings,
                     estimands: Sequence[str] = BASE_ESTIMANDS,
                     membership: Sequence[str] | None = None,
                     propensity_covariates: Sequence[str] | None = None) -> dict[str, PooledEstimate]:
    """Impute with ``method`` and pool every requested estimand."""
    imps = impute(d, METHOD_VARIANT[method], settings)
    return pool_imputations(imps, method, estimands, membership, propensity_covariates)


def pool_imputations(imps: Sequence, method: str, estimands: Sequence[str] = BASE_ESTIMANDS,
                     membership: Sequence[str] | None = None,
                     propensity_covariates: Sequence[str] | None = None) -> dict[str, PooledEstimate]:
    """Per-imputation estimands combined by Rubin's rules.

    IPW yields only ``ate`` and ``mor``: the joint cells are not identified
    from reweighted marginals.
    """
    out: dict[str, PooledEstimate] = {}
    if method == "IPW":
        res = [ipw_estimate(c, fit_propensity(c, propensity_covariates)) for c in imps]
        if "ate" in estimands:
            out["ate"] = pool([r.ate for r in res], [r.var_ate for r in res])
        if "mor" in estimands:
            out["mor"] = pool_mor([r.log_mor for r in res], [r.var_log_mor for r in res])
        return out
    ests = [estimate(c) for c in imps]
    if "ate" in estimands:
        out["ate"] = pool([e.ate for e in ests], [e.within_var["ate"] for e in ests])
    if "mor" in estimands:
        out["mor"] = pool_mor([e.log_mor for e in ests], [e.within_var["log_mor"] for e in ests])
    for k, cell in enumerate(CELLS):
        if cell in estimands:
            out[cell] = pool([e.props[k] for e in ests], [e.within_var[cell] for e in ests])
    if membership:
        fits = [fit_membership(c, membership) for c in imps]
        names = membership_names(membership)
        coefs = np.array([f.coef.ravel() for f in fits])
        variances = np.array([np.diag(f.coef_cov) for f in fits])
        for j, name in enumerate(names):
            out[name] = pool(coefs[:, j], variances[:, j])
    return out


def run_replicate(spec: StudySpec, rep: int) -> dict:
    """All methods on one simulated dataset; retries with a fresh sub-seed on failure."""
    last_err = None
    for attempt in range(4):
        try:
            rng = make_rng(spec.seed, rep, attempt)
            d = simulate_observed(spec.config, rng)
            out = {}
            for mi, method in enumerate(spec.methods):
                settings = FcsSettings(spec.D, spec.cycles, spec.seed, (rep, attempt, mi), spec.initial_fill)
                memb = MEMBERSHIP_PREDICTORS if method in spec.membership_methods else None
                pooled = pooled_estimates(d, method, settings, spec.estimands, memb, ("x1", "x2"))
                for name, p in pooled.items():
                    out[(method, name)] = (p.point, p.se, p.ci_low, p.ci_high)
            return {"rep": rep, "attempts": attempt + 1, "results": out, "failed": False}
        except (glm.FitError, EmptyCellError, np.linalg.LinAlgError, ValueError) as exc:
            last_err = exc
            log.warning("replicate %d attempt %d failed: %s", rep, attempt, exc)
    return {"rep": rep, "attempts": 4, "results": {}, "failed": True, "error": str(last_err)}


def _run_replicate_star(args):
    return run_replicate(*args)


def default_workers() -> int:
    return int(os.environ.get("POMI_WORKERS", "1"))


def run_replicates(spec: StudySpec, reps: Iterable[int] | None = None) -> list[dict]:
    reps = list(range(spec.replicates)) if reps is None else list(reps)
    workers = spec.workers or default_workers()
    if workers <= 1:
        results = [run_replicate(spec, r) for r in reps]
    else:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_run_replicate_star, [(spec, r) for r in reps], chunksize=4))
    return sorted(results, key=lambda r: r["rep"])


def aggregate(replicates: Sequence[dict], truth: dict[str, float], methods: Sequence[str],
              estimands: Sequence[str]) -> list[MetricRow]:
    rows = []
    n_failed = sum(r["failed"] for r in replicates)
    for name in estimands:
        if name not in truth:
            continue
        for method in methods:
            vals = [r["results"][(method, name)] for r in replicates
                    if not r["failed"] and (method, name) in r["results"]]
            if len(vals) < 2:
                continue
            a = np.array(vals, dtype=float)
            t = truth[name]
            pts, ses = a[:, 0], a[:, 1]
            covered = (a[:, 2] <= t) & (t <= a[:, 3])
            rows.append(MetricRow(name, method, t, float(pts.mean() - t), float(pts.std(ddof=1)),
                                  float(ses.mean()), float(covered.mean()), float(np.mean((pts - t) ** 2)),
                                  float(pts.mean()), len(vals), n_failed))
    return rows


@dataclass
class StudyResult:
    spec: StudySpec
    truth: dict[str, float]
    rows: list[MetricRow]
    replicates: list[dict]
    elapsed: float

    def row(self, estimand: str, method: str) -> MetricRow:
        for r in self.rows:
            if r.estimand == estimand and r.method == method:
                return r
        raise KeyError((estimand, method))

    @property
    def n_failed(self) -> int:
        return sum(r["failed"] for r in self.replicates)


def run_study(spec: StudySpec, truth: dict[str, float] | None = None) -> StudyResult:
    t0 = time.time()
    if truth is None:
        truth = truth_values(truth_oracle(spec.config, spec.n_truth, spec.truth_seed,
                                          membership=bool(spec.membership_methods)))
    reps = run_replicates(spec)
    failed = sum(r["failed"] for r in reps)
    if failed > 0.01 * spec.replicates:
        raise StudyError(f"{failed} of {spec.replicates} replicates failed")
    names = list(spec.estimands)
    if spec.membership_methods:
        names += membership_names()
    rows = aggregate(reps, truth, spec.methods, names)
    return StudyResult(spec, truth, rows, reps, time.time() - t0)


def run_misspecification(spec: StudySpec, alpha: float = 2.0) -> StudyResult:
    """Exposure model with an X1*X2 interaction that no analysis model includes."""
    s = StudySpec(**{**{f.name: getattr(spec, f.name) for f in fields(spec)},
                     "config": spec.config.replace(alpha=alpha)})
    return run_study(s)


# sensitivity -----------------------------------------------------------

@dataclass
class SensitivityPoint:
    beta: float
    variance_explained: float
    estimand: str
    method: str
    true: float
    mean: float
    relative_bias: float
    cr: float


def run_sensitivity_beta(spec: StudySpec, grid: Sequence[float] = BETA_GRID) -> tuple[list[SensitivityPoint], dict]:
    """Rerun ``spec`` with beta1 = beta2 = b for every grid value, truth recomputed per b.

    Relative bias is ``(mean estimate - truth) / |truth|``.
    """
    points, studies = [], {}
    for b in grid:
        cfg = spec.config.replace(beta1=b, beta2=b)
        s = StudySpec(**{**{f.name: getattr(spec, f.name) for f in fields(spec)}, "config": cfg,
                         "name": f"{spec.name}-beta{b:g}"})
        res = run_study(s)
        studies[b] = res
        ve = variance_explained_by_u(cfg)
        for r in res.rows:
            points.append(SensitivityPoint(b, ve, r.estimand, r.method, r.true, r.mean,
                                           (r.mean - r.true) / abs(r.true), r.cr))
    return points, studies


def run_sensitivity_u(d: ObservedDataset, b1_grid: Sequence[float], sigma: float = 1.0,
                      settings: FcsSettings | None = None, seed: int = 0,
                      method: str = "POMI+IND") -> list[dict]:
    """Add a synthetic predictor ``U`` built from the observed outcome and
    re-impute for each ``b1``; the same noise draw is reused across the grid.

    ``variance_explained`` is the squared correlation of U and the observed
    outcome, a surrogate for the share of outcome variation U carries.
    """
    settings = settings or FcsSettings()
    out = []
    y = d.values[d.outcome]
    for i, b1 in enumerate(b1_grid):
        du = attach_sensitivity_u(d, b1, sigma, make_rng(seed, 0))
        u = du.values["u"]
        ok = ~np.isnan(y)
        r2 = float(np.corrcoef(u[ok], y[ok])[0, 1] ** 2) if b1 != 0 else 0.0
        pooled = pooled_estimates(du, method, settings)
        for name, p in pooled.items():
            out.append({"b1": b1, "variance_explained": r2, "estimand": name, "method": method,
                        "point": p.point, "se": p.se, "ci_low": p.ci_low, "ci_high": p.ci_high})
    return out


# output ----------------------------------------------------------------

TABLE_ORDER = ("ate", "mor") + CELLS


def _scaled(row: MetricRow) -> dict:
    """Table layout: 100 x bias and 100 x CR everywhere, ESD/SE x 100 for proportions."""
    k = 100.0 if row.estimand in CELLS else 1.0
    return {"estimand": row.estimand, "method": row.method, "true": round(row.true, 4),
            "bias_x100": round(100 * row.bias, 4), "esd": round(k * row.esd, 4), "se": round(k * row.se, 4),
            "cr_x100": round(100 * row.cr, 4), "mse": row.mse, "n_reps": row.n_reps}


def emit_tables(rows: Sequence[MetricRow], out_dir: str | Path, name: str, meta: dict | None = None) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = sorted(rows, key=lambda r: (TABLE_ORDER.index(r.estimand) if r.estimand in TABLE_ORDER else 99,
                                       r.estimand, METHODS.index(r.method)))
    raw = out / f"{name}_metrics.csv"
    keys = [f.name for f in fields(MetricRow)]
    with open(raw, "w", newline="") as fh:
        w = csv.DictWriter(fh, keys, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in asdict(r).items()})
    table = out / f"{name}_table.csv"
    with open(table, "w", newline="") as fh:
        w = csv.DictWriter(fh, list(_scaled(rows[0]).keys()) if rows else ["estimand"], lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow(_scaled(r))
    js = out / f"{name}.json"
    with open(js, "w") as fh:
        json.dump({"name": name, "meta": meta or {}, "rows": [asdict(r) for r in rows]}, fh, indent=2)
    return [raw, table, js]


def read_metric_rows(path: str | Path) -> list[MetricRow]:
    types = {f.name: f.type for f in fields(MetricRow)}
    out = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            kw = {}
            for k, v in rec.items():
                t = types[k]
                kw[k] = int(v) if t in (int, "int") else float(v) if t in (float, "float") else v
            out.append(MetricRow(**kw))
    return out


def emit_sensitivity(points: Sequence, out_dir: str | Path, name: str) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{name}_long.csv"
    recs = [asdict(p) if not isinstance(p, dict) else p for p in points]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, list(recs[0].keys()), lineterminator="\n")
        w.writeheader()
        w.writerows(recs)
    return path
