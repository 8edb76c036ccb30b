"""Chained-equations (sequential regression) multiple imputation.

Potential outcomes ``y0``/``y1`` are ordinary missing cells here: each row
carries exactly one of them (the arm it was actually in) unless its outcome
is missing too. A :class:`VariantSpec` fixes which conditional models run
and which columns each one may read.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import glm
from .data import (R_LEVELS, Y0, Y1, ColumnRole, CompletedDataset, ObservedDataset, Provenance,
                   merge_outcome, split_potential_outcomes)
from .samplers import make_rng

INITIAL_FILLS = ("hot-deck", "sequential")
VARIANTS = ("pomi-z", "pomi", "pomi-ind", "pomi-ind-r", "observed-only")
VARIANT_LABELS = {
    "pomi-z": "POMI-Z",
    "pomi": "POMI",
    "pomi-ind": "POMI+IND",
    "pomi-ind-r": "POMI+IND-R",
    "observed-only": "OBSERVED-ONLY",
}


class EngineFault(RuntimeError):
    """An observed cell was modified; always a bug."""


@dataclass(frozen=True)
class ConditionalModel:
    target: str
    predictors: tuple[str, ...]
    family: str

    def __str__(self):
        return f"f({self.target} | {', '.join(self.predictors)}) [{self.family}]"


@dataclass(frozen=True)
class VariantSpec:
    name: str
    models: tuple[ConditionalModel, ...]
    columns: tuple[str, ...]

    @property
    def label(self) -> str:
        return VARIANT_LABELS.get(self.name, self.name)

    @property
    def potential_outcomes(self) -> bool:
        return self.name != "observed-only"


@dataclass
class FcsSettings:
    D: int = 5
    cycles: int = 10
    seed: int = 0
    stream: tuple[int, ...] = ()
    initial_fill: str = "hot-deck"
    max_iter: int = glm.MAX_ITER
    tol: float = glm.TOL

    def __post_init__(self):
        if self.D < 2:
            raise ValueError("D must be at least 2")
        if self.cycles < 1:
            raise ValueError("cycles must be at least 1")
        if self.initial_fill not in INITIAL_FILLS:
            raise ValueError(f"unknown initial-fill strategy {self.initial_fill!r}")


def _family(d: ObservedDataset, name: str, levels: Sequence[float]) -> str:
    role = d.roles[name]
    if role in (ColumnRole.COVARIATE_CONT, ColumnRole.AUXILIARY):
        return "linear"
    return "logistic" if len(levels) == 2 else "multinomial"


def build_variant(name: str, d: ObservedDataset) -> VariantSpec:
    """Model set of ``name`` for the columns of ``d``.

    ``X`` is every covariate (auxiliary included). Only incomplete
    covariates get a model; the post-exposure column ``R`` is left out of
    every model and of the working set when ``d`` has none or the variant
    is ``pomi-ind-r``.
    """
    if name not in VARIANTS:
        raise ValueError(f"unknown variant {name!r}; expected one of {VARIANTS}")
    xs = d.covariates
    z = d.exposure
    r = d.post_exposure if name not in ("pomi-ind-r", "observed-only") else None
    rr = (r,) if r else ()
    incomplete = [x for x in xs if d.missing[x].any()]
    models: list[ConditionalModel] = []

    def fam(col):
        if col == r:
            return "multinomial"
        if col in (Y0, Y1, d.outcome):
            return "logistic"
        levels = np.unique(d.values[col][~d.missing[col]])
        return _family(d, col, levels)

    for x in incomplete:
        others = tuple(o for o in xs if o != x)
        if name == "observed-only":
            preds = others + (d.outcome, z)
        elif name == "pomi-z":
            preds = others + (Y0, Y1) + rr
        else:
            preds = others + (Y0, Y1) + rr + (z,)
        models.append(ConditionalModel(x, preds, fam(x)))
    X = tuple(xs)
    if name == "observed-only":
        models.append(ConditionalModel(d.outcome, X + (z,), "logistic"))
        cols = X + (d.outcome, z)
        return VariantSpec(name, tuple(models), cols)
    if name in ("pomi-z", "pomi"):
        if r:
            models.append(ConditionalModel(r, X + (Y0, Y1), "multinomial"))
        models.append(ConditionalModel(Y0, X + (Y1,) + rr, "logistic"))
        models.append(ConditionalModel(Y1, X + (Y0,) + rr, "logistic"))
    else:
        if r:
            models.append(ConditionalModel(r, X + (Y1,), "multinomial"))
        models.append(ConditionalModel(Y0, X, "logistic"))
        models.append(ConditionalModel(Y1, X + rr, "logistic"))
    cols = X + (Y0, Y1) + rr + ((z,) if name != "pomi-z" else ())
    return VariantSpec(name, tuple(models), cols)


class TracedColumns(dict):
    """Working columns that remember every name read from them."""

    def __init__(self, *args, **kw):
        super().__init__(*args, **kw)
        self.reads: set[str] = set()

    def __getitem__(self, key):
        self.reads.add(key)
        return super().__getitem__(key)


@dataclass
class _Step:
    model: ConditionalModel
    fit_rows: np.ndarray
    miss_rows: np.ndarray
    categorical: dict
    levels: tuple[float, ...] | None
    start: np.ndarray | None = None


def _levels_of(d: ObservedDataset, col: str) -> tuple[float, ...]:
    if col == d.post_exposure:
        return tuple(float(v) for v in R_LEVELS)
    if col in (Y0, Y1) or d.roles[col] in (ColumnRole.EXPOSURE, ColumnRole.OUTCOME):
        return (0.0, 1.0)
    return tuple(np.unique(d.values[col][~d.missing[col]]).tolist())


def _compile(d: ObservedDataset, variant: VariantSpec) -> list[_Step]:
    steps = []
    for m in variant.models:
        miss = d.missing[m.target].copy()
        if not miss.any():
            continue
        fit_rows = ~miss
        if not fit_rows.any():
            raise glm.FitError(f"no observed values of {m.target!r} to fit {m}")
        cats = {p: _levels_of(d, p) for p in m.predictors
                if d.roles[p] in (ColumnRole.POST_EXPOSURE, ColumnRole.COVARIATE_CAT)}
        levels = _levels_of(d, m.target) if m.family == "multinomial" else None
        steps.append(_Step(m, fit_rows, miss, cats, levels))
    return steps


def _design(work: Mapping[str, np.ndarray], step: _Step) -> np.ndarray:
    cols = [np.ones(len(work[step.model.target]))]
    for p in step.model.predictors:
        v = work[p]
        if p in step.categorical:
            for lvl in step.categorical[p][1:]:
                cols.append((v == lvl).astype(float))
        else:
            cols.append(v)
    return np.column_stack(cols)


def initial_fill(d: ObservedDataset, rng: np.random.Generator, columns: Sequence[str] | None = None) -> dict:
    """Fill every missing cell with a draw from its column's observed values."""
    columns = d.names if columns is None else columns
    out = {}
    for k in columns:
        v = np.array(d.values[k], dtype=float)
        miss = d.missing[k]
        if miss.any():
            pool = v[~miss]
            if pool.size == 0:
                raise ValueError(f"column {k!r} has no observed values to start from")
            v[miss] = pool[rng.integers(0, pool.size, int(miss.sum()))]
        out[k] = v
    return out


def sequential_fill(d: ObservedDataset, work: dict, steps: list[_Step], rng: np.random.Generator,
                    settings: FcsSettings | None = None) -> dict:
    """Regression-based first round.

    Targets are visited from least to most missing. Each is regressed on
    the predictors of its model that are already complete (fully observed
    columns and targets filled earlier in the round), and its missing cells
    are drawn from that fit. ``work`` must hold a provisional fill; it is
    overwritten for every modeled target.
    """
    settings = settings or FcsSettings()
    done = {k for k in work if not d.missing[k].any()}
    for step in sorted(steps, key=lambda s: int(s.miss_rows.sum())):
        m = step.model
        preds = tuple(p for p in m.predictors if p in done)
        sub = _Step(ConditionalModel(m.target, preds, m.family), step.fit_rows, step.miss_rows,
                    {p: v for p, v in step.categorical.items() if p in preds}, step.levels)
        fcs_cycle(work, [sub], rng, settings)
        done.add(m.target)
    return work


def fcs_cycle(work: dict, steps: list[_Step], rng: np.random.Generator, settings: FcsSettings | None = None,
              trace: dict | None = None) -> dict:
    """One sweep over the model sequence; updates ``work`` in place and returns it.

    Each model is fit on the rows where its target was originally observed,
    using current fills for predictors; only originally-missing target cells
    are redrawn.
    """
    settings = settings or FcsSettings()
    for step in steps:
        m = step.model
        X = _design(work, step)
        Xf = X[step.fit_rows]
        y = work[m.target][step.fit_rows]
        if m.family == "linear":
            fit = glm.fit_linear_xy(Xf, y)
        elif m.family == "logistic":
            fit = glm.fit_logistic_xy(Xf, y, settings.max_iter, settings.tol, start=step.start)
        else:
            fit = glm.fit_multinomial_xy(Xf, y, step.levels, settings.max_iter, settings.tol, start=step.start)
        if m.family != "linear":
            step.start = None if "separation" in fit.flags else fit.coef
        # repaired covariances are frequent under separation; they are traced, not warned
        draw = glm.draw_params(fit, rng, warn=False)
        new = glm.impute_cells(draw, X[step.miss_rows], rng)
        col = np.array(work[m.target])
        col[step.miss_rows] = new
        work[m.target] = col
        if trace is not None:
            trace.setdefault(m.target, []).append(float(new.mean()))
            flags = fit.flags + draw.flags
            if flags:
                trace.setdefault("_flags", []).append((m.target, tuple(flags)))
    return work


@dataclass
class ImputationDiagnostics:
    bins: list[dict] = field(default_factory=list)
    traces: list[dict] = field(default_factory=list)
    threshold: float = 0.2

    def share_within_threshold(self) -> float:
        smd = [abs(b["smd"]) for b in self.bins if b["n_missing"] > 0 and np.isfinite(b["smd"])]
        return float(np.mean([s < self.threshold for s in smd])) if smd else 1.0

    def write(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        keys = ["variable", "bin", "n_observed", "n_missing", "observed_mean", "imputed_mean",
                "observed_var", "imputed_var", "smd", "flag"]
        with open(out / "diagnostics.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, keys, lineterminator="\n")
            w.writeheader()
            for b in self.bins:
                w.writerow({k: (f"{b[k]:.4f}" if isinstance(b[k], float) else b[k]) for k in keys})
        summary = {
            "threshold": self.threshold,
            "share_within_threshold": self.share_within_threshold(),
            "flagged": [f"{b['variable']}:{b['bin']}" for b in self.bins if b["flag"]],
            "traces": self.traces,
        }
        with open(out / "diagnostics.json", "w") as fh:
            json.dump(summary, fh, indent=2, default=float)


@dataclass
class Imputations:
    completed: list[CompletedDataset]
    variant: VariantSpec
    settings: FcsSettings
    traces: list[dict]
    diagnostics: ImputationDiagnostics | None = None

    def __len__(self):
        return len(self.completed)

    def __iter__(self):
        return iter(self.completed)

    def __getitem__(self, i):
        return self.completed[i]


def prepare(d: ObservedDataset, variant: str | VariantSpec) -> tuple[ObservedDataset, VariantSpec]:
    work_d = d if variant == "observed-only" or getattr(variant, "name", None) == "observed-only" \
        or d.has_potential_outcomes else split_potential_outcomes(d)
    spec = variant if isinstance(variant, VariantSpec) else build_variant(variant, work_d)
    return work_d, spec


def run_chain(d: ObservedDataset, spec: VariantSpec, settings: FcsSettings, index: int,
              steps: list[_Step] | None = None) -> tuple[dict, dict, set]:
    rng = make_rng(settings.seed, *settings.stream, index)
    steps = _compile(d, spec) if steps is None else steps
    for s in steps:
        s.start = None
    work = TracedColumns(initial_fill(d, rng, spec.columns))
    if settings.initial_fill == "sequential":
        sequential_fill(d, work, steps, rng, settings)
    trace: dict = {}
    for _ in range(settings.cycles):
        fcs_cycle(work, steps, rng, settings, trace)
    for k in spec.columns:
        obs = ~d.missing[k]
        if not np.array_equal(dict.__getitem__(work, k)[obs], d.values[k][obs]):
            raise EngineFault(f"observed cells of {k!r} were overwritten")
    return dict(work), trace, work.reads


def impute(d: ObservedDataset, variant: str | VariantSpec, settings: FcsSettings | None = None,
           diagnostics: bool = False) -> Imputations:
    """D independent chains, each an initial fill followed by ``cycles`` sweeps."""
    settings = settings or FcsSettings()
    work_d, spec = prepare(d, variant)
    steps = _compile(work_d, spec)
    completed, traces = [], []
    for i in range(settings.D):
        work, trace, _ = run_chain(work_d, spec, settings, i, steps)
        values = {k: work_d.values[k] for k in work_d.names}
        values.update(work)
        if spec.potential_outcomes:
            values[work_d.outcome] = merge_outcome(values[work_d.exposure], values[Y0], values[Y1])
        completed.append(CompletedDataset(values, work_d, Provenance(i, settings.cycles, settings.seed, spec.name)))
        traces.append(trace)
    out = Imputations(completed, spec, settings, traces)
    if diagnostics:
        out.diagnostics = diagnose(work_d, completed)
        out.diagnostics.traces = [{k: v for k, v in t.items() if k != "_flags"} for t in traces]
    return out


def diagnose(d: ObservedDataset, completed: Sequence[CompletedDataset], n_bins: int = 5,
             threshold: float = 0.2) -> ImputationDiagnostics:
    """Observed vs imputed values within quintiles of the estimated
    propensity of being observed.

    For each completed dataset the response-propensity model regresses the
    observed indicator on the covariates as completed, plus the exposure for
    variables whose missingness the exposure does not determine. Rows of all
    imputations are then pooled and binned on their propensity quintiles.
    """
    z = d.exposure
    targets = [k for k in d.covariates if d.missing[k].any()]
    if d.missing[d.outcome].any():
        targets.append(d.outcome)
    targets += [k for k in (Y0, Y1) if k in d.values]
    bins: list[dict] = []
    for t in targets:
        miss = d.missing[t]
        preds = [k for k in d.covariates if k != t] + ([z] if t not in (Y0, Y1) else [])
        scores, values = [], []
        for c in completed:
            X = np.column_stack([np.ones(d.n_rows)] + [c[p] for p in preds])
            fit = glm.fit_logistic_xy(X, (~miss).astype(float))
            scores.append(X @ fit.coef)
            values.append(np.asarray(c[t], dtype=float))
        score = np.concatenate(scores)
        vals = np.concatenate(values)
        is_miss = np.tile(miss, len(completed))
        edges = np.quantile(score, np.linspace(0, 1, n_bins + 1)[1:-1])
        b = np.searchsorted(edges, score, side="right")
        for k in range(n_bins):
            in_bin = b == k
            o = vals[in_bin & ~is_miss]
            im = vals[in_bin & is_miss]
            row = {"variable": t, "bin": k + 1, "n_observed": int(o.size // len(completed)),
                   "n_missing": int(im.size // len(completed)),
                   "observed_mean": float(o.mean()) if o.size else float("nan"),
                   "imputed_mean": float(im.mean()) if im.size else float("nan"),
                   "observed_var": float(o.var()) if o.size else float("nan"),
                   "imputed_var": float(im.var()) if im.size else float("nan")}
            if o.size and im.size:
                pooled = np.sqrt((row["observed_var"] + row["imputed_var"]) / 2)
                diff = row["imputed_mean"] - row["observed_mean"]
                row["smd"] = float(diff / pooled) if pooled > 0 else (0.0 if diff == 0 else float(np.sign(diff) * np.inf))
            else:
                row["smd"] = float("nan")
            row["flag"] = bool(np.isfinite(row["smd"]) and abs(row["smd"]) >= threshold) or row["smd"] in (np.inf, -np.inf)
            bins.append(row)
    return ImputationDiagnostics(bins, [], threshold)
