"""Command-line front end: ``pomi {estimate,simulate,truth,sensitivity,diagnose}``."""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import platform
import sys
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy

from . import __version__
from .data import load_csv, load_schema
from .estimands import CELLS
from .fcs import FcsSettings, impute
from .harness import (BASE_ESTIMANDS, BETA_GRID, METHOD_VARIANT, StudySpec, default_workers, emit_sensitivity,
                      emit_tables, pool_imputations, run_sensitivity_beta, run_sensitivity_u, run_study,
                      truth_oracle, truth_values)

log = logging.getLogger("pomi")

CLI_METHODS = {"pomi-z": "POMI-Z", "pomi": "POMI", "pomi-ind": "POMI+IND", "pomi-ind-r": "POMI+IND-R",
               "ipw": "IPW"}


class UsageError(Exception):
    """Bad invocation; reported with exit code 2."""


# presets ---------------------------------------------------------------

def preset_names() -> list[str]:
    return sorted(p.name[:-5] for p in (resources.files("pomi") / "presets").iterdir() if p.name.endswith(".json"))


def load_preset(name: str) -> tuple[dict, str]:
    """Raw preset dict and the sha256 of its file contents."""
    path = resources.files("pomi") / "presets" / f"{name}.json"
    if not path.is_file():
        raise UsageError(f"unknown preset {name!r}; available: {', '.join(preset_names())}")
    text = path.read_text()
    return json.loads(text), hashlib.sha256(text.encode()).hexdigest()


def _study_from_args(args, raw: dict) -> StudySpec:
    raw = {k: v for k, v in raw.items() if k != "beta_grid"}
    cfg = dict(raw.get("config", {}))
    for flag, key in (("n", "n"), ("alpha", "alpha"), ("beta1", "beta1"), ("beta2", "beta2")):
        v = getattr(args, flag, None)
        if v is not None:
            cfg[key] = v
    raw["config"] = cfg
    overrides = {"replicates": args.reps, "seed": args.seed, "D": args.imputations, "cycles": args.cycles,
                 "n_truth": getattr(args, "truth_n", None)}
    raw.update({k: v for k, v in overrides.items() if v is not None})
    raw["workers"] = args.workers if args.workers is not None else default_workers()
    return StudySpec.from_dict(raw)


# output helpers ----------------------------------------------------------

def _fmt(x) -> str:
    if x is None:
        return "NA"
    if isinstance(x, float) and math.isinf(x):
        return "inf"
    return f"{x:.4f}"


def _num(x):
    """JSON-safe number rounded to 4 decimals."""
    if isinstance(x, float) and math.isinf(x):
        return "inf"
    return round(float(x), 4)


def _sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(out: Path, command: str, config: dict, seed: int, extra: dict | None = None) -> Path:
    manifest = {
        "command": command,
        "seed": seed,
        "config": config,
        "versions": {"pomi": __version__, "python": platform.python_version(), "numpy": np.__version__,
                     "scipy": scipy.__version__},
    }
    manifest.update(extra or {})
    path = out / "manifest.json"
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def write_estimates(out: Path, pooled: dict, method: str) -> None:
    keys = ["estimand", "method", "point", "se", "df", "ci_low", "ci_high", "D"]
    with open(out / "estimates.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(keys)
        for name, p in pooled.items():
            w.writerow([name, method, _fmt(p.point), _fmt(p.se), _fmt(p.df), _fmt(p.ci_low), _fmt(p.ci_high), p.D])
    report = {name: {"point": _num(p.point), "se": _num(p.se), "df": _num(p.df),
                     "ci": [_num(p.ci_low), _num(p.ci_high)], "D": p.D, "method": method}
              for name, p in pooled.items()}
    with open(out / "estimates.json", "w") as fh:
        json.dump(report, fh, indent=2)
        fh.write("\n")


def _load_input(args):
    if not args.input or not args.schema:
        raise UsageError("--input and --schema are required")
    roles, na = load_schema(args.schema)
    return load_csv(args.input, roles, na)


# subcommands -------------------------------------------------------------

def cmd_estimate(args) -> int:
    d = _load_input(args)
    method = CLI_METHODS[args.method]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = 0 if args.seed is None else args.seed
    settings = FcsSettings(D=args.imputations or 5, cycles=args.cycles or 10, seed=seed)
    imps = impute(d, METHOD_VARIANT[method], settings, diagnostics=True)
    membership = None
    if method != "IPW" and not args.no_membership:
        membership = args.membership.split(",") if args.membership else list(d.covariates)
    pooled = pool_imputations(imps, method, BASE_ESTIMANDS, membership)
    write_estimates(out, pooled, method)
    imps.diagnostics.write(out)
    config = {"method": args.method, "imputations": settings.D, "cycles": settings.cycles,
              "membership": membership, "schema": str(args.schema), "input": str(args.input)}
    write_manifest(out, "estimate", config, seed,
                   {"input_sha256": _sha256(args.input), "schema_sha256": _sha256(args.schema)})
    ate = pooled["ate"]
    print(f"ATE {ate.point:.4f} [{ate.ci_low:.4f}, {ate.ci_high:.4f}]  "
          f"MOR {pooled['mor'].point:.4f}  -> {out}")
    return 0


def cmd_diagnose(args) -> int:
    d = _load_input(args)
    out = Path(args.out)
    seed = 0 if args.seed is None else args.seed
    settings = FcsSettings(D=args.imputations or 5, cycles=args.cycles or 10, seed=seed)
    imps = impute(d, METHOD_VARIANT[CLI_METHODS[args.method]], settings, diagnostics=True)
    imps.diagnostics.write(out)
    write_manifest(out, "diagnose", {"method": args.method, "imputations": settings.D, "cycles": settings.cycles,
                                     "input": str(args.input)}, seed, {"input_sha256": _sha256(args.input)})
    diag = imps.diagnostics
    print(f"{len([b for b in diag.bins if b['flag']])} flagged bins; "
          f"{100 * diag.share_within_threshold():.1f}% within |SMD| < {diag.threshold}")
    return 0


def cmd_simulate(args) -> int:
    raw, digest = load_preset(args.preset)
    spec = _study_from_args(args, raw)
    out = Path(args.out)
    res = run_study(spec)
    emit_tables(res.rows, out, spec.name, {"failed": res.n_failed})
    write_manifest(out, "simulate", spec.to_dict(), spec.seed, {"preset": args.preset, "preset_sha256": digest})
    for r in res.rows:
        print(f"{r.estimand:>12} {r.method:<11} bias*100 {100 * r.bias:7.2f}  esd {r.esd:.4f}  "
              f"se {r.se:.4f}  cr*100 {100 * r.cr:5.1f}")
    return 0


def cmd_truth(args) -> int:
    raw, digest = load_preset(args.preset) if args.preset else ({}, None)
    spec = _study_from_args(args, raw)
    n_truth = args.truth_n or args.n or spec.n_truth
    seed = spec.truth_seed if args.seed is None else args.seed
    t = truth_oracle(spec.config, n_truth, seed, membership=args.membership)
    vals = {k: _num(v) for k, v in truth_values(t).items()}
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "truth.json", "w") as fh:
            json.dump(vals, fh, indent=2)
            fh.write("\n")
        write_manifest(out, "truth", {"sim": spec.config.to_dict(), "n_truth": n_truth}, seed,
                       {"preset": args.preset, "preset_sha256": digest})
    print(json.dumps(vals))
    return 0


def cmd_sensitivity(args) -> int:
    out = Path(args.out)
    if args.mode == "beta":
        raw, digest = load_preset(args.preset or "figure1")
        grid = tuple(float(b) for b in args.grid.split(",")) if args.grid else tuple(raw.get("beta_grid", BETA_GRID))
        spec = _study_from_args(args, raw)
        points, studies = run_sensitivity_beta(spec, grid)
        emit_sensitivity(points, out, f"{spec.name}_beta")
        for b, res in studies.items():
            emit_tables(res.rows, out, res.spec.name)
        write_manifest(out, "sensitivity", {**spec.to_dict(), "grid": list(grid)}, spec.seed,
                       {"mode": "beta", "preset": args.preset or "figure1", "preset_sha256": digest})
        for p in points:
            print(f"beta {p.beta:5.2f} {p.estimand:>5} rel.bias {p.relative_bias:+.4f}")
        return 0
    d = _load_input(args)
    grid = tuple(float(b) for b in (args.grid or "0,0.5,1,2,3").split(","))
    seed = 0 if args.seed is None else args.seed
    settings = FcsSettings(D=args.imputations or 5, cycles=args.cycles or 10, seed=seed)
    method = CLI_METHODS[args.method]
    recs = run_sensitivity_u(d, grid, args.sigma, settings, seed, method)
    emit_sensitivity(recs, out, "sensitivity_u")
    write_manifest(out, "sensitivity", {"mode": "u", "grid": list(grid), "sigma": args.sigma, "method": args.method,
                                        "imputations": settings.D, "cycles": settings.cycles}, seed,
                   {"input_sha256": _sha256(args.input)})
    for r in recs:
        if r["estimand"] in ("ate", "mor") + CELLS:
            print(f"b1 {r['b1']:5.2f} {r['estimand']:>5} {r['point']:.4f}")
    return 0


# parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pomi", description="Potential-outcomes multiple imputation.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, method_default="pomi-ind"):
        p.add_argument("--seed", type=int)
        p.add_argument("--imputations", type=int, help="number of imputations D (default 5)")
        p.add_argument("--cycles", type=int, help="sweeps per chain (default 10)")
        p.add_argument("--out", default="out")
        p.add_argument("--method", choices=sorted(CLI_METHODS), default=method_default)

    def data_args(p):
        p.add_argument("--input", help="CSV file")
        p.add_argument("--schema", help="JSON schema mapping columns to roles")

    def sim_args(p):
        p.add_argument("--preset")
        p.add_argument("--reps", type=int)
        p.add_argument("--n", type=int, help="rows per simulated dataset")
        p.add_argument("--alpha", type=float)
        p.add_argument("--beta1", type=float)
        p.add_argument("--beta2", type=float)
        p.add_argument("--workers", type=int, help="worker processes (default $POMI_WORKERS or 1)")
        p.add_argument("--truth-n", type=int, help="rows in the truth oracle")

    p = sub.add_parser("estimate", help="impute a CSV and report pooled estimands")
    data_args(p)
    common(p)
    p.add_argument("--membership", help="comma-separated membership-model predictors (default: all covariates)")
    p.add_argument("--no-membership", action="store_true")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("diagnose", help="observed-vs-imputed diagnostics for a CSV")
    data_args(p)
    common(p)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("simulate", help="run a preset simulation study")
    common(p)
    sim_args(p)
    p.set_defaults(func=cmd_simulate, preset="table2")

    p = sub.add_parser("truth", help="true estimands from a large simulated population")
    common(p)
    sim_args(p)
    p.add_argument("--membership", action="store_true", help="also fit the true membership model")
    # for truth, --n is the population size rather than the per-dataset size
    p.set_defaults(func=cmd_truth, out=None)

    p = sub.add_parser("sensitivity", help="conditional-independence sensitivity sweeps")
    data_args(p)
    common(p)
    sim_args(p)
    p.add_argument("--mode", choices=("beta", "u"), required=True)
    p.add_argument("--grid", help="comma-separated beta (mode beta) or b1 (mode u) values")
    p.add_argument("--sigma", type=float, default=1.0, help="noise SD of the synthetic U (mode u)")
    p.set_defaults(func=cmd_sensitivity)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        ap.print_usage(sys.stderr)
        print(json.dumps({"error": "usage", "message": str(exc)}), file=sys.stderr)
        return 2
    except Exception as exc:
        log.debug("failure", exc_info=True)
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
