"""Random-number plumbing and the simulation data-generating process."""
from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from scipy.special import expit

from .data import ColumnRole, ObservedDataset

log = logging.getLogger(__name__)

DEFAULT_COV = ((1.0, 0.3, 0.3), (0.3, 1.0, 0.3), (0.3, 0.3, 1.0))


def make_rng(seed: int | None, *keys: int) -> np.random.Generator:
    """Independent stream for ``(seed, *keys)``; e.g. ``make_rng(seed, rep)``
    gives every replicate its own generator regardless of scheduling."""
    ss = np.random.SeedSequence(seed, spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.PCG64(ss))


@dataclass
class SimConfig:
    n: int = 1000
    alpha: float = 0.0
    beta1: float = 0.0
    beta2: float = 0.0
    mvn_mean: tuple[float, float, float] = (0.0, 1.0, -1.0)
    mvn_cov: tuple[tuple[float, ...], ...] = DEFAULT_COV
    r_cutpoints: tuple[float, float] = (-0.747, 0.282)
    # intercept, X1, X2 (the X1*X2 term is ``alpha``)
    z_coefs: tuple[float, float, float] = (-1.5, -1.0, 0.5)
    y0_coefs: tuple[float, float, float] = (0.0, 0.5, 1.0)
    y1_coefs: tuple[float, float, float] = (0.0, 0.5, 1.0)
    # additive effects of R = 1, 2, 3 on the Y1 logit
    r_effects: tuple[float, float, float] = (-1.5, -0.5, 1.0)
    mx_coefs: tuple[float, float] = (-1.0, 0.2)
    my_coefs: tuple[float, float] = (-2.5, 1.0)
    seed: int = 0

    def __post_init__(self):
        cov = np.asarray(self.mvn_cov, dtype=float)
        if cov.shape != (3, 3) or not np.allclose(cov, cov.T):
            raise ValueError("mvn_cov must be a symmetric 3x3 matrix")
        if np.linalg.eigvalsh(cov).min() <= 0:
            raise ValueError("mvn_cov must be positive definite")
        if not self.r_cutpoints[0] < self.r_cutpoints[1]:
            raise ValueError("r_cutpoints must be strictly increasing")

    def replace(self, **kw) -> "SimConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "SimConfig":
        fields = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - fields
        if unknown:
            raise ValueError(f"unknown SimConfig field(s): {sorted(unknown)}")
        kw = {k: (tuple(tuple(r) for r in v) if k == "mvn_cov" else tuple(v) if isinstance(v, list) else v)
              for k, v in raw.items()}
        return cls(**kw)

    @classmethod
    def from_json(cls, path: str | Path) -> "SimConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class TrueWorld:
    """Column-wise true-world draw: one entry per patient in every array."""

    x1: np.ndarray
    x2: np.ndarray
    r_star: np.ndarray
    r: np.ndarray
    u: np.ndarray
    z: np.ndarray
    y0: np.ndarray
    y1: np.ndarray
    y: np.ndarray
    mx: np.ndarray
    my: np.ndarray
    extra: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.x1)


def draw_mvn(mean, cov, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Multivariate normal draws via the lower Cholesky factor of ``cov``."""
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    L = np.linalg.cholesky(cov)  # raises LinAlgError when cov is not SPD
    if size is None:
        return mean + L @ rng.standard_normal(len(mean))
    return mean + rng.standard_normal((size, len(mean))) @ L.T


def categorize_r(r_star, cutpoints=(-0.747, 0.282)):
    """1 if ``r_star <= c1``, 2 if ``c1 < r_star <= c2``, else 3."""
    lo, hi = cutpoints
    r_star = np.asarray(r_star, dtype=float)
    out = np.where(r_star <= lo, 1, np.where(r_star <= hi, 2, 3))
    return int(out) if out.ndim == 0 else out


def generate_true_world(cfg: SimConfig, rng: np.random.Generator, n: int | None = None) -> TrueWorld:
    n = cfg.n if n is None else n
    xr = draw_mvn(cfg.mvn_mean, cfg.mvn_cov, rng, size=n)
    x1, x2, r_star = xr[:, 0], xr[:, 1], xr[:, 2]
    r = categorize_r(r_star, cfg.r_cutpoints)
    u = rng.standard_normal(n)
    a0, a1, a2 = cfg.z_coefs
    pz = expit(a0 + a1 * x1 + a2 * x2 + cfg.alpha * x1 * x2)
    b0, b1, b2 = cfg.y0_coefs
    p0 = expit(b0 + b1 * x1 + b2 * x2 + cfg.beta1 * u)
    c0, c1, c2 = cfg.y1_coefs
    p1 = expit(c0 + c1 * x1 + c2 * x2 + np.asarray(cfg.r_effects)[r - 1] + cfg.beta2 * u)
    pmx = expit(cfg.mx_coefs[0] + cfg.mx_coefs[1] * x1)
    pmy = expit(cfg.my_coefs[0] + cfg.my_coefs[1] * x1)
    uz, u0, u1, umx, umy = rng.random((5, n))
    z = (uz < pz).astype(np.int8)
    y0 = (u0 < p0).astype(np.int8)
    y1 = (u1 < p1).astype(np.int8)
    y = np.where(z == 1, y1, y0).astype(np.int8)
    return TrueWorld(x1, x2, r_star, r.astype(np.int8), u, z, y0, y1, y,
                     (umx < pmx).astype(np.int8), (umy < pmy).astype(np.int8))


def world_chunks(cfg: SimConfig, n_total: int, chunk: int, seed: int) -> Iterator[TrueWorld]:
    """Stream ``n_total`` rows in chunks; chunk ``k`` uses stream ``(seed, k)``."""
    k = 0
    done = 0
    while done < n_total:
        m = min(chunk, n_total - done)
        yield generate_true_world(cfg, make_rng(seed, k), m)
        done += m
        k += 1


SIM_ROLES = {
    "x1": ColumnRole.COVARIATE_CONT,
    "x2": ColumnRole.COVARIATE_CONT,
    "z": ColumnRole.EXPOSURE,
    "r": ColumnRole.POST_EXPOSURE,
    "y": ColumnRole.OUTCOME,
}


def mask_to_observed(world: TrueWorld) -> ObservedDataset:
    """What an analyst would see: no U or R*, R only for testers, X2 and Y
    hidden by their missingness indicators. X1 and Z are always observed."""
    x2 = np.where(world.mx == 1, np.nan, world.x2)
    r = np.where(world.z == 1, world.r.astype(float), np.nan)
    y = np.where(world.my == 1, np.nan, world.y.astype(float))
    cols = {"x1": world.x1, "x2": x2, "z": world.z.astype(float), "r": r, "y": y}
    return ObservedDataset.from_arrays(cols, SIM_ROLES)


def simulate_observed(cfg: SimConfig, rng: np.random.Generator, n: int | None = None) -> ObservedDataset:
    return mask_to_observed(generate_true_world(cfg, rng, n))


def attach_sensitivity_u(d: ObservedDataset, b1: float, sigma: float, rng: np.random.Generator,
                         center: float | None = None, name: str = "u") -> ObservedDataset:
    """Add an auxiliary predictor ``U = (Y - center) * b1 + e``, ``e ~ N(0, sigma^2)``.

    ``center`` defaults to the observed treated fraction so that U has mean
    zero. Rows with Y missing get ``U = e``.
    """
    y = d.values[d.outcome]
    miss = np.isnan(y)
    if center is None:
        center = float(np.nanmean(y))
    e = rng.normal(0.0, sigma, d.n_rows)
    u = np.where(miss, e, (y - center) * b1 + e)
    if miss.any():
        log.info("sensitivity U: %d rows with missing outcome received U = e only", int(miss.sum()))
    return d.with_columns({name: u}, {name: ColumnRole.AUXILIARY})


def variance_explained_by_u(cfg: SimConfig, n: int = 200_000, seed: int = 0, nodes: int = 40) -> float:
    """Share of Var(Y) carried by U beyond (X, R, Z): a Monte Carlo surrogate.

    Computes ``[Var E(Y|X,R,Z,U) - Var E(Y|X,R,Z)] / Var(Y)`` with the inner
    expectation over U by Gauss-Hermite quadrature.
    """
    w = generate_true_world(cfg, make_rng(seed), n)
    eta0 = cfg.y0_coefs[0] + cfg.y0_coefs[1] * w.x1 + cfg.y0_coefs[2] * w.x2
    eta1 = (cfg.y1_coefs[0] + cfg.y1_coefs[1] * w.x1 + cfg.y1_coefs[2] * w.x2
            + np.asarray(cfg.r_effects)[w.r - 1])
    full = np.where(w.z == 1, expit(eta1 + cfg.beta2 * w.u), expit(eta0 + cfg.beta1 * w.u))
    t, wt = np.polynomial.hermite_e.hermegauss(nodes)
    wt = wt / wt.sum()
    m1 = expit(eta1[:, None] + cfg.beta2 * t[None, :]) @ wt
    m0 = expit(eta0[:, None] + cfg.beta1 * t[None, :]) @ wt
    marg = np.where(w.z == 1, m1, m0)
    vy = w.y.var()
    return float((full.var() - marg.var()) / vy) if vy > 0 else 0.0
