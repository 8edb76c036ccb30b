"""Potential-outcomes multiple imputation for the causal effect of a test on
a downstream treatment decision."""

__version__ = "0.1.0"

from .data import ColumnRole, CompletedDataset, ObservedDataset, load_csv, load_schema
from .estimands import EstimandSet, estimate
from .fcs import FcsSettings, build_variant, impute
from .pooling import ipw_estimate, pool, pool_mor
from .samplers import SimConfig, make_rng, simulate_observed

__all__ = [
    "ColumnRole", "CompletedDataset", "ObservedDataset", "load_csv", "load_schema",
    "EstimandSet", "estimate", "FcsSettings", "build_variant", "impute",
    "ipw_estimate", "pool", "pool_mor", "SimConfig", "make_rng", "simulate_observed",
]
